//! Comparison tables in aligned text and CSV.

use convoy_core::sim::{RunOutput, Scenario};

#[derive(Debug, Clone)]
pub struct Row {
    pub scenario: String,
    pub controller: String,
    /// Empty for aggregate rows.
    pub seed: String,
    pub v_t: f64,
    pub avg_e_m1: Option<f64>,
    pub avg_e_m2: Option<f64>,
    pub max_e_m2: Option<f64>,
    pub collision: bool,
    pub completion: f64,
}

impl Row {
    pub fn new(scn: &Scenario, run: &RunOutput) -> Self {
        let s = &run.summary;
        Row {
            scenario: s.scenario.clone(),
            controller: s.controller.clone(),
            seed: s.seed.to_string(),
            v_t: scn.v_t,
            avg_e_m1: s.avg_e_m1,
            avg_e_m2: s.avg_e_m2,
            max_e_m2: s.max_e_m2,
            collision: s.collision,
            completion: s.completion,
        }
    }
}

fn avg(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// One mean row per controller, in order of first appearance.
pub fn means(rows: &[Row]) -> Vec<Row> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.controller.as_str()) {
            order.push(&r.controller);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let group: Vec<&Row> = rows.iter().filter(|r| r.controller == c).collect();
            Row {
                scenario: group[0].scenario.clone(),
                controller: c.to_string(),
                seed: "mean".into(),
                v_t: group[0].v_t,
                avg_e_m1: avg(group.iter().map(|r| r.avg_e_m1)),
                avg_e_m2: avg(group.iter().map(|r| r.avg_e_m2)),
                max_e_m2: group.iter().map(|r| r.max_e_m2).collect::<Option<Vec<f64>>>().and_then(|v| v.into_iter().reduce(f64::max)),
                collision: group.iter().any(|r| r.collision),
                completion: group.iter().map(|r| r.completion).sum::<f64>() / group.len() as f64,
            }
        })
        .collect()
}

const HEADER: [&str; 9] = ["scenario", "controller", "seed", "v_t", "avg_e_m1", "avg_e_m2", "max_e_m2", "collision", "completion"];

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn cells(r: &Row) -> [String; 9] {
    [
        r.scenario.clone(),
        r.controller.clone(),
        r.seed.clone(),
        format!("{:.2}", r.v_t),
        fmt(r.avg_e_m1),
        fmt(r.avg_e_m2),
        fmt(r.max_e_m2),
        r.collision.to_string(),
        format!("{:.3}", r.completion),
    ]
}

pub fn render_text(rows: &[Row]) -> String {
    let body: Vec<[String; 9]> = rows.iter().map(cells).collect();
    let mut width: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
    for r in &body {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        parts.join("  ") + "\n"
    };
    let mut out = line(HEADER.iter().map(|h| h.to_string()).collect());
    for r in body {
        out.push_str(&line(r.to_vec()));
    }
    out
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut out = HEADER.join(",") + "\n";
    for r in rows {
        let c = cells(r);
        out.push_str(&c.join(","));
        out.push('\n');
    }
    out
}
