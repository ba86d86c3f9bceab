use std::path::PathBuf;
use std::process::{Command, Output};

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convoy-lab")).args(args).output().expect("failed to start convoy-lab")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn shipped_scenarios_validate() {
    let mut count = 0;
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = lab(&["validate", path.to_str().unwrap()]);
            assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), text(&out.stderr));
            count += 1;
        }
    }
    assert_eq!(count, 6);
}

#[test]
fn unknown_field_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let original = std::fs::read_to_string(scenarios_dir().join("straight.toml")).unwrap();
    let file = dir.path().join("typo.toml");
    std::fs::write(&file, original.replace("v_t = 4.0", "v_t = 4.0\ntarget_sped = 5.0")).unwrap();

    let out = lab(&["validate", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("target_sped"), "stderr: {}", text(&out.stderr));
}

#[test]
fn missing_file_is_invalid_input() {
    let out = lab(&["validate", "no/such/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_logs() {
    let scenario = scenarios_dir().join("low_curvature.toml");
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = lab(&["run", scenario.to_str().unwrap(), "--seed", "7", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("low_curvature_convoy_7.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 7);
        logs.push(std::fs::read(dir.path().join("low_curvature_convoy_7.csv")).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
    let header = text(&logs[0]).lines().next().unwrap().to_string();
    assert_eq!(header, "tick,time,agent,x,y,psi,v,a,delta,fallback,dist_to_lead,dist_to_follow,e_m1,e_m2,w_lead,w_follow");
}

#[test]
fn compare_orders_the_controllers_in_the_tunnel() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("table.csv");
    let scenario = scenarios_dir().join("tunnel_stall.toml");
    let out = lab(&["compare", scenario.to_str().unwrap(), "--seeds", "1,2", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let table = std::fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mean_e_m2 = |controller: &str| -> f64 {
        table
            .lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|r| r[col("controller")] == controller && r[col("seed")] == "mean")
            .unwrap()[col("avg_e_m2")]
        .parse()
        .unwrap()
    };
    assert_eq!(lines.count(), 6);
    let (convoy, base) = (mean_e_m2("convoy"), mean_e_m2("base"));
    assert!(convoy < base, "convoy {convoy} vs base {base}");
}

#[test]
fn spring_demo_prints_both_cases() {
    let out = lab(&["spring-demo"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("lead_only") && stdout.contains("both"));
}

#[test]
fn bad_spring_parameters_are_invalid_input() {
    let out = lab(&["spring-demo", "--k=-1"]);
    assert_eq!(out.status.code(), Some(2));
}
