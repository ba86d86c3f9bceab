//! `convoy-lab`: run scenarios, compare controllers, sweep speeds and
//! reproduce the spring-damper accordion demo.
//!
//! Exit codes: 0 success, 1 a run ended in a collision, 2 invalid input or
//! any other failure.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use convoy_core::sim::spring::{self, Coupling, Disturbance, SpringSettings};
use convoy_core::sim::{self, ControllerKind, RunOutput, Scenario, World};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod table;

#[derive(Parser)]
#[command(name = "convoy-lab", version, about = "Decentralized convoy control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its CSV log and summary JSON.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run both controllers over several seeds and tabulate the metrics.
    Compare {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Repeat a scenario at several target speeds with both controllers.
    SweepSpeed {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![4.0, 5.0, 6.0, 7.0, 8.0])]
        speeds: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Three-mass spring-damper column, lead-only vs both-neighbor coupling.
    SpringDemo {
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 1.0)]
        m: f64,
        /// How long the last mass is stuck (s).
        #[arg(long, default_value_t = 4.0)]
        hold: f64,
        #[arg(long, default_value_t = 1.0)]
        v0: f64,
        /// Write the gap-error traces of both cases as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

/// Failures that map to exit code 2.
struct Invalid(anyhow::Error);

fn load(path: &Path) -> Result<Scenario, Invalid> {
    let scn = Scenario::load(path).with_context(|| format!("{}", path.display())).map_err(Invalid)?;
    World::build(&scn).with_context(|| format!("{}", path.display())).map_err(Invalid)?;
    Ok(scn)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(collided) if collided => ExitCode::from(1),
        Ok(_) => ExitCode::SUCCESS,
        Err(Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether any run ended in a collision.
fn dispatch(command: Command) -> Result<bool, Invalid> {
    let fail = |e: anyhow::Error| Invalid(e);
    match command {
        Command::Validate { scenario } => {
            let scn = load(&scenario)?;
            println!("ok: {} ({} agents, {} s)", scn.name, scn.agent_count, scn.duration);
            Ok(false)
        }
        Command::Run { scenario, controller, seed, out } => {
            let mut scn = load(&scenario)?;
            if let Some(c) = controller {
                scn.controller = c;
            }
            if let Some(s) = seed {
                scn.seed = s;
            }
            let run = sim::run(&scn).context("simulation failed").map_err(fail)?;
            write_run(&scn, &run, &out).map_err(fail)?;
            println!("{}", run.summary_json());
            Ok(run.collision.is_some())
        }
        Command::Compare { scenario, seeds, csv } => {
            let base = load(&scenario)?;
            let jobs: Vec<Scenario> = seeds
                .iter()
                .flat_map(|&seed| {
                    [ControllerKind::Convoy, ControllerKind::Base].map(|controller| Scenario { seed, controller, ..base.clone() })
                })
                .collect();
            let runs = run_all(&jobs).map_err(fail)?;
            let rows: Vec<table::Row> = jobs.iter().zip(&runs).map(|(s, r)| table::Row::new(s, r)).collect();
            let mut rows = rows;
            rows.extend(table::means(&rows));
            emit(&rows, csv.as_deref()).map_err(fail)?;
            Ok(runs.iter().any(|r| r.collision.is_some()))
        }
        Command::SweepSpeed { scenario, speeds, seed, csv } => {
            let base = load(&scenario)?;
            let jobs: Vec<Scenario> = speeds
                .iter()
                .flat_map(|&v_t| {
                    [ControllerKind::Convoy, ControllerKind::Base].map(|controller| Scenario {
                        v_t,
                        controller,
                        seed: seed.unwrap_or(base.seed),
                        ..base.clone()
                    })
                })
                .collect();
            for j in &jobs {
                World::build(j).with_context(|| format!("at {} m/s", j.v_t)).map_err(fail)?;
            }
            let runs = run_all(&jobs).map_err(fail)?;
            let rows: Vec<table::Row> = jobs.iter().zip(&runs).map(|(s, r)| table::Row::new(s, r)).collect();
            emit(&rows, csv.as_deref()).map_err(fail)?;
            Ok(false)
        }
        Command::SpringDemo { k, c, m, hold, v0, out } => {
            if !(k > 0.0 && c > 0.0 && m > 0.0 && hold >= 0.0) {
                return Err(Invalid(anyhow::anyhow!("k, c and m must be positive and hold non-negative")));
            }
            let settings = SpringSettings::default();
            let d = Disturbance::StuckTail { hold, v0 };
            let a = spring::spring_demo(Coupling::LeadOnly, k, c, m, d, &settings);
            let b = spring::spring_demo(Coupling::BothNeighbors, k, c, m, d, &settings);
            println!("case      gap_1_2_settle  gap_2_3_settle  settle   peak_error");
            for (name, o) in [("lead_only", &a), ("both", &b)] {
                println!("{name:<9} {:>14.2}  {:>14.2}  {:>6.2}  {:>11.3}", o.gap_settling[0], o.gap_settling[1], o.settling, o.peak_error);
            }
            if let Some(path) = out {
                let mut text = String::from("time,lead_only_e12,lead_only_e23,both_e12,both_e23\n");
                for (p, q) in a.trace.iter().zip(&b.trace) {
                    text.push_str(&format!("{},{},{},{},{}\n", p[0], p[1], p[2], q[1], q[2]));
                }
                std::fs::write(&path, text).with_context(|| path.display().to_string()).map_err(fail)?;
            }
            Ok(false)
        }
    }
}

fn run_all(jobs: &[Scenario]) -> Result<Vec<RunOutput>> {
    jobs.par_iter().map(|s| sim::run(s).with_context(|| format!("{} ({}, seed {}, {} m/s)", s.name, s.controller, s.seed, s.v_t))).collect()
}

fn write_run(scn: &Scenario, run: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let stem = format!("{}_{}_{}", scn.name, scn.controller, scn.seed);
    let csv_path = dir.join(format!("{stem}.csv"));
    let file = std::fs::File::create(&csv_path).with_context(|| csv_path.display().to_string())?;
    run.write_csv(std::io::BufWriter::new(file))?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, run.summary_json()).with_context(|| json_path.display().to_string())?;
    Ok(())
}

fn emit(rows: &[table::Row], csv: Option<&Path>) -> Result<()> {
    print!("{}", table::render_text(rows));
    if let Some(path) = csv {
        std::fs::write(path, table::render_csv(rows)).with_context(|| path.display().to_string())?;
    }
    Ok(())
}
