use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmpc::sim_harness::{self, HarnessError, ScenarioConfig};
use dmpc::terminal_gain::DeltaInterval;
use nalgebra::DMatrix;

/// Distributed MPC simulator for leader-following consensus.
#[derive(Debug, Parser)]
#[command(name = "dmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the terminal gain, Riccati residual, admissible disc radii and disc check.
    Gain { scenario: PathBuf },
    /// Run every scenario validation and print the verdicts.
    Check { scenario: PathBuf },
    /// Run the scenario and write trace.csv, terminal.csv and summary.json.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the disturbance seed of the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun with initial errors scaled by each factor and report feasibility.
    Probe {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        scales: Vec<f64>,
    },
}

fn matrix(name: &str, m: &DMatrix<f64>) {
    println!("{name} =");
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>24.16e}")).collect();
        println!("  [{}]", cells.join(", "));
    }
}

fn gain(cfg: &ScenarioConfig) {
    println!("scenario: {}", cfg.name);
    let (lo, hi) = cfg.delta_interval.bounds();
    println!("delta interval: ({lo:.16e}, {hi:.16e})");
    if let DeltaInterval::Open { rank_warning: true, .. } = cfg.delta_interval {
        println!("warning: A has unstable eigenvalues and rank(B) != 1");
    }
    println!("delta: {:.16e}", cfg.delta);
    let mut seen: Vec<*const dmpc::TerminalGain> = Vec::new();
    for (i, g) in cfg.gains.iter().enumerate() {
        let ptr = std::sync::Arc::as_ptr(g);
        if seen.contains(&ptr) {
            continue;
        }
        seen.push(ptr);
        let users: Vec<String> = cfg
            .gains
            .iter()
            .enumerate()
            .filter(|(_, h)| std::sync::Arc::as_ptr(h) == ptr)
            .map(|(j, _)| (j + 1).to_string())
            .collect();
        println!("controller of agents {} (first: {}):", users.join(","), i + 1);
        matrix("P", &g.p);
        matrix("K", &g.k);
        println!("riccati residual: {:.3e} (relative {:.3e})", g.mare_residual, g.relative_residual());
        println!(
            "disc check: max spectral radius {:.16e} over {} samples, worst sigma {:.6}{:+.6}i",
            g.disc.max_spectral_radius, g.disc.samples, g.disc.worst_sigma.re, g.disc.worst_sigma.im
        );
    }
    let rho = dmpc::linalg::spectral_radius(&cfg.terminal_propagator());
    println!("terminal propagator spectral radius: {rho:.16e}");
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gain { scenario } => {
            gain(&sim_harness::load_scenario(scenario)?);
        }
        Command::Check { scenario } => {
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", scenario.display())))?;
            let file = sim_harness::parse_scenario(&text)?;
            let (verdicts, result) = sim_harness::assess(&file);
            for v in &verdicts {
                println!("{:<5} {:<26} {}", if v.holds { "ok" } else { "FAIL" }, v.name, v.detail);
            }
            result?;
            println!("all checks passed");
        }
        Command::Simulate { scenario, out, seed } => {
            let cfg = sim_harness::load_scenario(scenario)?;
            let log = sim_harness::run_scenario_seeded(&cfg, seed)?;
            let summary = sim_harness::emit_outputs(&log, &cfg, &out)?;
            println!(
                "{}: {} rounds, converged = {}, outputs in {}",
                cfg.name,
                summary.rounds,
                summary.converged,
                out.display()
            );
        }
        Command::Probe { scenario, scales } => {
            let cfg = sim_harness::load_scenario(scenario)?;
            let report = sim_harness::probe_scenario(&cfg, &scales)?;
            for e in &report.entries {
                match &e.failure {
                    None => println!("scale {:<10} feasible ({} rounds)", e.scale, e.rounds_completed),
                    Some(f) => println!("scale {:<10} infeasible after {} rounds: {f}", e.scale, e.rounds_completed),
                }
            }
            match report.best {
                Some(s) => println!("largest feasible scale: {s}"),
                None => println!("no feasible scale"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
