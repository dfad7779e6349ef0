use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsmpc::bench::{init_global_workers, run_cells, table_grid, workers_from_env};
use dsmpc::metrics::{markdown_table, status_label, write_csv};
use dsmpc::orchestrator::{ControllerKind, RunOptions, Termination};
use dsmpc::runlog::{load_run_log, save_run, RunFiles};
use dsmpc::scenario::{load_scenario, random_config, Scenario};
use dsmpc::{baselines, probe, verify, Error};

const EXIT_INFEASIBLE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "dsmpc", version, about = "Distributed safety-critical MPC runner, benchmark and verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller on a scenario and write log, trajectory and metrics
    Run {
        /// Scenario JSON file, or `random` for a generated one (see --seed)
        scenario: String,
        #[arg(long, default_value = "dsmpc")]
        controller: ControllerKind,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Seed of the random scenario generator
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the prediction horizon
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the compatibility rate
        #[arg(long)]
        gamma: Option<f64>,
        /// Solve agents one after another
        #[arg(long)]
        serial: bool,
    },
    /// Run every controller over the comparison grid for each scenario in a directory
    Bench {
        scenario_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-check a run log against its controller's invariants
    Verify { run_log: PathBuf },
    /// Sample safe states and probe relative degree and the input condition
    Probe {
        scenario: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Parse(_) => EXIT_USAGE,
        _ => EXIT_INFEASIBLE,
    }
}

fn load(arg: &str, seed: u64) -> Result<Scenario, Error> {
    if arg == "random" {
        random_config(seed).build()
    } else {
        load_scenario(Path::new(arg))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match workers_from_env() {
        Ok(n) => n,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    match cli.command {
        Command::Run { scenario, controller, out, seed, horizon, gamma, serial } => {
            init_global_workers(workers);
            cmd_run(&scenario, controller, &out, seed, horizon, gamma, serial)
        }
        Command::Bench { scenario_dir, out } => cmd_bench(&scenario_dir, &out, workers),
        Command::Verify { run_log } => cmd_verify(&run_log),
        Command::Probe { scenario, samples, seed } => cmd_probe(&scenario, samples, seed),
    }
}

fn cmd_run(
    arg: &str,
    controller: ControllerKind,
    out: &Path,
    seed: u64,
    horizon: Option<usize>,
    gamma: Option<f64>,
    serial: bool,
) -> ExitCode {
    let scenario = match load(arg, seed).and_then(|s| {
        let mut c = s.config;
        if let Some(h) = horizon {
            c.controller.horizon = h;
        }
        if let Some(g) = gamma {
            c.controller.gamma = g;
        }
        c.build()
    }) {
        Ok(s) => s,
        Err(e) => return fail(error_code(&e), e),
    };
    let record = match baselines::run_controller(&scenario, controller, RunOptions { parallel: !serial }) {
        Ok(r) => r,
        Err(e) => return fail(error_code(&e), e),
    };
    let stem = format!("{}_{}", scenario.config.name, controller_slug(controller));
    let files = RunFiles::in_dir(out, &stem);
    let metrics = match save_run(&record, &scenario, &files) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    println!(
        "{} on {}: {} after {} rounds, final formation error {:.4}",
        metrics.controller,
        scenario.config.name,
        status_label(record.termination),
        record.rounds.len(),
        record.final_formation_error
    );
    println!("min_d {:.4}  max_r {:.4}  cost {:.2}", metrics.min_d, metrics.max_r, metrics.cost);
    for p in [&files.log, &files.trajectory, &files.metrics] {
        println!("wrote {}", p.display());
    }
    match (record.termination, record.failure) {
        (Termination::Infeasible | Termination::NumericalFailure, Some((t, agent))) => fail(
            EXIT_INFEASIBLE,
            format!("solve of agent {} failed at round {t} ({:?})", agent + 1, record.termination),
        ),
        _ => ExitCode::SUCCESS,
    }
}

fn controller_slug(k: ControllerKind) -> &'static str {
    match k {
        ControllerKind::Dsmpc => "dsmpc",
        ControllerKind::MpcDc => "mpc-dc",
        ControllerKind::NcCbf => "nc-cbf",
        ControllerKind::ClfCbf => "clf-cbf",
    }
}

fn cmd_bench(dir: &Path, out: &Path, workers: usize) -> ExitCode {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) => return fail(EXIT_USAGE, format!("{}: {e}", dir.display())),
    };
    paths.sort();
    if paths.is_empty() {
        return fail(EXIT_USAGE, format!("no scenario files in {}", dir.display()));
    }
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(EXIT_USAGE, format!("{}: {e}", out.display()));
    }
    let grid = table_grid();
    let mut rows = Vec::new();
    let mut markdown = String::new();
    for path in &paths {
        let scenario = match load_scenario(path) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_USAGE, format!("{}: {e}", path.display())),
        };
        let runs = match run_cells(&scenario, &grid, workers) {
            Ok(r) => r,
            Err(e) => return fail(error_code(&e), e),
        };
        let metrics: Vec<_> = runs.iter().map(|r| r.metrics.clone()).collect();
        markdown.push_str(&format!("## {}\n\n{}\n", scenario.config.name, markdown_table(&metrics)));
        for r in runs {
            eprintln!("{} {:?}: {} in {:.1}s", r.metrics.controller, r.cell.horizon, status_label(r.record.termination), r.wall_time);
            rows.push((scenario.config.name.clone(), r.metrics));
        }
    }
    let csv_path = out.join("bench.csv");
    let md_path = out.join("bench.md");
    let written = File::create(&csv_path)
        .map_err(Error::from)
        .and_then(|f| write_csv(&rows, BufWriter::new(f)))
        .and_then(|_| std::fs::write(&md_path, &markdown).map_err(Error::from));
    if let Err(e) = written {
        return fail(EXIT_USAGE, e);
    }
    print!("{markdown}");
    println!("wrote {} and {}", csv_path.display(), md_path.display());
    ExitCode::SUCCESS
}

fn cmd_verify(path: &Path) -> ExitCode {
    let record = match load_run_log(path) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let report = match verify::verify_record(&record) {
        Ok(r) => r,
        Err(e) => return fail(error_code(&e), e),
    };
    if report.passed() {
        println!(
            "ok: {} checks over {} rounds ({} candidate checks skipped by the probe)",
            report.checks,
            record.rounds.len(),
            report.oracle_skipped
        );
        ExitCode::SUCCESS
    } else {
        for v in &report.violations {
            eprintln!("{v}");
        }
        fail(EXIT_VIOLATION, format!("{} of {} checks failed", report.violations.len(), report.checks))
    }
}

fn cmd_probe(path: &Path, samples: usize, seed: u64) -> ExitCode {
    let scenario = match load_scenario(path) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let summaries = match probe::sweep(&scenario, samples, seed) {
        Ok(s) => s,
        Err(e) => return fail(error_code(&e), e),
    };
    println!("agent obstacle safe_samples rel_degree_failures input_condition_failures worst_margin");
    for s in &summaries {
        println!(
            "{} {} {} {} {} {:.3e}",
            s.agent + 1,
            s.obstacle + 1,
            s.in_safe_set,
            s.relative_degree_failures,
            s.input_condition_failures,
            s.worst_margin
        );
        if s.input_condition_failures > 0 {
            if let Some(x) = &s.worst_state {
                println!("  worst state {x:?}");
            }
        }
    }
    ExitCode::SUCCESS
}
