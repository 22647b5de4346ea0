//! Experiment runner: named, seed-reproducible simulations emitting JSON
//! reports and CSV plot data.
//!
//! Exit codes: 0 when every enabled assertion passes, 1 on assertion
//! failure, 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crtlab_core::experiments::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "crtlab", version, about = "cutting and shuffling simulations on random trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one named experiment and write report.json plus CSV plot data.
    Run(RunArgs),
    /// List the registered experiments.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment name (also accepted via --experiment).
    name: Option<String>,
    #[arg(long)]
    experiment: Option<String>,
    /// Base config JSON file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Deterministic default when omitted, stated in the report.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Grid size of the excursion sampler.
    #[arg(long)]
    grid: Option<usize>,
    /// Leaf count of sampled trees.
    #[arg(long)]
    leaves: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
    /// Thread cap for replica parallelism (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Tree sampler: linebreak | excursion.
    #[arg(long)]
    sampler: Option<String>,
    /// Lazy materialization block of the cutting process.
    #[arg(long)]
    horizon_block: Option<f64>,
    /// Output directory for report.json and CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for name in experiments::EXPERIMENTS {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => match run(args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        },
    }
}

fn run(args: RunArgs) -> Result<bool, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| e.to_string())?
        }
        None => ExperimentConfig::default(),
    };
    let name = args
        .name
        .or(args.experiment)
        .or(if cfg.experiment.is_empty() { None } else { Some(cfg.experiment.clone()) })
        .ok_or("missing experiment name")?;
    if !experiments::EXPERIMENTS.contains(&name.as_str()) {
        return Err(format!(
            "unknown experiment `{name}`; known: {}",
            experiments::EXPERIMENTS.join(", ")
        ));
    }
    cfg.experiment = name;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.replicas {
        cfg.replicas = v;
    }
    if let Some(v) = args.grid {
        cfg.grid = v;
    }
    if let Some(v) = args.leaves {
        cfg.leaves = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.kmax {
        cfg.kmax = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }
    if let Some(v) = args.sampler {
        cfg.sampler = v;
    }
    if let Some(v) = args.horizon_block {
        cfg.horizon_block = v;
    }
    crtlab_core::exec::set_threads(cfg.threads);

    let out = experiments::run_experiment(&cfg).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let report_path = args.out.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&out.report).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    for (name, data) in &out.csvs {
        std::fs::write(args.out.join(name), data).map_err(|e| e.to_string())?;
    }
    for t in &out.report.tests {
        let p = t
            .p_value
            .map(|p| format!(" p={p:.5}"))
            .unwrap_or_default();
        println!(
            "{}: {} (statistic={:.6} threshold={:.6}{})",
            t.test_name,
            if t.pass { "PASS" } else { "FAIL" },
            t.statistic,
            t.threshold,
            p
        );
    }
    println!(
        "report: {} ({} assertions, overall {})",
        report_path.display(),
        out.report.tests.len(),
        if out.report.pass { "PASS" } else { "FAIL" }
    );
    if !out.report.pass {
        let failing: Vec<&str> = out
            .report
            .tests
            .iter()
            .filter(|t| !t.pass)
            .map(|t| t.test_name.as_str())
            .collect();
        eprintln!("failing: {}", failing.join(", "));
    }
    Ok(out.report.pass)
}
