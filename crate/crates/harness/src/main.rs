use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lori_harness::{run_pipeline, AdapterFile, ExperimentConfig, HarnessError, Stage};

#[derive(Parser)]
#[command(name = "lori", version, about = "Frozen random projections with sparsely masked adapters")]
struct Cli {
    /// Experiment config (TOML). Defaults to the reference configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate masks for every task and write the sparsity profile.
    Calibrate,
    /// Calibrate, train and save one adapter set per task.
    Train,
    /// Train every variant, merge, and report per-task interference.
    Merge {
        #[arg(long, value_parser = ["concat", "linear", "magnitude", "ties", "dare"])]
        method: Option<String>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        density: Option<f64>,
    },
    /// Sparsity sweep over the configured ratios.
    Eval,
    /// Random-projection orthogonality trials and decay sweep.
    Ortho,
    /// Two-phase continual learning and the forgetting report.
    Continual,
    /// Print an adapter file's header and sparsity profile.
    Inspect { file: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Command::Merge { method, weights, density } = &cli.command {
        if let Some(m) = method {
            cfg.merge.methods = vec![m.clone()];
        }
        if let Some(w) = weights {
            cfg.merge.weights = w.clone();
        }
        if let Some(d) = density {
            cfg.merge.density = *d;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn inspect(file: &PathBuf) -> Result<(), HarnessError> {
    let f = AdapterFile::load(file)?;
    let m = &f.meta;
    println!("file: {}", file.display());
    println!("created_by: {}", m.created_by);
    println!("task_id: {}  rank: {}  alpha: {}  seed: {}", m.task_id, m.rank, m.alpha, m.seed);
    match &m.sparsity {
        Some(s) => println!("sparsity: {} ({})", s.sparsity, s.granularity),
        None => println!("sparsity: dense"),
    }
    println!("{:<12} {:>6} {:>6} {:>9} {:>9} {:>9}", "slot", "d_in", "d_out", "retained", "total", "fraction");
    let (mut kept, mut total) = (0, 0);
    for (s, ad) in m.slots.iter().zip(&f.adapters) {
        let (k, n) = (ad.mask().count_ones(), ad.mask().len());
        kept += k;
        total += n;
        println!("{:<12} {:>6} {:>6} {:>9} {:>9} {:>9.4}", s.name, s.d_in, s.d_out, k, n, k as f64 / n as f64);
    }
    println!("{:<12} {:>6} {:>6} {:>9} {:>9} {:>9.4}", "all", "", "", kept, total, kept as f64 / total as f64);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let stage = match &cli.command {
        Command::Inspect { file } => return inspect(file),
        Command::Calibrate => Stage::Calibrate,
        Command::Train => Stage::Train,
        Command::Merge { .. } => Stage::Merge,
        Command::Eval => Stage::Eval,
        Command::Ortho => Stage::Ortho,
        Command::Continual => Stage::Continual,
    };
    let cfg = load_config(cli)?;
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("lori-out"));
    let out = run_pipeline(&cfg, &[stage], &dir)?;
    for f in &out.manifest.outputs {
        println!("{}", out.dir.join(f).display());
    }
    println!("{}", out.dir.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
