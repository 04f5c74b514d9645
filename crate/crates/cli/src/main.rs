use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvicreg_core::gradcheck::run_gradcheck;
use kvicreg_core::train::{probe_network, run_training, TrainConfig, CHECKPOINT_FILE};
use kvicreg_core::encoder::MlpNetwork;
use kvicreg_core::{Error, KernelKind};

const THREADS_VAR: &str = "KVICREG_THREADS";

#[derive(Parser)]
#[command(name = "kvicreg", version, about = "Kernel VICReg trainer and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write metrics.csv, checkpoint.bin and embeddings.csv.
    Train(Common),
    /// Fit a linear probe on a checkpoint's encodings (80/20 split).
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to checkpoint.bin in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        /// Comma-separated kernel names; an empty string checks nothing.
        #[arg(long, default_value = "linear,polynomial,rbf,laplacian,rational_quadratic")]
        kernels: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as gradcheck.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default configuration, with field notes, to PATH ("-" for stdout).
    ExportConfig { path: PathBuf },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_io_or_parse() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut config = match &common.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn configure_threads() -> Result<(), Failure> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
            code: 2,
            message: format!("{THREADS_VAR} must be a positive integer, got {v:?}"),
        })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure { code: 1, message: e.to_string() })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn train(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    let outcome = run_training(&config)?;
    match outcome.rows.last() {
        Some(last) => println!(
            "trained {} steps: total {:.6} lambda_1 {:.6e} -> {}",
            last.step,
            last.report.total,
            last.lambdas()[0],
            outcome.output_dir.display()
        ),
        None => println!("0 steps: wrote initial artifacts to {}", outcome.output_dir.display()),
    }
    Ok(())
}

fn probe(common: &Common, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let config = load_config(common)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join(CHECKPOINT_FILE));
    let network = MlpNetwork::read_checkpoint(fs::File::open(&ckpt).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", ckpt.display()),
    })?)?;
    let dataset = config.dataset.load()?;
    let outcome = probe_network(&network, &dataset, config.seed, &config.probe)?;
    println!(
        "probe test accuracy {:.4} (train {:.4}, {} / {} split, seed {})",
        outcome.test_accuracy,
        outcome.train_accuracy,
        outcome.train_size,
        outcome.test_size,
        outcome.split_seed
    );
    fs::create_dir_all(&config.output_dir)?;
    write_json(&config.output_dir.join("probe.json"), &outcome)
}

fn gradcheck(kernels: &str, trials: usize, tolerance: f64, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let kinds = kernels
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            KernelKind::parse(s).ok_or_else(|| Failure {
                code: 2,
                message: format!("unknown kernel {s:?}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = run_gradcheck(&kinds, trials, tolerance, seed)?;
    for c in &report.checks {
        let verdict = if c.max_relative_error <= tolerance && tolerance > 0.0 { "ok" } else { "FAIL" };
        println!(
            "{:<18} max relative error {:.3e} over {} trials ({} redraws)  {verdict}",
            c.kernel.name(),
            c.max_relative_error,
            c.trials,
            c.redraws
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("gradient check failed at tolerance {tolerance:e}"),
        })
    }
}

fn export_config(path: &Path) -> Result<(), Failure> {
    let text = TrainConfig::template().to_json() + "\n";
    if path.as_os_str() == "-" {
        std::io::stdout().write_all(text.as_bytes())?;
    } else {
        fs::write(path, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Train(common) => train(common),
        Command::Probe { common, checkpoint } => probe(common, checkpoint.as_deref()),
        Command::Gradcheck { kernels, trials, tolerance, seed, out } => {
            gradcheck(kernels, *trials, *tolerance, *seed, out.as_deref())
        }
        Command::ExportConfig { path } => export_config(path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
