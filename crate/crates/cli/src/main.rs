//! `fusioncast` command-line tool.
//!
//! Settings resolve in order of increasing precedence: built-in defaults, the
//! `--config` JSON file, then command-line flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusioncast::config::RunConfig;
use fusioncast::dataset::write_csv;
use fusioncast::numerics::RandomStream;
use fusioncast::pipeline;
use fusioncast::synth::{generate, SynthSpec};
use fusioncast::Error;

#[derive(Parser, Debug)]
#[command(name = "fusioncast", version, about = "Probabilistic long-horizon forecasting pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Input CSV, overriding `dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Master seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Forecast without stored representations.
    #[arg(long, global = true)]
    no_repr: bool,

    /// Replace attention fusion with a linear merge.
    #[arg(long, global = true)]
    no_fusion: bool,

    /// Replace the flow head with a Gaussian head.
    #[arg(long, global = true)]
    no_flow: bool,

    /// Report metrics on the original scale.
    #[arg(long, global = true)]
    denormalized: bool,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastively pretrain the encoder on the training split.
    Pretrain,
    /// Encode multiscale representations into the store.
    Encode,
    /// Train the forecaster on stored representations.
    Train,
    /// Write forecast quantiles for every series.
    Forecast {
        /// Steps to forecast, overriding `forecast.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
        /// Timestamp of the last observed row, overriding `forecast.origin`.
        #[arg(long)]
        origin: Option<i64>,
    },
    /// Score the model and the seasonal-naive baseline on the test split.
    Evaluate,
    /// Generate a synthetic dataset into the output directory.
    Synth {
        /// JSON spec of sinusoids, trend, noise, length and stride.
        #[arg(long)]
        spec: PathBuf,
        /// File name inside the output directory.
        #[arg(long, default_value = "synth.csv")]
        name: String,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.ablation.no_repr |= c.no_repr;
    cfg.ablation.no_fusion |= c.no_fusion;
    cfg.ablation.no_flow |= c.no_flow;
    cfg.eval.denormalized |= c.denormalized;
    cfg.validate()?;
    Ok(cfg)
}

/// A bare file name, so that writes stay inside the output directory.
fn confined(dir: &Path, name: &str) -> Result<PathBuf, Error> {
    let p = Path::new(name);
    if p.file_name().map(|f| f == p.as_os_str()) != Some(true) {
        return Err(Error::Config(format!("`{name}` must be a plain file name inside the output directory")));
    }
    Ok(dir.join(p))
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth { spec, name } => {
            let spec = SynthSpec::from_json_file(&spec)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = confined(&cfg.output_dir, &name)?;
            let series = generate(&spec, &RandomStream::new(cfg.seed))?;
            write_csv(&series, &path)?;
            println!("wrote {} series × {} rows to {}", series.len(), spec.length, path.display());
        }
        Command::Pretrain => {
            let raw = pipeline::load_dataset(&cfg)?;
            pipeline::run_pretrain(&cfg, &raw)?;
            println!("encoder written to {}", cfg.output_dir.join("encoder.json").display());
        }
        Command::Encode => {
            let raw = pipeline::load_dataset(&cfg)?;
            let n = pipeline::run_encode(&cfg, &raw)?;
            println!("{n} anchors written to {}", cfg.output_dir.join("representations.store").display());
        }
        Command::Train => {
            let raw = pipeline::load_dataset(&cfg)?;
            let (_, report) = pipeline::run_train(&cfg, &raw)?;
            let last = report.losses.last().map_or(f64::NAN, |s| s.nll);
            println!(
                "trained on {} windows ({} skipped); final nll {last:.5}; model written to {}",
                report.windows,
                report.skipped,
                cfg.output_dir.join("model.json").display()
            );
        }
        Command::Forecast { horizon, origin } => {
            if let Some(h) = horizon {
                cfg.forecast.horizon = h;
            }
            if origin.is_some() {
                cfg.forecast.origin = origin;
            }
            cfg.validate()?;
            let raw = pipeline::load_dataset(&cfg)?;
            let dists = pipeline::run_forecast(&cfg, &raw)?;
            println!(
                "{} forecasts of {} steps written to {}",
                dists.len(),
                cfg.forecast.horizon,
                cfg.output_dir.join("forecast.csv").display()
            );
        }
        Command::Evaluate => {
            let raw = pipeline::load_dataset(&cfg)?;
            let eval = pipeline::run_evaluate(&cfg, &raw)?;
            println!("{:>8} {:>12} {:>12} {:>12} {:>12}", "horizon", "mse", "mae", "naive_mse", "naive_mae");
            for (m, b) in eval.model.iter().zip(&eval.baseline) {
                let h = m.horizon.map_or("avg".to_string(), |h| h.to_string());
                println!("{h:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6}", m.mse, m.mae, b.mse, b.mae);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Ingestion(_) | Error::InsufficientHistory { .. } => 2,
        Error::MissingArtifact { .. }
        | Error::Schema(_)
        | Error::Integrity(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 3,
        Error::Numeric { .. } => 4,
        Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
