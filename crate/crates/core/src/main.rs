use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use ganomaly::config::RunConfig;
use ganomaly::pipeline;
use ganomaly::scoring::{Scaling, Variant};
use ganomaly::{Error, Result};

#[derive(Parser)]
#[command(name = "ganomaly", version, about = "Adversarial anomaly detection on images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override both the dataset and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the split and write it as split.json.
    Prepare(Common),
    /// Train a model; checkpoints and telemetry go to a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue the run in this directory from its latest checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score, scale and threshold the test partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        scaling: Option<Scaling>,
        /// Output directory (default: a new run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-digit-out AUC table.
    ReproduceMnist {
        #[command(flatten)]
        common: Common,
        /// Comma-separated digits (default: all ten).
        #[arg(long, value_delimiter = ',')]
        digits: Option<Vec<u8>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score individual image files.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "v1")]
        variant: Variant,
        /// Reference score range `MIN,MAX` for scaling, e.g. from training data.
        #[arg(long, value_delimiter = ',')]
        reference_range: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(common) => {
            let s = pipeline::prepare(&load(&common)?)?;
            println!(
                "{}\ntrain_normal {}\ntest_normal {}\ntest_abnormal {}",
                s.run_dir.display(),
                s.counts.train_normal,
                s.counts.test_normal,
                s.counts.test_abnormal
            );
        }
        Command::Train { common, resume } => {
            let out = pipeline::train_run(&load(&common)?, resume.as_deref())?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            variant,
            scaling,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(v) = variant {
                cfg.scoring.variant = v;
            }
            if let Some(s) = scaling {
                cfg.scoring.scaling = s;
            }
            let problems = cfg.problems();
            if !problems.is_empty() {
                return Err(Error::ConfigList(problems));
            }
            let r = pipeline::evaluate(&cfg, &checkpoint, out.as_deref())?;
            if let Some(w) = &r.report.warning {
                eprintln!("WARNING: {w}");
            }
            let m = &r.report.metrics;
            println!(
                "{}\ntau {}  f1 {:.4}  acc {:.4}  precision {:.4}  sensitivity {:.4}  auc {:.4}",
                r.out_dir.display(),
                r.report.threshold,
                m.f1,
                m.accuracy,
                m.precision,
                m.sensitivity,
                r.report.auc
            );
        }
        Command::ReproduceMnist { common, digits, out } => {
            let cfg = load(&common)?;
            let digits = digits.unwrap_or_else(|| (0..10).collect());
            let (dir, summary) = pipeline::reproduce_mnist(&cfg, &digits, out.as_deref())?;
            print!("{}", summary.table.to_csv());
            println!("high AUC (>= {}): {:?}", pipeline::HIGH_AUC, summary.high_auc_digits);
            println!("{}", dir.display());
        }
        Command::Score {
            checkpoint,
            variant,
            reference_range,
            threshold,
            images,
        } => {
            let reference = match reference_range.as_deref() {
                None => None,
                Some(&[lo, hi]) => Some((lo, hi)),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "--reference-range takes MIN,MAX, got {} value(s)",
                        other.len()
                    )))
                }
            };
            for s in pipeline::score_images(&checkpoint, &images, variant, reference, threshold)? {
                match (s.scaled_score, s.novel) {
                    (Some(v), Some(n)) => println!(
                        "{}\t{:.6}\t{:.6}\t{}",
                        s.path.display(),
                        s.raw_score,
                        v,
                        if n { "novel" } else { "normal" }
                    ),
                    _ => println!("{}\t{:.6}", s.path.display(), s.raw_score),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::ConfigList(items) => {
                    error!("configuration has {} problem(s):", items.len());
                    for i in items {
                        eprintln!("  - {i}");
                    }
                }
                Error::MissingImages(ids) => {
                    error!("{} image file(s) missing:", ids.len());
                    for i in ids {
                        eprintln!("  - {i}");
                    }
                }
                other => error!("{other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
