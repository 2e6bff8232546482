use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hssh::harness::checkpoint::{load_checkpoint, save_checkpoint};
use hssh::harness::export::{style_export, write_style_csv};
use hssh::harness::train::metrics_jsonl;
use hssh::harness::{evaluate, generate_dataset, train, verify, Dataset, ExperimentConfig, Splits};
use hssh::{Error, Result};

#[derive(Parser)]
#[command(name = "hssh", version, about = "Hyperbolic state space hallucination on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, writing metrics.jsonl and model.hssp.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
        /// Directory written by `generate`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Run every property suite; exits with 1 if any check fails.
    Verify,
    /// Export original and hallucinated (μ, σ) clouds as CSV.
    StyleExport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Train)]
        split: SplitName,
        /// Number of batches to export.
        #[arg(long, default_value_t = 16)]
        batches: usize,
    },
}

#[derive(Args)]
struct Common {
    /// JSON document with optional `synthetic`, `run` and `encoder` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    no_ssh: bool,
    #[arg(long)]
    no_hmc: bool,
    /// Hallucinated stages, e.g. `1,2,3,4`.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn file(self) -> &'static str {
        Splits::FILES[self as usize]
    }
}

fn load_config(common: &Common, ablation: Option<&Ablation>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.synthetic.seed = seed;
        cfg.run.seed = seed;
    }
    if let Some(a) = ablation {
        cfg.run.enable_ssh &= !a.no_ssh;
        cfg.run.enable_hmc &= !a.no_hmc;
        if let Some(stages) = &a.stages {
            cfg.run.stages_hallucinated = stages.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common, None)?;
            let splits = generate_dataset(&cfg.synthetic)?;
            splits.write(&common.out)?;
            let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
            write_file(&common.out.join("config.json"), json.as_bytes())?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                common.out.display()
            );
        }
        Command::Train {
            common,
            ablation,
            data,
        } => {
            let cfg = load_config(&common, Some(&ablation))?;
            let splits = match &data {
                Some(dir) => Splits::read(dir)?,
                None => generate_dataset(&cfg.synthetic)?,
            };
            create_dir(&common.out)?;
            let metrics_path = common.out.join("metrics.jsonl");
            let mut file = fs::File::create(&metrics_path).map_err(|e| Error::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
            let outcome = train(&cfg.run, &cfg.encoder, &splits, |m| {
                let line = metrics_jsonl(std::slice::from_ref(m));
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| Error::Io {
                        path: metrics_path.clone(),
                        source: e,
                    })?;
                let pct = |v: Option<f64>| v.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a));
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val {}  target {}",
                    m.epoch,
                    m.train_loss,
                    pct(m.val_acc),
                    pct(m.target_acc)
                );
                Ok(())
            })?;
            save_checkpoint(&outcome.model, &common.out.join("model.hssp"))?;
            let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
            write_file(&common.out.join("config.json"), json.as_bytes())?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::read(&data.join(split.file()))?;
            println!("{:.6}", evaluate(&model, &ds)?);
        }
        Command::Verify => {
            let report = verify()?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::StyleExport {
            common,
            ablation,
            checkpoint,
            data,
            split,
            batches,
        } => {
            let cfg = load_config(&common, Some(&ablation))?;
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::read(&data.join(split.file()))?;
            let rows = style_export(&model, &ds, &cfg.run, batches)?;
            let path = if common.out.extension().is_some_and(|e| e == "csv") {
                common.out.clone()
            } else {
                create_dir(&common.out)?;
                common.out.join("styles.csv")
            };
            write_style_csv(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Io { .. } | Error::Format { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
