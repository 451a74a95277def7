use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sati::config;
use sati::data::{dataset_dims, generate, read_jsonl, split_indices, write_jsonl, NoiseConfig, Sample, SynthConfig};
use sati::harness::experiments::{ablate_with, noise_experiment, run};
use sati::harness::gradsuite::{run_scope, Scope, DEFAULT_SEEDS};
use sati::harness::train::{evaluate, load_checkpoint, save_checkpoint, subset};
use sati::harness::TrainConfig;
use sati::modality::{Modality, PerModality};
use sati::Result;

#[derive(Parser)]
#[command(name = "sati", version, about = "Multimodal sentiment model: data, training, experiments and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `model.weights.beta=0.2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// JSONL dataset (`.gz` accepted). Defaults to freshly generated synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset; `--config` and `--set` address the generator.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, then report test metrics and representation analyses.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Directory to save the best checkpoint into.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate every sample instead of the checkpoint's test split.
        #[arg(long)]
        all: bool,
        /// Add Gaussian noise of this standard deviation before evaluating.
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Train every ablation strategy with identical data and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train on clean data, then evaluate the test split with injected noise.
    Noise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0.5)]
        variance: f64,
        /// Overrides `--variance`.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Comma-separated modalities to perturb.
        #[arg(long, default_value = "audio,text,video", value_delimiter = ',')]
        modalities: Vec<String>,
    },
    /// Verify tape gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `ops`, `losses`, `full` or `all`.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text + "\n")?;
        }
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_samples(data: &DataArg, seed: u64) -> Result<Vec<Sample>> {
    match &data.data {
        Some(path) => read_jsonl(path),
        None => generate(&SynthConfig {
            seed,
            ..Default::default()
        }),
    }
}

/// Loads the data and sizes the encoders to its feature widths.
fn prepare(common: &Common, data: &DataArg) -> Result<(TrainConfig, Vec<Sample>)> {
    let mut cfg = train_config(common)?;
    let samples = load_samples(data, cfg.seed)?;
    cfg.model.encoder.input_dims = dataset_dims(&samples)?;
    Ok((cfg, samples))
}

fn parse_modalities(names: &[String]) -> Result<PerModality<bool>> {
    let mut mask = PerModality::new(false, false, false);
    for name in names {
        let m: Modality = name.trim().parse()?;
        mask[m] = true;
    }
    Ok(mask)
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::GenData { common } => {
            let mut synth: SynthConfig = config::load(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = common.seed {
                synth.seed = seed;
            }
            let samples = generate(&synth)?;
            match &common.out {
                Some(path) => {
                    write_jsonl(&samples, path)?;
                    eprintln!("wrote {} samples to {}", samples.len(), path.display());
                }
                None => {
                    let mut out = std::io::stdout().lock();
                    for s in &samples {
                        writeln!(out, "{}", serde_json::to_string(s)?)?;
                    }
                }
            }
        }
        Command::Train { common, data, checkpoint } => {
            let (cfg, samples) = prepare(&common, &data)?;
            let (trained, report) = run(&cfg, &samples)?;
            if let Some(dir) = &checkpoint {
                save_checkpoint(dir, &cfg, &trained)?;
            }
            let m = &report.test.metrics;
            eprintln!(
                "best epoch {}: acc2 {:.4} f1 {:.4} acc7 {:.4} mae {:.4} corr {:.4}",
                report.best_epoch, m.acc2_nonneg, m.f1_nonneg, m.acc7, m.mae, m.corr
            );
            emit(common.out.as_deref(), &report)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            all,
            noise_std,
        } => {
            let (model, store, cfg) = load_checkpoint(&checkpoint)?;
            let samples = load_samples(&data, common.seed.unwrap_or(cfg.seed))?;
            let mut selected = if all {
                samples
            } else {
                let split = split_indices(samples.len(), cfg.train_fraction, cfg.val_fraction, cfg.seed)?;
                subset(&samples, &split.test)
            };
            if let Some(std) = noise_std {
                let noise = NoiseConfig {
                    std: Some(std),
                    seed: common.seed.unwrap_or(cfg.seed),
                    ..Default::default()
                };
                selected = sati::data::add_noise(&selected, &noise)?;
            }
            let report = evaluate(&model, &store, &selected, cfg.eval_batch_size)?;
            emit(common.out.as_deref(), &report)?;
        }
        Command::Ablate { common, data } => {
            let (cfg, samples) = prepare(&common, &data)?;
            let rows = ablate_with(&cfg, &samples, |row, _| {
                let m = &row.report.test.metrics;
                eprintln!(
                    "{:<8} acc2 {:.4} f1 {:.4} acc7 {:.4} mae {:.4} corr {:.4}",
                    row.strategy, m.acc2_nonneg, m.f1_nonneg, m.acc7, m.mae, m.corr
                );
            })?;
            emit(common.out.as_deref(), &rows)?;
        }
        Command::Noise {
            common,
            data,
            variance,
            noise_std,
            modalities,
        } => {
            let (cfg, samples) = prepare(&common, &data)?;
            let noise = NoiseConfig {
                variance,
                std: noise_std,
                modalities: parse_modalities(&modalities)?,
                seed: cfg.seed,
            };
            let report = noise_experiment(&cfg, &samples, &noise)?;
            eprintln!(
                "acc2 {:+.4} acc7 {:+.4} mae {:+.4} corr {:+.4} (injected variance {:.4})",
                report.delta.acc2_nonneg, report.delta.acc7, report.delta.mae, report.delta.corr, report.empirical_variance
            );
            emit(common.out.as_deref(), &report)?;
        }
        Command::Gradcheck { common, scope, seeds } => {
            let scopes = match scope.as_str() {
                "all" => vec![Scope::Ops, Scope::Losses, Scope::Full],
                s => vec![s.parse()?],
            };
            let mut summaries = Vec::new();
            for s in scopes {
                summaries.extend(run_scope(s, seeds, common.seed.unwrap_or(0))?);
            }
            for c in &summaries {
                eprintln!(
                    "{} {:<22} worst {:.3e} (tol {:.0e})",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.worst_rel_error,
                    c.tolerance
                );
            }
            emit(common.out.as_deref(), &summaries)?;
            return Ok(summaries.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
