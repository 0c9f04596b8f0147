//! `gnp` command-line interface: `train`, `eval`, `kernel-dump`, `selftest`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gnp_core::experiment::{ArtifactMeta, Checkpoint, ExperimentConfig, ResultRow, ResultsTable};
use gnp_core::models::Model;
use gnp_core::selftest::{self, SelftestOptions};
use gnp_core::taskgen::{GeneratorSpec, SplitSpec};
use gnp_core::training::{evaluate, train, Predictor, TrainHistory};
use gnp_core::Error;

/// Environment variable consulted when `--out-dir` is not given.
pub const OUT_DIR_ENV: &str = "GNP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "gnp", version, about = "Gaussian neural process lab")]
pub struct Cli {
    /// Root directory for artifacts.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint or an oracle on the config's tasks and splits.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Empty-context covariance of a trained GNP against the true kernel.
    KernelDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `start:stop:step`, inclusive of `stop`.
        #[arg(long, default_value = "0:2:0.1")]
        lags: String,
    },
    /// Run the divergence and model property suites.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train { config, seed } => {
            let dir = cmd_train(config, *seed, &cli.out_dir)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            n_tasks,
            seed,
        } => {
            let path = cmd_eval(config.as_deref(), checkpoint.as_deref(), *n_tasks, *seed, &cli.out_dir)?;
            print!("{}", fs::read_to_string(path)?);
        }
        Command::KernelDump { checkpoint, lags } => {
            let path = cmd_kernel_dump(checkpoint, lags, &cli.out_dir)?;
            print!("{}", fs::read_to_string(path)?);
        }
        Command::Selftest { seed } => {
            let report = selftest::run(&SelftestOptions {
                seed: seed.unwrap_or(0),
                ..SelftestOptions::default()
            });
            fs::create_dir_all(&cli.out_dir)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            fs::write(cli.out_dir.join("selftest.json"), &text)?;
            print!("{text}");
            return Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_dir(out: &Path, hash: &str) -> Result<PathBuf> {
    let dir = out.join(&hash[..16]);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid experiment config {}", path.display()))
}

/// Trains and writes `checkpoint.json`, `history.csv` and the effective
/// `config.json` under `<out>/<hash prefix>/`. Returns that directory.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let Some(spec) = cfg.model.model_spec() else {
        bail!("model kind of {} has no parameters to train", config.display());
    };
    let hash = cfg.hash()?;
    let dir = run_dir(out, &hash)?;
    write_file(&dir.join("config.json"), (serde_json::to_string_pretty(&cfg)? + "\n").as_bytes())?;

    let mut model = Model::new(&spec, cfg.seed)?;
    let mut history = TrainHistory::default();
    let final_epoch = cfg.training.epochs;
    let mut sink = |epoch: usize, m: &Model, h: &TrainHistory| -> gnp_core::Result<()> {
        let ck = Checkpoint::new(&cfg, epoch, m)?;
        let name = if epoch == final_epoch {
            "checkpoint.json".to_string()
        } else {
            format!("checkpoint-epoch-{epoch}.json")
        };
        ck.save(&dir.join(name))?;
        write_history(&dir, h, &hash, cfg.seed)
    };
    let outcome = train(&cfg.train_config(), &mut model, &mut history, &mut sink);
    match outcome {
        Ok(()) => Ok(dir),
        Err(e @ Error::Diverged { .. }) => {
            let epoch = history.len();
            Checkpoint::new(&cfg, epoch, &model)?.save(&dir.join("checkpoint-last-good.json"))?;
            write_history(&dir, &history, &hash, cfg.seed)?;
            Err(e).context("training stopped; last good parameters saved to checkpoint-last-good.json")
        }
        Err(e) => Err(e.into()),
    }
}

fn write_history(dir: &Path, h: &TrainHistory, hash: &str, seed: u64) -> gnp_core::Result<()> {
    let path = dir.join("history.csv");
    let mut buf = Vec::new();
    h.write_csv(&mut buf)?;
    fs::write(&path, buf)?;
    ArtifactMeta::new(hash.to_string(), seed).write_beside(&path)
}

/// Writes `results.csv` under `<out>/<hash prefix>/` and returns its path.
pub fn cmd_eval(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    n_tasks: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<PathBuf> {
    let given = config.map(load_config).transpose()?;
    let (cfg, model) = match checkpoint {
        Some(path) => {
            let expected = given.as_ref().map(|c| c.hash()).transpose()?;
            let ck = Checkpoint::load(path, expected.as_deref())
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let cfg = ck.config.clone();
            (cfg, Some(ck.into_model()?))
        }
        None => {
            let Some(cfg) = given else {
                bail!("eval needs --config, --checkpoint or both");
            };
            if cfg.model.oracle().is_none() {
                bail!("config model is trainable; pass --checkpoint");
            }
            (cfg, None)
        }
    };
    let n = n_tasks.unwrap_or(cfg.evaluation.n_tasks);
    let seed = seed.unwrap_or_else(|| cfg.eval_seed());
    let mut predictors = Vec::new();
    if let Some(m) = &model {
        predictors.push(Predictor::Model(m));
    }
    if let Some(mode) = cfg.model.oracle() {
        predictors.push(Predictor::Oracle(mode));
    }
    if model.is_some() && cfg.evaluation.include_oracles {
        predictors.push(Predictor::Oracle(gnp_core::taskgen::OracleMode::Full));
        predictors.push(Predictor::Oracle(gnp_core::taskgen::OracleMode::Diag));
    }

    let mut table = ResultsTable::default();
    for task in &cfg.evaluation.tasks {
        let gen = GeneratorSpec {
            noise_std: cfg.generator.noise_std,
            ..GeneratorSpec::by_name(task)?
        };
        for &split in &cfg.evaluation.splits {
            for p in &predictors {
                let result = evaluate(*p, &gen, &SplitSpec::of_kind(split), &cfg.sizes, n, seed)?;
                table.push(ResultRow {
                    task: task.clone(),
                    split,
                    predictor: p.name().to_string(),
                    result,
                    n_tasks: n,
                    seed,
                });
            }
        }
    }
    let hash = cfg.hash()?;
    let dir = run_dir(out, &hash)?;
    let path = dir.join("results.csv");
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_file(&path, &buf)?;
    ArtifactMeta::new(hash, seed).write_beside(&path)?;
    Ok(path)
}

/// `start:stop:step` → `start, start+step, …, stop`.
pub fn parse_lags(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("lags must be start:stop:step, got {spec:?}"))?;
    let [start, stop, step] = parts[..] else {
        bail!("lags must be start:stop:step, got {spec:?}");
    };
    if !(step > 0.0) || stop < start {
        bail!("lags need step > 0 and stop >= start");
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}

/// Writes `kernel.csv` (`lag,covariance,truth`) and returns its path.
pub fn cmd_kernel_dump(checkpoint: &Path, lags: &str, out: &Path) -> Result<PathBuf> {
    let lags = parse_lags(lags)?;
    let ck = Checkpoint::load(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = ck.config.clone();
    let Model::Gnp(model) = ck.into_model()? else {
        bail!("checkpoint holds a ConvCNP, which has no kernel map");
    };
    let cov = model.extract_prior_covariance(&lags)?;
    let truth = cfg.generator.process.kernel();
    let mut buf = String::from("lag,covariance,truth\n");
    for (lag, c) in lags.iter().zip(&cov) {
        let t = match &truth {
            Some(k) => format!("{:.6}", k.at_lag(*lag)),
            None => "n/a".into(),
        };
        buf.push_str(&format!("{lag:.6},{c:.6},{t}\n"));
    }
    let hash = cfg.hash()?;
    let dir = run_dir(out, &hash)?;
    let path = dir.join("kernel.csv");
    write_file(&path, buf.as_bytes())?;
    ArtifactMeta::new(hash, cfg.seed).write_beside(&path)?;
    Ok(path)
}
