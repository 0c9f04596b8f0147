//! Experiment configs, config hashing, checkpoints and result tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ConvCnpConfig, GnpConfig, Model, ModelSpec};
use crate::taskgen::{EpisodeSizes, GeneratorSpec, OracleMode, SplitKind, SplitSpec};
use crate::tensor::{AdamConfig, ParamStore};
use crate::training::{EvalResult, TrainConfig, VALIDATION_STREAM};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Hex SHA-256 of the canonical JSON form (object keys sorted, no
/// whitespace) of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictorSpec {
    Gnp(GnpConfig),
    Convcnp(ConvCnpConfig),
    OracleFull,
    OracleDiag,
}

impl PredictorSpec {
    pub fn model_spec(&self) -> Option<ModelSpec> {
        match self {
            PredictorSpec::Gnp(c) => Some(ModelSpec::Gnp(c.clone())),
            PredictorSpec::Convcnp(c) => Some(ModelSpec::Convcnp(c.clone())),
            _ => None,
        }
    }

    pub fn oracle(&self) -> Option<OracleMode> {
        match self {
            PredictorSpec::OracleFull => Some(OracleMode::Full),
            PredictorSpec::OracleDiag => Some(OracleMode::Diag),
            _ => None,
        }
    }
}

fn default_epe() -> usize {
    256
}
fn default_batch() -> usize {
    16
}
fn default_val_tasks() -> usize {
    64
}
fn default_validation_stream() -> u64 {
    VALIDATION_STREAM
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    #[serde(default = "default_epe")]
    pub episodes_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_val_tasks")]
    pub validation_tasks: usize,
    #[serde(default = "default_validation_stream")]
    pub validation_stream: u64,
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 0,
            episodes_per_epoch: default_epe(),
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            validation_tasks: default_val_tasks(),
            validation_stream: VALIDATION_STREAM,
            record_timing: true,
        }
    }
}

fn default_tasks() -> Vec<String> {
    vec!["eq".into()]
}
fn default_splits() -> Vec<SplitKind> {
    vec![SplitKind::InterpInRange]
}
fn default_n_tasks() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Generator names, see [`GeneratorSpec::by_name`].
    #[serde(default = "default_tasks")]
    pub tasks: Vec<String>,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitKind>,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    /// Defaults to the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Also score the exact GP predictors next to a trained model.
    #[serde(default = "default_true")]
    pub include_oracles: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            splits: default_splits(),
            n_tasks: default_n_tasks(),
            seed: None,
            include_oracles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorSpec,
    #[serde(default = "SplitSpec::interp_in_range")]
    pub split: SplitSpec,
    #[serde(default)]
    pub sizes: EpisodeSizes,
    pub model: PredictorSpec,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = self.model.model_spec() {
            spec.validate()?;
        }
        self.train_config().validate()?;
        if self.evaluation.n_tasks == 0 {
            return Err(Error::Config("evaluation.n_tasks must be at least 1".into()));
        }
        for t in &self.evaluation.tasks {
            GeneratorSpec::by_name(t).map_err(|e| Error::Config(format!("evaluation.tasks: {e}")))?;
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            generator: self.generator.clone(),
            split: self.split.clone(),
            sizes: self.sizes,
            episodes_per_epoch: t.episodes_per_epoch,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            validation_tasks: t.validation_tasks,
            validation_stream: t.validation_stream,
            record_timing: t.record_timing,
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.evaluation.seed.unwrap_or(self.seed)
    }
}

/// Trained (or initial) parameters together with the config that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, epoch: usize, model: &Model) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT,
            code_version: CODE_VERSION.into(),
            config_hash: config.hash()?,
            seed: config.seed,
            epoch,
            config: config.clone(),
            model: model.spec(),
            params: model.params().clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint and checks that its config still hashes to the
    /// recorded value and, if given, to `expected_hash`.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", ck.format)));
        }
        let actual = ck.config.hash()?;
        if actual != ck.config_hash {
            return Err(Error::HashMismatch {
                expected: actual,
                found: ck.config_hash,
            });
        }
        if let Some(expected) = expected_hash {
            if expected != ck.config_hash {
                return Err(Error::HashMismatch {
                    expected: expected.into(),
                    found: ck.config_hash,
                });
            }
        }
        if ck.config.model.model_spec().as_ref() != Some(&ck.model) {
            return Err(Error::Config("checkpoint model does not match its config".into()));
        }
        Ok(ck)
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_params(&self.model, self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: String,
    pub split: SplitKind,
    pub predictor: String,
    /// `None` when the predictor does not apply (oracles on non-GP tasks).
    pub result: Option<EvalResult>,
    pub n_tasks: usize,
    pub seed: u64,
}

/// Evaluation results, one row per (task, split, predictor).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.task.as_str(), a.split.name(), a.predictor.as_str()).cmp(&(
                b.task.as_str(),
                b.split.name(),
                b.predictor.as_str(),
            ))
        });
    }

    pub fn get(&self, task: &str, split: SplitKind, predictor: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.split == split && r.predictor == predictor)
    }

    /// Writes rows in lexicographic (task, split, predictor) order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut sorted = self.clone();
        sorted.sort();
        writeln!(out, "task,split,predictor,mean,ci95,n_tasks,seed")?;
        for r in &sorted.rows {
            let (mean, ci) = match &r.result {
                Some(e) => (format!("{:.6}", e.mean), format!("{:.6}", e.ci95)),
                None => ("n/a".to_string(), "n/a".to_string()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.task,
                r.split.name(),
                r.predictor,
                mean,
                ci,
                r.n_tasks,
                r.seed
            )?;
        }
        Ok(())
    }
}

/// Provenance written next to every CSV artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            code_version: CODE_VERSION.into(),
        }
    }

    /// Writes `<artifact>.meta.json`.
    pub fn write_beside(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".meta.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(name, text)?;
        Ok(())
    }
}
