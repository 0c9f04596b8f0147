//! Maximum-likelihood meta-training and per-point log-likelihood evaluation.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GaussianFdd;
use crate::models::Model;
use crate::taskgen::{oracle_predict, sample_batch, Episode, EpisodeSizes, GeneratorSpec, OracleMode, SplitSpec};
use crate::tensor::{AdamConfig, AdamState, Gradients, NodeId, ParamStore, Tape};

/// Training episodes use stream indices below this value, validation
/// episodes start at it, so the two never share an episode RNG.
pub const VALIDATION_STREAM: u64 = 1 << 62;

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
pub struct TrainConfig {
    pub generator: GeneratorSpec,
    #[serde(default = "SplitSpec::interp_in_range")]
    pub split: SplitSpec,
    #[serde(default)]
    pub sizes: EpisodeSizes,
    #[serde(default = "default_epe")]
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 checkpoints only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_val_tasks")]
    pub validation_tasks: usize,
    #[serde(default = "default_validation_stream")]
    pub validation_stream: u64,
    /// Record wall-clock seconds in the history; when off the column is 0
    /// and reruns are byte-identical.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl TrainConfig {
    pub fn new(generator: GeneratorSpec, epochs: usize, seed: u64) -> Self {
        Self {
            generator,
            split: SplitSpec::interp_in_range(),
            sizes: EpisodeSizes::default(),
            episodes_per_epoch: default_epe(),
            epochs,
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            seed,
            checkpoint_every: 0,
            validation_tasks: default_val_tasks(),
            validation_stream: VALIDATION_STREAM,
            record_timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.split.validate()?;
        self.sizes.validate()?;
        if self.episodes_per_epoch == 0 || self.batch_size == 0 || self.validation_tasks == 0 {
            return Err(Error::Config(
                "episodes_per_epoch, batch_size and validation_tasks must be positive".into(),
            ));
        }
        if self.episodes_per_epoch % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "episodes_per_epoch {} is not a multiple of batch_size {}",
                self.episodes_per_epoch, self.batch_size
            )));
        }
        let used = (self.epochs as u128) * (self.episodes_per_epoch as u128);
        if used > self.validation_stream as u128 {
            return Err(Error::Config("training stream overlaps the validation stream".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn validation_episodes(&self) -> Result<Vec<Episode>> {
        sample_batch(
            &self.generator,
            &self.split,
            &self.sizes,
            self.seed,
            self.validation_stream,
            self.validation_tasks,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_loglik: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_nll,val_loglik,seconds")?;
        for r in &self.epochs {
            writeln!(out, "{},{},{},{:.3}", r.epoch, r.train_nll, r.val_loglik, r.seconds)?;
        }
        Ok(())
    }
}

/// Batch-mean negative log-likelihood recorded on one tape.
pub fn nll_loss_on(tape: &mut Tape, model: &Model, store: &ParamStore, episodes: &[Episode]) -> Result<NodeId> {
    if episodes.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for (i, ep) in episodes.iter().enumerate() {
        let (mean, cov) = model.forward_on(tape, store, &ep.context, &ep.target.x)?;
        let nll = tape
            .gaussian_nll(&ep.target.y, mean, cov)
            .map_err(|e| covariance_error(e, i))?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / episodes.len() as f64))
}

fn covariance_error(e: Error, episode: usize) -> Error {
    match e {
        Error::NotPositiveDefinite | Error::Cholesky { .. } => Error::EpisodeCovariance { episode },
        other => other,
    }
}

/// Batch-mean NLL and its gradient, one tape per episode.
pub fn nll_loss(model: &Model, episodes: &[Episode]) -> Result<(f64, Gradients)> {
    if episodes.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let store = model.params();
    let mut grads = store.zeros_like();
    let mut loss = 0.0;
    for (i, ep) in episodes.iter().enumerate() {
        let mut tape = Tape::new();
        let (mean, cov) = model.forward_on(&mut tape, store, &ep.context, &ep.target.x)?;
        let nll = tape
            .gaussian_nll(&ep.target.y, mean, cov)
            .map_err(|e| covariance_error(e, i))?;
        loss += tape.value(nll).data()[0];
        grads.add_assign(&tape.backward(nll, store)?)?;
    }
    let n = episodes.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Called after every checkpoint-cadence epoch and once at the end.
pub trait CheckpointSink {
    fn save(&mut self, epoch: usize, model: &Model, history: &TrainHistory) -> Result<()>;
}

impl<F: FnMut(usize, &Model, &TrainHistory) -> Result<()>> CheckpointSink for F {
    fn save(&mut self, epoch: usize, model: &Model, history: &TrainHistory) -> Result<()> {
        self(epoch, model, history)
    }
}

/// Adam on freshly sampled batches. Deterministic given `config.seed`.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`]; `model` keeps the last parameters that produced a
/// finite step and `history` holds the completed epochs.
pub fn train(
    config: &TrainConfig,
    model: &mut Model,
    history: &mut TrainHistory,
    sink: &mut dyn CheckpointSink,
) -> Result<()> {
    config.validate()?;
    let mut adam = AdamState::new(config.adam, model.params());
    let validation = config.validation_episodes()?;
    let steps = config.episodes_per_epoch / config.batch_size;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        for step in 0..steps {
            let start = ((epoch - 1) * config.episodes_per_epoch + step * config.batch_size) as u64;
            let batch = sample_batch(
                &config.generator,
                &config.split,
                &config.sizes,
                config.seed,
                start,
                config.batch_size,
            )?;
            let (loss, grads) = match nll_loss(model, &batch) {
                Ok(v) => v,
                Err(Error::EpisodeCovariance { .. }) => return Err(Error::Diverged { epoch, step }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            match adam.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { epoch, step }),
                Err(e) => return Err(e),
            }
            total += loss;
        }
        let val = mean_loglik(model, &validation)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_nll: total / steps as f64,
            val_loglik: val,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        let cadence = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if cadence || epoch == config.epochs {
            sink.save(epoch, model, history)?;
        }
    }
    if config.epochs == 0 {
        sink.save(0, model, history)?;
    }
    Ok(())
}

/// Joint log-density of the targets divided by their number.
pub fn per_point_loglik(fdd: &GaussianFdd, y: &[f64]) -> Result<f64> {
    Ok(fdd.logpdf(y)? / y.len() as f64)
}

fn mean_loglik(model: &Model, episodes: &[Episode]) -> Result<f64> {
    let mut sum = 0.0;
    for ep in episodes {
        let fdd = model.predict(&ep.context, &ep.target.x)?;
        sum += per_point_loglik(&fdd, &ep.target.y)?;
    }
    Ok(sum / episodes.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    Oracle(OracleMode),
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(m) => m.spec().name(),
            Predictor::Oracle(OracleMode::Full) => "oracle-full",
            Predictor::Oracle(OracleMode::Diag) => "oracle-diag",
        }
    }

    /// `None` when an oracle is asked about a non-GP generator.
    pub fn predict(&self, gen: &GeneratorSpec, ep: &Episode) -> Result<Option<GaussianFdd>> {
        match self {
            Predictor::Model(m) => m.predict(&ep.context, &ep.target.x).map(Some),
            Predictor::Oracle(mode) => oracle_predict(gen, &ep.context, &ep.target.x, *mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub n_tasks: usize,
    pub seed: u64,
}

impl EvalResult {
    pub fn from_scores(scores: &[f64], seed: u64) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let ci95 = if scores.len() > 1 {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            ci95,
            n_tasks: scores.len(),
            seed,
        }
    }
}

/// Per-episode per-point log-likelihoods on `n_tasks` episodes drawn from
/// stream `seed`.
pub fn episode_scores(
    predictor: Predictor<'_>,
    gen: &GeneratorSpec,
    split: &SplitSpec,
    sizes: &EpisodeSizes,
    n_tasks: usize,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    if n_tasks == 0 {
        return Err(Error::InvalidParameter("n_tasks must be at least 1".into()));
    }
    let episodes = sample_batch(gen, split, sizes, seed, 0, n_tasks)?;
    let mut scores = Vec::with_capacity(n_tasks);
    for ep in &episodes {
        match predictor.predict(gen, ep)? {
            Some(fdd) => scores.push(per_point_loglik(&fdd, &ep.target.y)?),
            None => return Ok(None),
        }
    }
    Ok(Some(scores))
}

pub fn evaluate(
    predictor: Predictor<'_>,
    gen: &GeneratorSpec,
    split: &SplitSpec,
    sizes: &EpisodeSizes,
    n_tasks: usize,
    seed: u64,
) -> Result<Option<EvalResult>> {
    Ok(episode_scores(predictor, gen, split, sizes, n_tasks, seed)?.map(|s| EvalResult::from_scores(&s, seed)))
}
