//! Synthetic 1D meta-learning tasks: GP draws, sawtooth waves and their
//! mixture, all observed under i.i.d. Gaussian noise.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{gp_posterior, gp_sample, Dataset, GaussianFdd, KernelSpec};

/// Observation noise standard deviation used by every generator.
pub const NOISE_STD: f64 = 0.05;

/// A ground-truth stochastic process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Process {
    Eq {
        lengthscale: f64,
    },
    Matern52 {
        lengthscale: f64,
    },
    WeaklyPeriodic {
        decay_lengthscale: f64,
        period: f64,
        periodic_lengthscale: f64,
    },
    /// `amplitude · frac(direction · freq · x + phase)` with random latents.
    Sawtooth {
        freq_min: f64,
        freq_max: f64,
        amplitude: f64,
    },
    /// Each episode comes from one uniformly chosen component.
    Mixture { components: Vec<Process> },
}

impl Process {
    pub fn eq() -> Self {
        Process::from_kernel(KernelSpec::eq())
    }

    pub fn matern52() -> Self {
        Process::from_kernel(KernelSpec::matern52())
    }

    pub fn weakly_periodic() -> Self {
        Process::from_kernel(KernelSpec::weakly_periodic())
    }

    pub fn sawtooth() -> Self {
        Process::Sawtooth {
            freq_min: 3.0,
            freq_max: 5.0,
            amplitude: 1.0,
        }
    }

    pub fn mixture() -> Self {
        Process::Mixture {
            components: vec![
                Self::eq(),
                Self::matern52(),
                Self::weakly_periodic(),
                Self::sawtooth(),
            ],
        }
    }

    pub fn from_kernel(kernel: KernelSpec) -> Self {
        match kernel {
            KernelSpec::Eq { lengthscale } => Process::Eq { lengthscale },
            KernelSpec::Matern52 { lengthscale } => Process::Matern52 { lengthscale },
            KernelSpec::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            } => Process::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            },
        }
    }

    /// Covariance function for GP processes.
    pub fn kernel(&self) -> Option<KernelSpec> {
        match *self {
            Process::Eq { lengthscale } => Some(KernelSpec::Eq { lengthscale }),
            Process::Matern52 { lengthscale } => Some(KernelSpec::Matern52 { lengthscale }),
            Process::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            } => Some(KernelSpec::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            }),
            Process::Sawtooth { .. } | Process::Mixture { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Process::Eq { .. } => "eq",
            Process::Matern52 { .. } => "matern52",
            Process::WeaklyPeriodic { .. } => "weakly_periodic",
            Process::Sawtooth { .. } => "sawtooth",
            Process::Mixture { .. } => "mixture",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Process::Sawtooth {
                freq_min,
                freq_max,
                amplitude,
            } => {
                if !(*freq_min > 0.0 && freq_max >= freq_min && amplitude.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "sawtooth needs 0 < freq_min ≤ freq_max (got {freq_min}, {freq_max})"
                    )));
                }
                Ok(())
            }
            Process::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidParameter("mixture without components".into()));
                }
                components.iter().try_for_each(Process::validate)
            }
            gp => gp.kernel().expect("GP process").validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub process: Process,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_noise_std() -> f64 {
    NOISE_STD
}

impl GeneratorSpec {
    pub fn new(process: Process) -> Self {
        Self {
            process,
            noise_std: NOISE_STD,
        }
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    pub fn name(&self) -> &'static str {
        self.process.name()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        self.process.validate()
    }

    /// Looks up the default generator for a task name.
    pub fn by_name(name: &str) -> Result<Self> {
        let process = match name {
            "eq" => Process::eq(),
            "matern52" => Process::matern52(),
            "weakly_periodic" => Process::weakly_periodic(),
            "sawtooth" => Process::sawtooth(),
            "mixture" => Process::mixture(),
            other => return Err(Error::Config(format!("unknown task '{other}'"))),
        };
        Ok(Self::new(process))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    InterpInRange,
    InterpBeyondRange,
    Extrapolation,
}

impl SplitKind {
    pub fn name(&self) -> &'static str {
        match self {
            SplitKind::InterpInRange => "interp_in_range",
            SplitKind::InterpBeyondRange => "interp_beyond_range",
            SplitKind::Extrapolation => "extrapolation",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "interp_in_range" => Ok(SplitKind::InterpInRange),
            "interp_beyond_range" => Ok(SplitKind::InterpBeyondRange),
            "extrapolation" => Ok(SplitKind::Extrapolation),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Input intervals for the context and target roles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub context: (f64, f64),
    pub target: (f64, f64),
}

/// Inputs seen during training.
pub const TRAIN_RANGE: (f64, f64) = (-2.0, 2.0);
/// Offset of the beyond-range interpolation split.
pub const BEYOND_SHIFT: f64 = 4.0;

impl SplitSpec {
    pub fn interp_in_range() -> Self {
        Self {
            kind: SplitKind::InterpInRange,
            context: TRAIN_RANGE,
            target: TRAIN_RANGE,
        }
    }

    pub fn interp_beyond_range() -> Self {
        let shifted = (TRAIN_RANGE.0 + BEYOND_SHIFT, TRAIN_RANGE.1 + BEYOND_SHIFT);
        Self {
            kind: SplitKind::InterpBeyondRange,
            context: shifted,
            target: shifted,
        }
    }

    pub fn extrapolation() -> Self {
        Self {
            kind: SplitKind::Extrapolation,
            context: TRAIN_RANGE,
            target: (TRAIN_RANGE.1, TRAIN_RANGE.1 + 2.0),
        }
    }

    pub fn of_kind(kind: SplitKind) -> Self {
        match kind {
            SplitKind::InterpInRange => Self::interp_in_range(),
            SplitKind::InterpBeyondRange => Self::interp_beyond_range(),
            SplitKind::Extrapolation => Self::extrapolation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (role, (lo, hi)) in [("context", self.context), ("target", self.target)] {
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "{role} interval [{lo}, {hi}] is not well ordered"
                )));
            }
        }
        if self.kind == SplitKind::Extrapolation
            && self.target.0 < self.context.1
            && self.context.0 < self.target.1
        {
            return Err(Error::InvalidParameter(
                "extrapolation target interval overlaps the context interval".into(),
            ));
        }
        Ok(())
    }
}

/// Context count ~ uniform{context_min..=context_max}; fixed target count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSizes {
    pub context_min: usize,
    pub context_max: usize,
    pub target: usize,
}

impl Default for EpisodeSizes {
    fn default() -> Self {
        Self {
            context_min: 0,
            context_max: 10,
            target: 16,
        }
    }
}

impl EpisodeSizes {
    pub fn validate(&self) -> Result<()> {
        if self.target == 0 || self.context_min > self.context_max {
            return Err(Error::InvalidParameter(format!("invalid episode sizes {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub context: Dataset,
    pub target: Dataset,
    pub split: SplitKind,
}

/// Latent variables of one sawtooth draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SawtoothLatent {
    pub freq: f64,
    pub phase: f64,
    /// `+1.0` or `-1.0`.
    pub direction: f64,
}

impl SawtoothLatent {
    pub fn draw<R: Rng + ?Sized>(freq_min: f64, freq_max: f64, rng: &mut R) -> Self {
        let freq = if freq_max > freq_min {
            rng.gen_range(freq_min..freq_max)
        } else {
            freq_min
        };
        Self {
            freq,
            phase: rng.gen_range(0.0..1.0),
            direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        }
    }
}

/// Unit-amplitude sawtooth `frac(direction · freq · x + phase)`.
pub fn sawtooth_eval(latent: &SawtoothLatent, x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let t = latent.direction * latent.freq * xi + latent.phase;
            t - t.floor()
        })
        .collect()
}

/// Picks one mixture component uniformly; non-mixtures return themselves.
pub fn mixture_draw<'a, R: Rng + ?Sized>(process: &'a Process, rng: &mut R) -> &'a Process {
    match process {
        Process::Mixture { components } => components
            .choose(rng)
            .expect("validated mixture has components"),
        other => other,
    }
}

fn noiseless_draw<R: Rng + ?Sized>(process: &Process, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    match process {
        Process::Sawtooth {
            freq_min,
            freq_max,
            amplitude,
        } => {
            let latent = SawtoothLatent::draw(*freq_min, *freq_max, rng);
            Ok(sawtooth_eval(&latent, x).into_iter().map(|v| amplitude * v).collect())
        }
        Process::Mixture { .. } => noiseless_draw(mixture_draw(process, rng), x, rng),
        gp => gp_sample(&gp.kernel().expect("GP process"), x, 0.0, rng),
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    gen: &GeneratorSpec,
    split: &SplitSpec,
    sizes: &EpisodeSizes,
    rng: &mut R,
) -> Result<Episode> {
    let n_context = rng.gen_range(sizes.context_min..=sizes.context_max);
    let draw_in = |(lo, hi): (f64, f64), n: usize, rng: &mut R| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let xc = draw_in(split.context, n_context, rng);
    let xt = draw_in(split.target, sizes.target, rng);
    let all: Vec<f64> = xc.iter().chain(&xt).copied().collect();
    // One function draw covers context and target jointly.
    let clean = noiseless_draw(&gen.process, &all, rng)?;
    let noise = Normal::new(0.0, gen.noise_std)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let y: Vec<f64> = clean.into_iter().map(|f| f + noise.sample(rng)).collect();
    Ok(Episode {
        context: Dataset::new(xc, y[..n_context].to_vec())?,
        target: Dataset::new(xt, y[n_context..].to_vec())?,
        split: split.kind,
    })
}

/// RNG for episode `index` of the stream rooted at `seed`; independent of
/// the order in which episodes are generated.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_batch(
    gen: &GeneratorSpec,
    split: &SplitSpec,
    sizes: &EpisodeSizes,
    seed: u64,
    start: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| sample_episode(gen, split, sizes, &mut episode_rng(seed, start + i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Full,
    Diag,
}

/// Exact predictive for noisy observations at `targets`, or `None` when the
/// generator is not a GP.
pub fn oracle_predict(
    gen: &GeneratorSpec,
    context: &Dataset,
    targets: &[f64],
    mode: OracleMode,
) -> Result<Option<GaussianFdd>> {
    let Some(kernel) = gen.process.kernel() else {
        return Ok(None);
    };
    let post = gp_posterior(&kernel, context, gen.noise_var(), targets)?.with_extra_diag(gen.noise_var());
    Ok(Some(match mode {
        OracleMode::Full => post,
        OracleMode::Diag => post.diagonal(),
    }))
}

pub fn write_episodes_jsonl<W: Write>(mut out: W, episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes_jsonl<B: BufRead>(input: B) -> Result<Vec<Episode>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
