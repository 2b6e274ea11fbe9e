//! Random inputs, random labels, and pretraining on them.
//!
//! Inputs and labels come from two independent seeded streams that are read
//! strictly forward, so no sample is ever drawn twice.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::learn::{count_correct, fa_step_interleaved, AdamState, SnapshotHook};
use crate::linalg::Matrix;
use crate::net::{self, Mlp};
use crate::record::{Phase, RunRecord};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDistribution {
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Draws from `[low, high)`; `low == high` yields the constant `low`.
    Uniform {
        low: f64,
        high: f64,
    },
}

impl NoiseDistribution {
    pub const STANDARD_NORMAL: NoiseDistribution = NoiseDistribution::Gaussian { mean: 0.0, std: 1.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseDistribution::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    bail!(Config, "gaussian noise needs finite mean and std >= 0, got ({mean}, {std})");
                }
            }
            NoiseDistribution::Uniform { low, high } => {
                if !low.is_finite() || !high.is_finite() || low > high {
                    bail!(Config, "uniform noise needs finite low <= high, got ({low}, {high})");
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            NoiseDistribution::Gaussian { mean, std } => format!("gaussian({mean},{std})"),
            NoiseDistribution::Uniform { low, high } => format!("uniform({low},{high})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub distribution: NoiseDistribution,
    pub total_samples: usize,
    /// Samples counted as one pretraining epoch.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        if self.total_samples == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            bail!(Config, "noise sample counts and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.total_samples.div_ceil(self.samples_per_epoch)
    }

    pub fn optimizer_steps(&self) -> usize {
        self.total_samples.div_ceil(self.batch_size)
    }
}

/// `n × dim` i.i.d. draws from `dist`.
pub fn sample_noise_batch(n: usize, dim: usize, dist: &NoiseDistribution, rng: &mut impl Rng) -> Result<Matrix> {
    dist.validate()?;
    if n == 0 || dim == 0 {
        bail!(Config, "noise batch must be at least 1x1, got {n}x{dim}");
    }
    let data: Vec<f64> = match *dist {
        NoiseDistribution::Gaussian { mean, std } => {
            let normal = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n * dim).map(|_| normal.sample(rng)).collect()
        }
        NoiseDistribution::Uniform { low, high } if low == high => vec![low; n * dim],
        NoiseDistribution::Uniform { low, high } => {
            let u = Uniform::new(low, high);
            (0..n * dim).map(|_| u.sample(rng)).collect()
        }
    };
    Matrix::from_vec(n, dim, data)
}

/// `n` labels drawn uniformly from `0..d`.
pub fn sample_random_labels(n: usize, d: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if d < 2 {
        bail!(Config, "random labels need at least 2 classes, got {d}");
    }
    if n == 0 {
        bail!(Config, "label batch must be non-empty");
    }
    Ok((0..n).map(|_| rng.gen_range(0..d)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOutcome {
    pub records: Vec<RunRecord>,
    pub optimizer_steps: u64,
}

/// Feedback-alignment training on fresh noise until `total_samples` have been
/// consumed. Batches run over a single global stream (the last one may be
/// short), and an epoch record is closed whenever the cumulative sample count
/// reaches a multiple of `samples_per_epoch` or the stream ends. Loss and
/// accuracy are measured on each batch before its update.
pub fn pretrain_random_noise(
    mlp: &mut Mlp,
    cfg: &NoiseConfig,
    mut hook: Option<SnapshotHook<'_>>,
) -> Result<NoiseOutcome> {
    cfg.validate()?;
    let classes = mlp.class_count();
    if classes < 2 {
        bail!(Config, "noise pretraining needs at least 2 output classes, network has {classes}");
    }
    let dim = mlp.input_dim();
    let mut input_rng = seed::labeled_rng(cfg.seed, "noise-inputs", 0);
    let mut label_rng = seed::labeled_rng(cfg.seed, "noise-labels", 0);
    let mut state = AdamState::new(mlp);

    let mut records = Vec::with_capacity(cfg.epochs());
    let mut consumed = 0usize;
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    while consumed < cfg.total_samples {
        let n = cfg.batch_size.min(cfg.total_samples - consumed);
        let x = sample_noise_batch(n, dim, &cfg.distribution, &mut input_rng)?;
        let y = sample_random_labels(n, classes, &mut label_rng)?;
        let trace = net::forward(mlp, &x)?;
        loss_sum += net::cross_entropy(&trace.probabilities, &y)? * n as f64;
        correct += count_correct(&trace.probabilities, &y);
        seen += n;
        fa_step_interleaved(&mut state, mlp, &trace, &y, cfg.learning_rate)?;

        let before = consumed / cfg.samples_per_epoch;
        consumed += n;
        let crossed = consumed / cfg.samples_per_epoch > before || consumed == cfg.total_samples;
        if !crossed {
            continue;
        }
        if !mlp.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after {consumed} noise samples")));
        }
        let epoch = records.len() + 1;
        let mut rec = RunRecord::new(Phase::Pretrain, epoch);
        rec.train_loss = Some(loss_sum / seen as f64);
        rec.train_acc = Some(correct as f64 / seen as f64);
        rec.seed = cfg.seed;
        if let Some(h) = hook.as_mut() {
            h(mlp, &mut rec)?;
        }
        if !rec.all_finite() {
            return Err(Error::Numeric(format!("non-finite metric at pretraining epoch {epoch}")));
        }
        records.push(rec);
        (loss_sum, correct, seen) = (0.0, 0, 0);
    }
    Ok(NoiseOutcome { records, optimizer_steps: state.step_count })
}
