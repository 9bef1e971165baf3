//! Optimizer, weight noise, task schedule and the trainer.

mod checkpoint;
mod trainer;

pub use checkpoint::{checkpoint_digest, default_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use trainer::{config_hash, LogEntry, TaskCorpus, TrainState, Trainer, TrainerConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`.
    pub decay_step: u64,
    pub decay_factor: f64,
    pub l2: f64,
    /// Also decay biases and batch-norm scale/shift.
    pub l2_biases: bool,
    pub weight_noise_std: f64,
    /// First step with weight noise.
    pub noise_start: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub norm_momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            decay_step: 1_000_000,
            decay_factor: 0.1,
            l2: 1e-6,
            l2_biases: false,
            weight_noise_std: 0.125,
            noise_start: 20_000,
            clip_norm: Some(5.0),
            batch_size: 64,
            norm_momentum: 0.99,
        }
    }
}

impl OptimizerConfig {
    /// The multi-task recipe: later noise and decay.
    pub fn multitask() -> Self {
        OptimizerConfig {
            noise_start: 30_000,
            decay_step: 1_500_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon, self.decay_factor];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("learning rate, epsilon and decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.l2 < 0.0 || self.weight_noise_std < 0.0 {
            return Err(Error::Config("L2 weight and noise std must be non-negative".into()));
        }
        if self.noise_start >= self.decay_step {
            return Err(Error::Config(format!(
                "noise start {} must precede the decay step {}",
                self.noise_start, self.decay_step
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("batch-norm momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate used by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.decay_step {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn noise_at(&self, step: u64) -> f64 {
        if step >= self.noise_start {
            self.weight_noise_std
        } else {
            0.0
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One bias-corrected Adam update of `theta` with gradient `grad + l2·theta`.
/// `step` is the 1-based update count of this parameter's optimizer.
pub fn adam_update(
    theta: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    l2: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if theta.shape() != grad.shape() || moments.m.shape() != theta.shape() {
        return Err(Error::dim(
            "adam",
            format!("parameter {:?}, gradient {:?}", theta.shape(), grad.shape()),
        ));
    }
    if step == 0 {
        return Err(Error::Usage("Adam steps are 1-based".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let th = theta.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for i in 0..th.len() {
        let g = grad.data()[i] + l2 * th[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        th[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Noisy copies of every parameter subject to weight noise, indexed by
/// parameter id; other slots are `None`. Clean values stay in the store.
pub fn apply_weight_noise<R: Rng>(store: &ParamStore, std: f64, rng: &mut R) -> Result<Vec<Option<Tensor>>> {
    if std == 0.0 {
        return Ok(vec![None; store.len()]);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Ok(store
        .iter()
        .map(|(_, p)| {
            p.kind.is_noisy().then(|| {
                let mut t = p.value.clone();
                t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
                t
            })
        })
        .collect())
}

/// Task names with sampling probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSchedule {
    pub tasks: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl TaskSchedule {
    pub fn single(task: &str) -> Self {
        TaskSchedule {
            tasks: vec![task.to_string()],
            probabilities: vec![1.0],
        }
    }

    pub fn new(pairs: &[(&str, f64)]) -> Result<Self> {
        let s = TaskSchedule {
            tasks: pairs.iter().map(|p| p.0.to_string()).collect(),
            probabilities: pairs.iter().map(|p| p.1).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.len() != self.probabilities.len() {
            return Err(Error::Config("schedule needs one probability per task".into()));
        }
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("task probabilities must be non-negative".into()));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Index of the sampled task.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.tasks.len() - 1)
    }
}
