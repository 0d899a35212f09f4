//! Synthetic denoising task: forward-diffusion noising, seeded calibration
//! data from a per-class Gaussian mixture, and the noise-prediction loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::net::{BoundNet, NetError, Network};

pub type TaskResult<T> = Result<T, TaskError>;

#[derive(Debug)]
pub enum TaskError {
    TimestepOutOfRange { t: usize, steps: usize },
    ShapeMismatch { left: usize, right: usize },
    EmptyBatch,
    BadConfig(String),
    Net(NetError),
    Tensor(TensorError),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::TimestepOutOfRange { t, steps } => {
                write!(f, "timestep {t} out of range for schedule with {steps} steps")
            }
            TaskError::ShapeMismatch { left, right } => {
                write!(f, "latent and noise sizes differ: {left} vs {right}")
            }
            TaskError::EmptyBatch => write!(f, "batch must be nonempty"),
            TaskError::BadConfig(msg) => write!(f, "bad task config: {msg}"),
            TaskError::Net(e) => write!(f, "{e}"),
            TaskError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TaskError {}

impl From<NetError> for TaskError {
    fn from(e: NetError) -> Self {
        TaskError::Net(e)
    }
}

impl From<TensorError> for TaskError {
    fn from(e: TensorError) -> Self {
        TaskError::Tensor(e)
    }
}

/// Forward-diffusion schedule: per-step noise rates and their cumulative
/// signal-retention products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp; the desk-scale default is `linear(100, 1e-4, 0.02)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> TaskResult<NoiseSchedule> {
        if steps == 0 {
            return Err(TaskError::BadConfig("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(TaskError::BadConfig(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn default_linear() -> NoiseSchedule {
        Self::linear(100, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> TaskResult<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(TaskError::TimestepOutOfRange { t, steps: self.steps() })
    }
}

/// Mix `z` and noise at a given signal retention:
/// `sqrt(alpha_bar) * z + sqrt(1 - alpha_bar) * eps`.
pub fn noised_at(z: &[f64], eps: &[f64], alpha_bar: f64) -> TaskResult<Vec<f64>> {
    if z.len() != eps.len() {
        return Err(TaskError::ShapeMismatch { left: z.len(), right: eps.len() });
    }
    let s = alpha_bar.sqrt();
    let n = (1.0 - alpha_bar).sqrt();
    Ok(z.iter().zip(eps).map(|(zv, ev)| s * zv + n * ev).collect())
}

/// Schedule-indexed noising; rejects out-of-range timesteps.
pub fn add_noise(z: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> TaskResult<Vec<f64>> {
    noised_at(z, eps, sched.alpha_bar(t)?)
}

/// The synthetic data distribution: one anisotropic Gaussian component per
/// condition class. Class `c` has mean 2.0 on channel `c` of every token and
/// per-coordinate standard deviations in [0.2, 0.65] that depend on class
/// and channel.
#[derive(Clone, Debug)]
pub struct Task {
    pub tokens: usize,
    pub width: usize,
    pub vocab: usize,
    pub schedule: NoiseSchedule,
}

/// One calibration tuple: clean latent, condition, timestep, injected noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Tuple {
    pub z: Vec<f64>,
    pub y: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// A fixed seeded list of tuples; every criterion evaluation reuses the same
/// tuples so comparisons are paired.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub seed: u64,
    pub tuples: Vec<Tuple>,
}

pub const CLASS_MEAN_AMPLITUDE: f64 = 2.0;

impl Task {
    pub fn for_network(net: &Network, schedule: NoiseSchedule) -> TaskResult<Task> {
        let (tokens, width) = net.input_shape();
        let vocab = net.spec().cond_vocab;
        if vocab > width {
            return Err(TaskError::BadConfig(format!(
                "class count {vocab} exceeds channel width {width}; class means would collide"
            )));
        }
        Ok(Task { tokens, width, vocab, schedule })
    }

    pub fn dim(&self) -> usize {
        self.tokens * self.width
    }

    /// Configured mean of class `y`.
    pub fn class_mean(&self, y: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for tok in 0..self.tokens {
            mean[tok * self.width + (y % self.width)] = CLASS_MEAN_AMPLITUDE;
        }
        mean
    }

    fn class_std(&self, y: usize, j: usize) -> f64 {
        0.2 + 0.15 * ((y + j % self.width) % 4) as f64
    }

    /// Draw one `(z, y)` pair.
    pub fn sample_latent(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
        let y = rng.random_range(0..self.vocab);
        let mean = self.class_mean(y);
        let z = mean
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let n: f64 = StandardNormal.sample(rng);
                m + self.class_std(y, j) * n
            })
            .collect();
        (z, y)
    }

    /// Draw one full tuple `(z, y, t, eps)` with `t` uniform over the schedule.
    pub fn sample_tuple(&self, rng: &mut ChaCha8Rng) -> Tuple {
        let (z, y) = self.sample_latent(rng);
        let t = rng.random_range(0..self.schedule.steps());
        let eps = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        Tuple { z, y, t, eps }
    }

    /// Seeded batch of `(z, y)` pairs.
    pub fn sample_batch(&self, seed: u64, n: usize) -> TaskResult<Vec<(Vec<f64>, usize)>> {
        if n == 0 {
            return Err(TaskError::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample_latent(&mut rng)).collect())
    }

    /// Seeded batch of full tuples.
    pub fn sample_tuples(&self, seed: u64, n: usize) -> TaskResult<Vec<Tuple>> {
        if n == 0 {
            return Err(TaskError::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample_tuple(&mut rng)).collect())
    }
}

impl CalibrationSet {
    pub fn generate(task: &Task, seed: u64, n: usize) -> TaskResult<CalibrationSet> {
        Ok(CalibrationSet { seed, tuples: task.sample_tuples(seed, n)? })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Per-tuple denoising loss as a graph node: mean over elements of the
/// squared difference between the injected and the predicted noise.
pub fn tuple_task_loss<'g>(
    g: &'g Graph,
    bound: &BoundNet<'_, 'g>,
    tuple: &Tuple,
    sched: &NoiseSchedule,
) -> TaskResult<Tensor<'g>> {
    let (tokens, width) = bound.network().input_shape();
    let z_t = add_noise(&tuple.z, &tuple.eps, tuple.t, sched)?;
    let z_t = g.constant(vec![tokens, width], z_t)?;
    let eps_true = g.constant(vec![tokens, width], tuple.eps.clone())?;
    let out = bound.forward(z_t, tuple.y, tuple.t)?;
    Ok(out.eps.sub(&eps_true)?.sqnorm().scale(1.0 / (tokens * width) as f64))
}

/// Differentiable batch loss: mean over the batch of per-tuple losses.
pub fn task_loss_graph<'g>(
    g: &'g Graph,
    bound: &BoundNet<'_, 'g>,
    batch: &[Tuple],
    sched: &NoiseSchedule,
) -> TaskResult<Tensor<'g>> {
    if batch.is_empty() {
        return Err(TaskError::EmptyBatch);
    }
    let mut total: Option<Tensor<'g>> = None;
    for tuple in batch {
        let l = tuple_task_loss(g, bound, tuple, sched)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
}

/// Non-differentiating convenience wrapper over [`task_loss_graph`].
pub fn task_loss(net: &Network, batch: &[Tuple], sched: &NoiseSchedule) -> TaskResult<f64> {
    let g = Graph::new();
    let bound = net.bind(&g, false);
    Ok(task_loss_graph(&g, &bound, batch, sched)?.item())
}
