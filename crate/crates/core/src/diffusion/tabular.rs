//! Tabular x0-predictor trained on the variational bound.
//!
//! The model keeps one logit vector over the `K` clean tokens per
//! `(t, position, observed token, condition slot)`; condition slot `C` is the null condition.
//! It sees only the token at its own position, so it captures per-position marginals but no
//! cross-position dependence.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vlb::prior_kl;
use super::{corrupt, reverse_kernel_weights, Condition, Denoiser, GridShape, TokenGrid};
use crate::error::{ensure_arg, Error, Result};
use crate::rng;
use crate::schedules::{Schedule, ScheduleTable};
use crate::transitions::{kernel_prob, marginal_prob, true_posterior};

/// Upper bound on the number of logits a tabular model may allocate.
pub const TABULAR_MAX_PARAMS: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDenoiser {
    shape: GridShape,
    steps: usize,
    num_labels: usize,
    logits: Vec<f64>,
}

impl TabularDenoiser {
    /// Uniform model (all logits zero).
    pub fn new(shape: GridShape, steps: usize, num_labels: usize) -> Result<Self> {
        ensure_arg!(steps >= 1, "step count must be >= 1");
        let k = shape.num_classes;
        let size = steps
            .checked_mul(shape.len())
            .and_then(|v| v.checked_mul(k + 1))
            .and_then(|v| v.checked_mul(num_labels + 1))
            .and_then(|v| v.checked_mul(k))
            .filter(|&v| v <= TABULAR_MAX_PARAMS)
            .ok_or_else(|| Error::Argument(format!("tabular model would exceed {TABULAR_MAX_PARAMS} parameters")))?;
        Ok(Self {
            shape,
            steps,
            num_labels,
            logits: vec![0.0; size],
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn slot(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.num_labels),
            Condition::Label(l) if (l as usize) < self.num_labels => Ok(l as usize),
            Condition::Label(l) => Err(Error::Argument(format!(
                "label {l} unknown to a model trained with {} labels",
                self.num_labels
            ))),
        }
    }

    fn offset(&self, t: usize, pos: usize, observed: u32, slot: usize) -> usize {
        let k = self.shape.num_classes;
        ((((t - 1) * self.shape.len() + pos) * (k + 1) + observed as usize) * (self.num_labels + 1) + slot) * k
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let expected = Self::new(self.shape, self.steps, self.num_labels)?.logits.len();
        ensure_arg!(self.logits.len() == expected, "tabular model has {} logits, expected {expected}", self.logits.len());
        ensure_arg!(self.logits.iter().all(|v| v.is_finite()), "tabular model has non-finite logits");
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Denoiser for TabularDenoiser {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>> {
        ensure_arg!(x_t.shape() == self.shape, "grid shape does not match the model");
        ensure_arg!((1..=self.steps).contains(&t), "t={t} outside 1..={}", self.steps);
        let slot = self.slot(cond)?;
        let k = self.shape.num_classes;
        Ok(x_t
            .tokens()
            .iter()
            .enumerate()
            .map(|(pos, &obs)| {
                let off = self.offset(t, pos, obs, slot);
                softmax(&self.logits[off..off + k])
            })
            .collect())
    }
}

/// Per-position bound term and its gradient with respect to the clean-token probabilities.
///
/// Returns `KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t))` and writes `dKL/dp(x)` into `grad`.
pub(crate) fn position_kl_grad(
    xt: usize,
    x0: usize,
    t: usize,
    probs: &[f64],
    table: &ScheduleTable,
    grad: &mut [f64],
) -> Result<f64> {
    let k = table.num_classes();
    let s = t - 1;
    let q = true_posterior(xt, x0, t, table)?;
    let (weights, consistent) = reverse_kernel_weights(xt, s, t, probs, table);
    let step = table.transition_between(s, t);
    let prev = table.cumulative(s);
    let mut kl = 0.0;
    let mut ratio = vec![0.0; k + 1];
    for j in 0..=k {
        let qj = q.probs()[j];
        if qj == 0.0 {
            continue;
        }
        if weights[j] <= 0.0 {
            grad.fill(0.0);
            return Ok(f64::INFINITY);
        }
        kl += qj * (qj * consistent / weights[j]).ln();
        ratio[j] = qj * kernel_prob(xt, j, step, k) / weights[j];
    }
    let ratio_real: f64 = ratio[..k].iter().sum();
    for (x, g) in grad.iter_mut().enumerate() {
        let z = marginal_prob(xt, x, table, t);
        *g = if z > 0.0 {
            -(prev.alpha * ratio[x] + prev.beta * ratio_real + prev.gamma * ratio[k]) / z + 1.0 / consistent
        } else {
            0.0
        };
    }
    Ok(kl.max(0.0))
}

/// Hyper-parameters of [`train_denoiser`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Probability of replacing the label with the null condition for a training example.
    pub null_prob: f64,
    /// Per-cell gradient norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 2.0,
            null_prob: 0.1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Loss trace of a training run: mean single-sample bound estimate (nats) per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub initial_loss: f64,
}

impl TrainReport {
    /// Trailing moving average of the loss trace over `window` epochs.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.loss_trace.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let slice = &self.loss_trace[lo..=i];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect()
    }
}

fn example_loss<R: Rng + ?Sized>(
    model: &mut TabularDenoiser,
    x0: &TokenGrid,
    cond: Condition,
    schedule: &Schedule,
    config: Option<&TrainConfig>,
    rng: &mut R,
) -> Result<f64> {
    let steps = schedule.steps();
    let k = model.shape.num_classes;
    let t = rng.random_range(1..=steps);
    let x_t = corrupt(x0, t, schedule, rng)?;
    let slot = model.slot(cond)?;
    let mut grad = vec![0.0; k];
    let mut total = 0.0;
    for (pos, (&xt, &clean)) in x_t.tokens().iter().zip(x0.tokens()).enumerate() {
        let off = model.offset(t, pos, xt, slot);
        let probs = softmax(&model.logits[off..off + k]);
        let kl = position_kl_grad(xt as usize, clean as usize, t, &probs, schedule.table_at(pos), &mut grad)?;
        total += kl;
        let Some(cfg) = config else { continue };
        if !kl.is_finite() {
            continue;
        }
        // chain rule through the softmax
        let mean: f64 = probs.iter().zip(&grad).map(|(p, g)| p * g).sum();
        let mut dz: Vec<f64> = probs.iter().zip(&grad).map(|(p, g)| p * (g - mean)).collect();
        let norm = dz.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            dz.iter_mut().for_each(|v| *v *= cfg.clip_norm / norm);
        }
        for (l, d) in model.logits[off..off + k].iter_mut().zip(&dz) {
            *l -= cfg.learning_rate * d;
        }
    }
    Ok(steps as f64 * total)
}

/// Fit a [`TabularDenoiser`] by stochastic gradient descent on the variational bound.
///
/// Each example draws `t` uniformly, corrupts `x0` to `x_t`, and takes one gradient step on
/// the per-position KL terms; with probability `null_prob` its label is replaced by the null
/// condition so the same table also learns the unconditional predictor.
pub fn train_denoiser(
    dataset: &[(TokenGrid, Condition)],
    schedule: &Schedule,
    config: &TrainConfig,
) -> Result<(TabularDenoiser, TrainReport)> {
    ensure_arg!(!dataset.is_empty(), "training set is empty");
    ensure_arg!((0.0..=1.0).contains(&config.null_prob), "null_prob must be in [0, 1]");
    ensure_arg!(config.learning_rate > 0.0 && config.clip_norm > 0.0, "learning rate and clip norm must be positive");
    let shape = dataset[0].0.shape();
    for (g, _) in dataset {
        ensure_arg!(g.shape() == shape, "all training grids must share K, N_q, L and layout");
        g.ensure_clean()?;
    }
    schedule.check_shape(shape.num_classes, shape.num_layers, shape.frames, shape.layout)?;
    let num_labels = dataset
        .iter()
        .filter_map(|(_, c)| match c {
            Condition::Label(l) => Some(*l as usize + 1),
            Condition::Null => None,
        })
        .max()
        .unwrap_or(0);
    let mut model = TabularDenoiser::new(shape, schedule.steps(), num_labels)?;
    let mut rng = rng::stream(config.seed, 0);

    let prior: Vec<f64> = dataset.iter().map(|(g, _)| prior_kl(g, schedule)).collect::<Result<_>>()?;
    let mut initial = 0.0;
    for ((g, c), p) in dataset.iter().zip(&prior) {
        initial += example_loss(&mut model, g, *c, schedule, None, &mut rng)? + p;
    }
    let initial_loss = initial / dataset.len() as f64;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (g, label) = &dataset[i];
            let cond = if rng.random::<f64>() < config.null_prob {
                Condition::Null
            } else {
                *label
            };
            epoch_loss += example_loss(&mut model, g, cond, schedule, Some(config), &mut rng)? + prior[i];
        }
        loss_trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, TrainReport { loss_trace, initial_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_chains, Guidance};
    use crate::schedules::{linear_schedule, Layout};
    use approx::assert_abs_diff_eq;

    fn kl_at(xt: usize, x0: usize, t: usize, probs: &[f64], table: &ScheduleTable) -> f64 {
        let mut g = vec![0.0; probs.len()];
        position_kl_grad(xt, x0, t, probs, table, &mut g).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let table = linear_schedule(6, 4).unwrap();
        let probs = [0.1, 0.4, 0.3, 0.2];
        for (xt, x0, t) in [(4, 1, 3), (2, 1, 2), (1, 1, 5), (0, 3, 6), (4, 0, 1)] {
            let mut grad = vec![0.0; 4];
            position_kl_grad(xt, x0, t, &probs, &table, &mut grad).unwrap();
            for x in 0..4 {
                let h = 1e-6;
                let mut up = probs;
                up[x] += h;
                let mut dn = probs;
                dn[x] -= h;
                let fd = (kl_at(xt, x0, t, &up, &table) - kl_at(xt, x0, t, &dn, &table)) / (2.0 * h);
                assert_abs_diff_eq!(grad[x], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn default_null_probability_is_ten_percent() {
        assert_eq!(TrainConfig::default().null_prob, 0.1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let sched: Schedule = linear_schedule(4, 3).unwrap().into();
        assert!(matches!(train_denoiser(&[], &sched, &TrainConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn repeated_grid_is_reproduced() {
        let sched: Schedule = linear_schedule(8, 4).unwrap().into();
        let shape = GridShape::new(4, 1, 3, Layout::Concatenated).unwrap();
        let g = TokenGrid::new(shape, vec![3, 0, 2]).unwrap();
        let data = vec![(g.clone(), Condition::Null); 50];
        let cfg = TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        };
        let (model, report) = train_denoiser(&data, &sched, &cfg).unwrap();
        let smooth = report.smoothed(5);
        assert!(*smooth.last().unwrap() < 0.5 * report.initial_loss, "{report:?}");
        let samples = sample_chains(&model, Condition::Null, &sched, shape, 1, Guidance::off(), 5, 500).unwrap();
        let hits = samples.iter().filter(|s| **s == g).count();
        assert!(hits as f64 / 500.0 > 0.99, "hits {hits}");
    }

    #[test]
    fn unknown_label_is_rejected() {
        let shape = GridShape::new(3, 1, 1, Layout::Concatenated).unwrap();
        let m = TabularDenoiser::new(shape, 2, 2).unwrap();
        let x = TokenGrid::new(shape, vec![3]).unwrap();
        assert!(m.predict(&x, 1, Condition::Label(1)).is_ok());
        assert!(m.predict(&x, 1, Condition::Label(2)).is_err());
        assert!(m.predict(&x, 0, Condition::Null).is_err());
    }
}
