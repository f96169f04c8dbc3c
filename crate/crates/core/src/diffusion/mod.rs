//! Forward corruption, guided reverse sampling and training of discrete diffusion models.
//!
//! Denoisers predict the clean-token distribution `p(x0 | x_t)` at every position
//! (x0-parameterization). The reverse kernel is the posterior mixture
//! `p(x_{t-1} | x_t) = sum_x0 q(x_{t-1} | x_t, x0) p(x0 | x_t)`, applied independently per
//! position.

mod bayes;
mod grid;
mod guidance;
mod tabular;
mod vlb;

use rand::Rng;
use rayon::prelude::*;

pub use bayes::{bayes_oracle_denoiser, BayesOracle, WeightedGrid, BAYES_MAX_SUPPORT};
pub use grid::{Condition, GridShape, TokenGrid};
pub use guidance::{cfg_combine, cfg_combine_probs, Guidance, GuidanceMode, UNCOND_LOG_FLOOR};
pub use tabular::{train_denoiser, TabularDenoiser, TrainConfig, TrainReport, TABULAR_MAX_PARAMS};
pub use vlb::{vlb_loss, VlbEstimate};

use crate::error::{ensure_arg, Error, Result};
use crate::rng::{self, sample_categorical};
use crate::schedules::{Schedule, ScheduleTable};
use crate::transitions::{kernel_prob, marginal_prob, stationary_dist, CategoricalDist};

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 100;
/// Default reverse-process stride.
pub const DEFAULT_STRIDE: usize = 1;

/// Tolerance on the normalization of denoiser outputs.
const DENOISER_SIMPLEX_TOL: f64 = 1e-9;

/// A conditional predictor of clean tokens.
///
/// `predict` returns, for every flattened position of `x_t`, a distribution over the `K` real
/// tokens (the mask is never a target).
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>> {
        (**self).predict(x_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>> {
        (**self).predict(x_t, t, cond)
    }
}

fn check_prediction(pred: &[Vec<f64>], positions: usize, num_classes: usize) -> Result<()> {
    if pred.len() != positions {
        return Err(Error::Contract(format!(
            "denoiser returned {} distributions for {positions} positions",
            pred.len()
        )));
    }
    for (i, p) in pred.iter().enumerate() {
        if p.len() != num_classes {
            return Err(Error::Contract(format!(
                "position {i}: distribution has {} entries, expected K={num_classes}",
                p.len()
            )));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (total - 1.0).abs() > DENOISER_SIMPLEX_TOL {
            return Err(Error::Contract(format!("position {i}: not a probability vector (sum {total})")));
        }
    }
    Ok(())
}

/// Query the denoiser, applying classifier-free guidance when it is active and the condition
/// is a real label.
pub fn guided_prediction<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &TokenGrid,
    t: usize,
    cond: Condition,
    guidance: Guidance,
) -> Result<Vec<Vec<f64>>> {
    let k = x_t.shape().num_classes;
    let cond_pred = denoiser.predict(x_t, t, cond)?;
    check_prediction(&cond_pred, x_t.len(), k)?;
    if !guidance.is_active() || cond == Condition::Null {
        return Ok(cond_pred);
    }
    let uncond_pred = denoiser.predict(x_t, t, Condition::Null)?;
    check_prediction(&uncond_pred, x_t.len(), k)?;
    cond_pred
        .iter()
        .zip(&uncond_pred)
        .map(|(c, u)| Ok(cfg_combine_probs(c, u, guidance)?.into_vec()))
        .collect()
}

/// Sample `x_t ~ q(x_t | x0)` independently at every position.
pub fn corrupt<R: Rng + ?Sized>(x0: &TokenGrid, t: usize, schedule: &Schedule, rng: &mut R) -> Result<TokenGrid> {
    x0.ensure_clean()?;
    let shape = x0.shape();
    schedule.check_shape(shape.num_classes, shape.num_layers, shape.frames, shape.layout)?;
    ensure_arg!(t <= schedule.steps(), "t={t} exceeds T={}", schedule.steps());
    let mut out = x0.clone();
    if t == 0 {
        return Ok(out);
    }
    let k = shape.num_classes;
    for (pos, tok) in out.tokens_mut().iter_mut().enumerate() {
        let c = schedule.table_at(pos).cumulative(t);
        // mixture: keep w.p. alpha_bar, mask w.p. gamma_bar, else uniform over K
        let u: f64 = rng.random();
        if u < c.alpha {
        } else if u < c.alpha + c.gamma {
            *tok = k as u32;
        } else {
            *tok = rng.random_range(0..k as u32);
        }
    }
    Ok(out)
}

/// Unnormalized reverse-kernel weights and the consistent prediction mass.
///
/// For `x_s` given `x_t` (`s < t`) and a clean-token distribution `x0_probs`, returns
/// `(weights, consistent_mass)` where `weights[k] = sum_x0 Q(x_t | k) q(k | x0) p(x0) / q(x_t | x0)`
/// over clean tokens `x0` that can produce `x_t`, and `consistent_mass` is their total
/// probability. The weights sum to `consistent_mass`.
pub(crate) fn reverse_kernel_weights(
    xt: usize,
    s: usize,
    t: usize,
    x0_probs: &[f64],
    table: &ScheduleTable,
) -> (Vec<f64>, f64) {
    let k = table.num_classes();
    let step = table.transition_between(s, t);
    let prev = table.cumulative(s);
    let mut ratio = vec![0.0; k];
    let mut ratio_sum = 0.0;
    let mut consistent = 0.0;
    for (x0, &p) in x0_probs.iter().enumerate() {
        let z = marginal_prob(xt, x0, table, t);
        if z > 0.0 {
            ratio[x0] = p / z;
            ratio_sum += ratio[x0];
            consistent += p;
        }
    }
    let mut weights = vec![0.0; k + 1];
    for (j, w) in weights.iter_mut().enumerate().take(k) {
        let q = kernel_prob(xt, j, step, k);
        if q > 0.0 {
            *w = q * (prev.alpha * ratio[j] + prev.beta * ratio_sum);
        }
    }
    weights[k] = kernel_prob(xt, k, step, k) * prev.gamma * ratio_sum;
    (weights, consistent)
}

/// `p(x_s | x_t) = sum_x0 q(x_s | x_t, x0) p(x0)` with `p(x0)` restricted to clean tokens
/// that can produce `x_t`.
pub fn reverse_kernel(xt: usize, s: usize, t: usize, x0_probs: &[f64], table: &ScheduleTable) -> Result<CategoricalDist> {
    let k = table.num_classes();
    ensure_arg!(x0_probs.len() == k, "clean-token distribution must have K={k} entries");
    ensure_arg!(s < t && t <= table.steps(), "need s < t <= T, got s={s}, t={t}");
    let (weights, consistent) = reverse_kernel_weights(xt, s, t, x0_probs, table);
    if consistent <= 0.0 {
        return Err(Error::Contract(format!(
            "denoiser assigns no mass to clean tokens consistent with x_t={xt} at t={t}"
        )));
    }
    CategoricalDist::from_weights(weights)
}

/// Per-position distributions of `x_s` given `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_distributions<D: Denoiser + ?Sized>(
    x_t: &TokenGrid,
    t: usize,
    s: usize,
    denoiser: &D,
    cond: Condition,
    schedule: &Schedule,
    guidance: Guidance,
) -> Result<Vec<CategoricalDist>> {
    let shape = x_t.shape();
    schedule.check_shape(shape.num_classes, shape.num_layers, shape.frames, shape.layout)?;
    ensure_arg!(s < t && t <= schedule.steps(), "need s < t <= T, got s={s}, t={t}");
    let pred = guided_prediction(denoiser, x_t, t, cond, guidance)?;
    x_t.tokens()
        .iter()
        .zip(&pred)
        .enumerate()
        .map(|(pos, (&xt, p))| reverse_kernel(xt as usize, s, t, p, schedule.table_at(pos)))
        .collect()
}

/// One reverse transition from step `t` to step `s < t`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_to<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_t: &TokenGrid,
    t: usize,
    s: usize,
    denoiser: &D,
    cond: Condition,
    schedule: &Schedule,
    guidance: Guidance,
    rng: &mut R,
) -> Result<TokenGrid> {
    let dists = reverse_step_distributions(x_t, t, s, denoiser, cond, schedule, guidance)?;
    let mut out = x_t.clone();
    for (tok, d) in out.tokens_mut().iter_mut().zip(&dists) {
        *tok = sample_categorical(d.probs(), rng) as u32;
    }
    Ok(out)
}

/// One reverse transition from step `t` to `t - 1`.
pub fn reverse_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_t: &TokenGrid,
    t: usize,
    denoiser: &D,
    cond: Condition,
    schedule: &Schedule,
    guidance: Guidance,
    rng: &mut R,
) -> Result<TokenGrid> {
    ensure_arg!(t >= 1, "reverse step needs t >= 1");
    reverse_step_to(x_t, t, t - 1, denoiser, cond, schedule, guidance, rng)
}

/// Draw `x_T` from the stationary distribution of each position's schedule.
pub fn sample_prior<R: Rng + ?Sized>(shape: GridShape, schedule: &Schedule, rng: &mut R) -> Result<TokenGrid> {
    schedule.check_shape(shape.num_classes, shape.num_layers, shape.frames, shape.layout)?;
    let mut grid = TokenGrid::filled(shape, shape.mask_id());
    for (pos, tok) in grid.tokens_mut().iter_mut().enumerate() {
        let prior = stationary_dist(schedule.table_at(pos));
        *tok = sample_categorical(prior.probs(), rng) as u32;
    }
    Ok(grid)
}

/// Run the reverse process from `x_T` to a clean grid with stride `stride`.
///
/// Masks still present at the end are replaced by the denoiser's most likely clean token.
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: Condition,
    schedule: &Schedule,
    shape: GridShape,
    stride: usize,
    guidance: Guidance,
    rng: &mut R,
) -> Result<TokenGrid> {
    ensure_arg!(stride >= 1, "stride must be >= 1");
    let mut x = sample_prior(shape, schedule, rng)?;
    let mut t = schedule.steps();
    while t > 0 {
        let s = t.saturating_sub(stride);
        x = reverse_step_to(&x, t, s, denoiser, cond, schedule, guidance, rng)?;
        t = s;
    }
    if !x.is_clean() {
        let pred = guided_prediction(denoiser, &x, 1, cond, guidance)?;
        let mask = x.mask_id();
        for (tok, p) in x.tokens_mut().iter_mut().zip(&pred) {
            if *tok == mask {
                *tok = CategoricalDist::new(p.clone())?.argmax() as u32;
            }
        }
    }
    Ok(x)
}

/// `count` independent chains; chain `i` uses stream `i` of `seed`, so the output does not
/// depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: Condition,
    schedule: &Schedule,
    shape: GridShape,
    stride: usize,
    guidance: Guidance,
    seed: u64,
    count: usize,
) -> Result<Vec<TokenGrid>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            sample(denoiser, cond, schedule, shape, stride, guidance, &mut rng)
        })
        .collect()
}
