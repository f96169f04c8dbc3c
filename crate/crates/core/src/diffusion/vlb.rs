use rand::Rng;

use super::{corrupt, reverse_step_distributions, Condition, Denoiser, Guidance, TokenGrid};
use crate::error::{ensure_arg, Result};
use crate::schedules::Schedule;
use crate::transitions::{marginal_xt_given_x0, stationary_dist, true_posterior};

/// Monte-Carlo estimate of the variational bound for one clean grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VlbEstimate {
    /// Estimated bound in nats (prior term included). `+inf` when the model assigns zero
    /// probability to a reachable state.
    pub nats: f64,
    /// Standard error of the Monte-Carlo part.
    pub std_error: f64,
    /// Exact prior term `KL(q(x_T | x0) || p(x_T))`.
    pub prior_nats: f64,
    pub samples: usize,
    pub diagnostic: Option<String>,
}

/// `KL(q || p)` in nats; `+inf` if `p` misses support of `q`.
pub(crate) fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(&qi, &pi)| if pi > 0.0 { qi * (qi / pi).ln() } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0)
}

/// Exact prior term summed over positions.
pub(crate) fn prior_kl(x0: &TokenGrid, schedule: &Schedule) -> Result<f64> {
    let steps = schedule.steps();
    let mut total = 0.0;
    for (pos, &tok) in x0.tokens().iter().enumerate() {
        let table = schedule.table_at(pos);
        let q = marginal_xt_given_x0(tok as usize, steps, table)?;
        total += kl_divergence(q.probs(), stationary_dist(table).probs());
    }
    Ok(total)
}

/// `sum_i KL(q(x_{t-1}[i] | x_t[i], x0[i]) || p(x_{t-1}[i] | x_t))` for one `(t, x_t)`.
pub(crate) fn step_kl<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &TokenGrid,
    x_t: &TokenGrid,
    t: usize,
    cond: Condition,
    schedule: &Schedule,
) -> Result<f64> {
    let model = reverse_step_distributions(x_t, t, t - 1, denoiser, cond, schedule, Guidance::off())?;
    let mut total = 0.0;
    for (pos, ((&xt, &x0), p)) in x_t.tokens().iter().zip(x0.tokens()).zip(&model).enumerate() {
        let q = true_posterior(xt as usize, x0 as usize, t, schedule.table_at(pos))?;
        total += kl_divergence(q.probs(), p.probs());
    }
    Ok(total)
}

/// Estimate `sum_{t=1..T} E[KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t))] + KL(q(x_T|x0) || p(x_T))`.
///
/// Each of the `num_t_samples` draws picks `t` uniformly in `1..=T` and `x_t ~ q(x_t | x0)`;
/// the sum over steps is estimated as `T` times the mean per-step KL.
pub fn vlb_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x0: &TokenGrid,
    cond: Condition,
    schedule: &Schedule,
    rng: &mut R,
    num_t_samples: usize,
) -> Result<VlbEstimate> {
    x0.ensure_clean()?;
    ensure_arg!(num_t_samples >= 1, "need at least one Monte-Carlo sample");
    let steps = schedule.steps();
    let prior_nats = prior_kl(x0, schedule)?;
    let mut values = Vec::with_capacity(num_t_samples);
    for _ in 0..num_t_samples {
        let t = rng.random_range(1..=steps);
        let x_t = corrupt(x0, t, schedule, rng)?;
        let kl = step_kl(denoiser, x0, &x_t, t, cond, schedule)?;
        if kl.is_infinite() {
            return Ok(VlbEstimate {
                nats: f64::INFINITY,
                std_error: f64::NAN,
                prior_nats,
                samples: values.len() + 1,
                diagnostic: Some(format!(
                    "model gives zero probability to a reachable x_(t-1) at t={t} (x_t={:?})",
                    x_t.tokens()
                )),
            });
        }
        values.push(steps as f64 * kl);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let diagnostic = prior_nats.is_infinite().then(|| "prior term is infinite: stationary distribution misses q(x_T|x0) support".to_string());
    Ok(VlbEstimate {
        nats: mean + prior_nats,
        std_error: (var / n).sqrt(),
        prior_nats,
        samples: values.len(),
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{bayes_oracle_denoiser, GridShape, WeightedGrid};
    use crate::rng;
    use crate::schedules::{linear_schedule, Layout};

    #[test]
    fn kl_basics() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
        assert!(kl_divergence(&[0.9, 0.1], &[0.1, 0.9]) > 0.0);
    }

    #[test]
    fn single_point_bayes_bound_vanishes() {
        let sched: Schedule = linear_schedule(6, 3).unwrap().into();
        let shape = GridShape::new(3, 1, 3, Layout::Concatenated).unwrap();
        let x0 = TokenGrid::new(shape, vec![2, 0, 1]).unwrap();
        let oracle = bayes_oracle_denoiser(
            shape,
            vec![WeightedGrid {
                tokens: x0.tokens().to_vec(),
                label: Condition::Null,
                weight: 1.0,
            }],
            &sched,
        )
        .unwrap();
        let est = vlb_loss(&oracle, &x0, Condition::Null, &sched, &mut rng::stream(1, 0), 200).unwrap();
        assert!(est.nats < 1e-9, "{est:?}");
        assert!(est.nats >= 0.0);
    }
}
