use serde::{Deserialize, Serialize};

use super::{Condition, Denoiser, GridShape, TokenGrid};
use crate::error::{ensure_arg, Error, Result};
use crate::schedules::Schedule;
use crate::transitions::marginal_prob;

/// Largest support the exact-Bayes denoiser will enumerate.
pub const BAYES_MAX_SUPPORT: usize = 10_000;

/// One support point of an explicit data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedGrid {
    pub tokens: Vec<u32>,
    pub label: Condition,
    pub weight: f64,
}

/// Exact posterior `p(x0[i] | x_t)` over an enumerable data distribution.
///
/// Conditioning on a label restricts the support to that label; the null condition uses the
/// whole joint distribution.
#[derive(Debug, Clone)]
pub struct BayesOracle {
    shape: GridShape,
    schedule: Schedule,
    support: Vec<WeightedGrid>,
}

/// Build the exact-Bayes denoiser for `support` (weights need not be normalized).
pub fn bayes_oracle_denoiser(shape: GridShape, support: Vec<WeightedGrid>, schedule: &Schedule) -> Result<BayesOracle> {
    if support.len() > BAYES_MAX_SUPPORT {
        return Err(Error::Refused(format!(
            "support of {} grids exceeds the enumeration limit {BAYES_MAX_SUPPORT}",
            support.len()
        )));
    }
    ensure_arg!(!support.is_empty(), "data distribution has empty support");
    schedule.check_shape(shape.num_classes, shape.num_layers, shape.frames, shape.layout)?;
    for w in &support {
        TokenGrid::new(shape, w.tokens.clone())?.ensure_clean()?;
        ensure_arg!(w.weight.is_finite() && w.weight >= 0.0, "support weights must be nonnegative");
    }
    let total: f64 = support.iter().map(|w| w.weight).sum();
    ensure_arg!(total > 0.0, "support weights sum to zero");
    let support = support
        .into_iter()
        .map(|w| WeightedGrid {
            weight: w.weight / total,
            ..w
        })
        .collect();
    Ok(BayesOracle {
        shape,
        schedule: schedule.clone(),
        support,
    })
}

impl BayesOracle {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn support(&self) -> &[WeightedGrid] {
        &self.support
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Joint posterior weight of every support point given `x_t` (unnormalized).
    fn evidence(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Vec<f64> {
        self.support
            .iter()
            .map(|w| {
                if cond != Condition::Null && w.label != cond {
                    return 0.0;
                }
                let mut like = w.weight;
                for (pos, (&xt, &x0)) in x_t.tokens().iter().zip(&w.tokens).enumerate() {
                    like *= marginal_prob(xt as usize, x0 as usize, self.schedule.table_at(pos), t);
                    if like == 0.0 {
                        break;
                    }
                }
                like
            })
            .collect()
    }
}

impl Denoiser for BayesOracle {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>> {
        ensure_arg!(x_t.shape() == self.shape, "grid shape does not match the oracle's data");
        ensure_arg!(t <= self.schedule.steps(), "t={t} exceeds T={}", self.schedule.steps());
        if cond != Condition::Null && !self.support.iter().any(|w| w.label == cond) {
            return Err(Error::Argument(format!("no support point carries label {cond:?}")));
        }
        let evidence = self.evidence(x_t, t, cond);
        let total: f64 = evidence.iter().sum();
        if total <= 0.0 {
            return Err(Error::Inconsistent(format!("x_t has zero probability at t={t} under the data distribution")));
        }
        let k = self.shape.num_classes;
        let mut out = vec![vec![0.0; k]; x_t.len()];
        for (w, e) in self.support.iter().zip(&evidence) {
            if *e == 0.0 {
                continue;
            }
            for (row, &tok) in out.iter_mut().zip(&w.tokens) {
                row[tok as usize] += e / total;
            }
        }
        Ok(out)
    }
}
