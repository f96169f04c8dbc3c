//! Exact linear algebra of the mask+uniform categorical diffusion.
//!
//! States are `0..K` for real tokens and `K` for the mask. Matrices use the column
//! convention: column `j` of `Q_t` is the distribution of `x_t` given `x_{t-1} = j`, so the
//! marginal of `x_t` is `Q_t ... Q_1 c(x_0)` with `c` the one-hot column embedding.

use nalgebra::DMatrix;

use crate::error::{ensure_arg, Error, Result};
use crate::schedules::{ScheduleTable, StepCoefficients};

/// Largest alphabet the brute-force oracle accepts.
pub const ORACLE_MAX_CLASSES: usize = 16;
/// Largest step count the brute-force oracle accepts.
pub const ORACLE_MAX_STEPS: usize = 64;

/// A probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist(Vec<f64>);

impl CategoricalDist {
    /// Validate and wrap a probability vector (entries >= 0, sum within 1e-10 of 1).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("empty distribution".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Argument("distribution has a negative or non-finite entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Argument(format!("distribution sums to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Normalize nonnegative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Argument("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Inconsistent("all weights are zero".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    /// Normalize log-weights with the log-sum-exp shift. `-inf` entries get probability 0.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::Inconsistent("all log-weights are -inf".into()));
        }
        let weights = log_weights.iter().map(|&l| (l - max).exp()).collect();
        Self::from_weights(weights)
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// A column-stochastic `(K+1) x (K+1)` transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(DMatrix<f64>);

impl TransitionMatrix {
    pub fn identity(num_classes: usize) -> Self {
        Self(DMatrix::identity(num_classes + 1, num_classes + 1))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Entry `(row, col)`: probability of moving to `row` from `col`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    /// `self * rhs`: apply `rhs` first, then `self`.
    pub fn compose(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        TransitionMatrix(&self.0 * &rhs.0)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.0.column(col).iter().copied().collect()
    }

    /// Largest deviation of any column sum from 1.
    pub fn max_column_defect(&self) -> f64 {
        self.0
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Build `Q_t` from stepwise coefficients.
pub fn build_transition_matrix(alpha: f64, beta: f64, gamma: f64, num_classes: usize) -> Result<TransitionMatrix> {
    ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
    ensure_arg!(
        alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0,
        "coefficients must be nonnegative: alpha={alpha}, beta={beta}, gamma={gamma}"
    );
    let total = alpha + num_classes as f64 * beta + gamma;
    ensure_arg!((total - 1.0).abs() <= 1e-9, "alpha + K*beta + gamma = {total}, expected 1");
    let n = num_classes + 1;
    let m = DMatrix::from_fn(n, n, |row, col| {
        if col == num_classes {
            if row == num_classes {
                1.0
            } else {
                0.0
            }
        } else if row == num_classes {
            gamma
        } else if row == col {
            alpha + beta
        } else {
            beta
        }
    });
    Ok(TransitionMatrix(m))
}

/// `P(x_t = to | x_s = from)` for a mask+uniform kernel with coefficients `c`.
#[inline]
pub fn kernel_prob(to: usize, from: usize, c: StepCoefficients, num_classes: usize) -> f64 {
    if from == num_classes {
        return if to == num_classes { 1.0 } else { 0.0 };
    }
    if to == num_classes {
        c.gamma
    } else if to == from {
        c.alpha + c.beta
    } else {
        c.beta
    }
}

/// `q(x_t = xt | x_0 = x0)` from the cumulative coefficients at step `t`.
#[inline]
pub fn marginal_prob(xt: usize, x0: usize, table: &ScheduleTable, t: usize) -> f64 {
    kernel_prob(xt, x0, table.cumulative(t), table.num_classes())
}

/// Closed-form `q(x_t | x_0)`: `alpha_bar c(x0) + beta_bar 1 + (gamma_bar - beta_bar) c(mask)`.
pub fn marginal_xt_given_x0(x0: usize, t: usize, table: &ScheduleTable) -> Result<CategoricalDist> {
    let k = table.num_classes();
    ensure_arg!(x0 < k, "x0={x0} must be a real token (< K={k}); the mask id is not a valid clean token");
    ensure_arg!(t <= table.steps(), "t={t} exceeds T={}", table.steps());
    let c = table.cumulative(t);
    let mut probs = vec![c.beta; k + 1];
    probs[x0] += c.alpha;
    probs[k] = c.gamma;
    Ok(CategoricalDist(probs))
}

/// `p(x_T) = [beta_bar_T, ..., beta_bar_T, gamma_bar_T]`.
///
/// This is the exact endpoint of the forward process only when `alpha_bar_T = 0`; otherwise
/// it is the prior the reverse process starts from and the remaining survival mass is folded
/// into the uniform part so the vector stays normalized.
pub fn stationary_dist(table: &ScheduleTable) -> CategoricalDist {
    let k = table.num_classes();
    let end = table.cumulative(table.steps());
    let uniform = (1.0 - end.gamma) / k as f64;
    let mut probs = vec![uniform; k + 1];
    probs[k] = end.gamma;
    CategoricalDist(probs)
}

/// `q(x_s | x_t, x_0)` for `s < t`, via Bayes' rule on the composite kernel `x_s -> x_t`.
pub fn posterior_between(xt: usize, x0: usize, s: usize, t: usize, table: &ScheduleTable) -> Result<CategoricalDist> {
    let k = table.num_classes();
    ensure_arg!(x0 < k, "x0={x0} must be a real token (< K={k})");
    ensure_arg!(xt <= k, "x_t={xt} out of range (max {k})");
    ensure_arg!(s < t && t <= table.steps(), "need s < t <= T, got s={s}, t={t}");
    let step = table.transition_between(s, t);
    let log_weights: Vec<f64> = (0..=k)
        .map(|prev| {
            let w = kernel_prob(xt, prev, step, k) * marginal_prob(prev, x0, table, s);
            if w > 0.0 {
                w.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    CategoricalDist::from_log_weights(&log_weights).map_err(|_| {
        Error::Inconsistent(format!(
            "x_t={xt} has zero probability at t={t} given x_0={x0}; posterior is undefined"
        ))
    })
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn true_posterior(xt: usize, x0: usize, t: usize, table: &ScheduleTable) -> Result<CategoricalDist> {
    ensure_arg!(t >= 1, "the posterior needs t >= 1");
    posterior_between(xt, x0, t - 1, t, table)
}

/// Explicit product `Q_t ... Q_1` built from the stepwise coefficients. Test-only oracle.
pub fn brute_force_cumulative(t: usize, table: &ScheduleTable) -> Result<TransitionMatrix> {
    let k = table.num_classes();
    if k > ORACLE_MAX_CLASSES || table.steps() > ORACLE_MAX_STEPS {
        return Err(Error::Refused(format!(
            "brute-force oracle limited to K <= {ORACLE_MAX_CLASSES}, T <= {ORACLE_MAX_STEPS} (got K={k}, T={})",
            table.steps()
        )));
    }
    ensure_arg!(t <= table.steps(), "t={t} exceeds T={}", table.steps());
    let mut acc = TransitionMatrix::identity(k);
    for s in 1..=t {
        let c = table.stepwise(s);
        let q = build_transition_matrix(c.alpha, c.beta, c.gamma, k)?;
        acc = q.compose(&acc);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::linear_schedule;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_table(k: usize, raw: &[(f64, f64, f64)]) -> ScheduleTable {
        let kf = k as f64;
        let steps: Vec<(f64, f64)> = raw
            .iter()
            .map(|&(a, b, g)| {
                let z = a + kf * b + g + 1e-6;
                (a / z, g / z)
            })
            .collect();
        ScheduleTable::from_stepwise(k, &steps).unwrap()
    }

    #[test]
    fn transition_matrix_example() {
        let q = build_transition_matrix(0.7, 0.1, 0.1, 2).unwrap();
        assert_eq!(q.column(0), vec![0.7 + 0.1, 0.1, 0.1]);
        assert_eq!(q.column(2), vec![0.0, 0.0, 1.0]);
        let id = build_transition_matrix(1.0, 0.0, 0.0, 3).unwrap();
        assert_eq!(id, TransitionMatrix::identity(3));
        assert!(build_transition_matrix(0.5, 0.1, 0.1, 2).is_err());
    }

    #[test]
    fn marginal_at_zero_is_one_hot() {
        let t = linear_schedule(10, 5).unwrap();
        assert_eq!(marginal_xt_given_x0(3, 0, &t).unwrap(), CategoricalDist::one_hot(6, 3));
        assert!(matches!(marginal_xt_given_x0(5, 1, &t), Err(Error::Argument(_))));
    }

    #[test]
    fn linear_endpoint_marginal() {
        let t = linear_schedule(100, 512).unwrap();
        let m = marginal_xt_given_x0(17, 100, &t).unwrap();
        assert_abs_diff_eq!(m.probs()[512], 0.9, epsilon = 1e-12);
        for (i, p) in m.probs()[..512].iter().enumerate() {
            assert!((*p - 0.1 / 512.0).abs() <= 1e-12, "token {i}");
        }
        let s = stationary_dist(&t);
        for (a, b) in s.probs().iter().zip(m.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_of_pure_mask_is_one_hot() {
        let t = ScheduleTable::from_stepwise(3, &[(0.5, 0.5), (0.0, 1.0)]).unwrap();
        assert_eq!(stationary_dist(&t), CategoricalDist::one_hot(4, 3));
    }

    #[test]
    fn deterministic_first_step_posterior() {
        let t = ScheduleTable::from_stepwise(3, &[(1.0, 0.0), (0.5, 0.3)]).unwrap();
        for x0 in 0..3 {
            let p = true_posterior(x0, x0, 1, &t).unwrap();
            assert_eq!(p, CategoricalDist::one_hot(4, x0));
        }
    }

    #[test]
    fn impossible_posterior_is_an_error() {
        // pure-mask kernel: a non-mask x_t must equal x_0
        let t = ScheduleTable::from_stepwise(3, &[(0.5, 0.5), (0.5, 0.5)]).unwrap();
        assert!(matches!(true_posterior(1, 0, 2, &t), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn oracle_guard_refuses_large_instances() {
        let t = linear_schedule(100, 512).unwrap();
        assert!(matches!(brute_force_cumulative(3, &t), Err(Error::Refused(_))));
        let small = linear_schedule(5, 3).unwrap();
        assert_eq!(brute_force_cumulative(0, &small).unwrap(), TransitionMatrix::identity(3));
    }

    proptest! {
        #[test]
        fn closed_form_matches_matrix_product(
            k in 2usize..6,
            raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..0.3, 0.0f64..1.0), 1..9)
        ) {
            let table = random_table(k, &raw);
            for t in 0..=table.steps() {
                let m = brute_force_cumulative(t, &table).unwrap();
                prop_assert!(m.max_column_defect() <= 1e-12);
                prop_assert_eq!(m.column(k), CategoricalDist::one_hot(k + 1, k).into_vec());
                for x0 in 0..k {
                    let closed = marginal_xt_given_x0(x0, t, &table).unwrap();
                    for (a, b) in closed.probs().iter().zip(m.column(x0)) {
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn posterior_marginalizes_back(
            k in 2usize..5,
            raw in proptest::collection::vec((0.05f64..1.0, 0.01f64..0.3, 0.05f64..1.0), 1..7)
        ) {
            let table = random_table(k, &raw);
            for t in 1..=table.steps() {
                for x0 in 0..k {
                    let fwd = marginal_xt_given_x0(x0, t, &table).unwrap();
                    let prev = marginal_xt_given_x0(x0, t - 1, &table).unwrap();
                    let mut acc = vec![0.0; k + 1];
                    for xt in 0..=k {
                        let w = fwd.probs()[xt];
                        if w == 0.0 {
                            continue;
                        }
                        let post = true_posterior(xt, x0, t, &table).unwrap();
                        let total: f64 = post.probs().iter().sum();
                        prop_assert!((total - 1.0).abs() <= 1e-12);
                        for (a, p) in acc.iter_mut().zip(post.probs()) {
                            *a += w * p;
                        }
                    }
                    for (a, b) in acc.iter().zip(prev.probs()) {
                        prop_assert!((a - b).abs() <= 1e-10);
                    }
                }
            }
        }
    }
}
