//! Contrastive losses, retrieval recall and a linear-Gaussian CLUB mutual-information estimate.
//!
//! Similarity matrices are square: row `i` scores query `i` against every candidate and the
//! diagonal holds the matched pairs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

/// Residual variances below this value are raised to it before evaluating `q(y|x)`.
pub const CLUB_VARIANCE_FLOOR: f64 = 1e-8;

fn check_similarity(sim: &[Vec<f64>]) -> Result<usize> {
    let n = sim.len();
    ensure_arg!(n >= 1, "similarity matrix is empty");
    ensure_arg!(sim.iter().all(|r| r.len() == n), "similarity matrix must be square");
    ensure_arg!(sim.iter().flatten().all(|v| v.is_finite()), "similarity matrix has non-finite entries");
    Ok(n)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE: the row-wise and column-wise softmax cross-entropies at the diagonal,
/// averaged.
pub fn info_nce(sim: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let n = check_similarity(sim)?;
    ensure_arg!(temperature > 0.0 && temperature.is_finite(), "temperature must be > 0, got {temperature}");
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let diag = sim[i][i] / temperature;
        rows += log_sum_exp(sim[i].iter().map(|v| v / temperature)) - diag;
        cols += log_sum_exp((0..n).map(|j| sim[j][i] / temperature)) - diag;
    }
    Ok(0.5 * (rows + cols) / n as f64)
}

/// Bidirectional hinge loss averaged over the off-diagonal pairs; zero for `N = 1`.
pub fn contrastive_ranking_loss(sim: &[Vec<f64>], margin: f64) -> Result<f64> {
    let n = check_similarity(sim)?;
    ensure_arg!(margin >= 0.0, "margin must be >= 0, got {margin}");
    if n == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            total += (margin - sim[i][i] + sim[i][j]).max(0.0) + (margin - sim[j][j] + sim[i][j]).max(0.0);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Percentage of rows whose diagonal entry is among the `k` best candidates; equal scores
/// rank the lower candidate index first.
pub fn recall_at_k(sim: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = check_similarity(sim)?;
    ensure_arg!((1..=n).contains(&k), "k must be in 1..={n}, got {k}");
    let hits = (0..n)
        .filter(|&i| {
            let d = sim[i][i];
            let rank = (0..n).filter(|&j| sim[i][j] > d || (sim[i][j] == d && j < i)).count();
            rank < k
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Paired vectors `(x_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl PairedSamples {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        ensure_arg!(!x.is_empty() && x.len() == y.len(), "need equally many x and y samples");
        let (dx, dy) = (x[0].len(), y[0].len());
        ensure_arg!(dx >= 1 && dy >= 1, "sample vectors must be non-empty");
        ensure_arg!(x.iter().all(|v| v.len() == dx), "x samples differ in dimension");
        ensure_arg!(y.iter().all(|v| v.len() == dy), "y samples differ in dimension");
        ensure_arg!(
            x.iter().chain(&y).flatten().all(|v| v.is_finite()),
            "samples contain non-finite values"
        );
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn y_dim(&self) -> usize {
        self.y[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClubEstimate {
    pub nats: f64,
    /// Output dimensions whose residual variance was raised to [`CLUB_VARIANCE_FLOOR`].
    pub floored_dims: usize,
    pub diagnostic: Option<String>,
}

/// CLUB upper-bound estimate with `q(y|x) = N(y; A x + b, diag(s^2))` fitted by least squares.
///
/// The mean over all `n^2` cross pairs is evaluated in closed form from first and second
/// moments, so the cost is linear in `n`.
pub fn club_mi(samples: &PairedSamples) -> Result<ClubEstimate> {
    let (n, dx, dy) = (samples.len(), samples.x_dim(), samples.y_dim());
    ensure_arg!(n >= 10 * (dx + 1), "CLUB needs n >= 10 (dim_x + 1) = {} samples, got {n}", 10 * (dx + 1));
    let design = DMatrix::from_fn(n, dx + 1, |i, j| if j == 0 { 1.0 } else { samples.x[i][j - 1] });
    let targets = DMatrix::from_fn(n, dy, |i, j| samples.y[i][j]);
    let gram = design.transpose() * &design;
    let moment = design.transpose() * &targets;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&moment),
        None => gram
            .svd(true, true)
            .solve(&moment, 1e-12)
            .map_err(|e| crate::Error::Fitting(format!("least-squares fit failed: {e}")))?,
    };
    let means = &design * coef;

    let nf = n as f64;
    let mut nats = 0.0;
    let mut floored = 0;
    for d in 0..dy {
        let mut var = (0..n).map(|i| (targets[(i, d)] - means[(i, d)]).powi(2)).sum::<f64>() / nf;
        if var < CLUB_VARIANCE_FLOOR {
            var = CLUB_VARIANCE_FLOOR;
            floored += 1;
        }
        let (mut sy, mut syy, mut sm, mut smm, mut paired) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (y, m) = (targets[(i, d)], means[(i, d)]);
            sy += y;
            syy += y * y;
            sm += m;
            smm += m * m;
            paired += (y - m).powi(2);
        }
        // (1/n^2) sum_i sum_j (y_j - m_i)^2
        let cross = syy / nf - 2.0 * (sy / nf) * (sm / nf) + smm / nf;
        nats += 0.5 * (cross - paired / nf) / var;
    }
    let diagnostic = (floored > 0).then(|| {
        format!(
            "residual variance floored at {CLUB_VARIANCE_FLOOR:e} in {floored} of {dy} dimensions; y is (nearly) a deterministic function of x"
        )
    });
    Ok(ClubEstimate {
        nats,
        floored_dims: floored,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> PairedSamples {
        let mut rng = crate::rng::stream(seed, 0);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x.push(vec![a]);
            y.push(vec![rho * a + (1.0 - rho * rho).sqrt() * b]);
        }
        PairedSamples::new(x, y).unwrap()
    }

    #[test]
    fn info_nce_reference_values() {
        let uniform = vec![vec![0.3; 5]; 5];
        assert_abs_diff_eq!(info_nce(&uniform, 0.7).unwrap(), 5f64.ln(), epsilon = 1e-12);
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(info_nce(&eye, 1.0).unwrap(), -(e / (e + 1.0)).ln(), epsilon = 1e-12);
        let strong: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| if i == j { 50.0 } else { 0.0 }).collect()).collect();
        assert!(info_nce(&strong, 1.0).unwrap() < 1e-3);
        assert!(info_nce(&eye, 0.0).is_err());
    }

    #[test]
    fn ranking_loss_hand_value() {
        // (0,1): max(0, .2-.5+.9) + max(0, .2-.6+.9) = 1.1; (1,0): both hinges inactive
        let sim = vec![vec![0.5, 0.9], vec![0.1, 0.6]];
        assert_abs_diff_eq!(contrastive_ranking_loss(&sim, 0.2).unwrap(), 0.55, epsilon = 1e-12);
        let separated = vec![vec![1.0, 0.1], vec![0.2, 1.0]];
        assert_eq!(contrastive_ranking_loss(&separated, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ranking_loss_scales_on_active_set() {
        let sim = vec![vec![0.5, 0.9, 0.7], vec![0.1, 0.6, 0.8], vec![0.65, 0.2, 0.4]];
        let scaled: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|v| 3.0 * v).collect()).collect();
        assert_abs_diff_eq!(
            contrastive_ranking_loss(&scaled, 0.0).unwrap(),
            3.0 * contrastive_ranking_loss(&sim, 0.0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn recall_hand_case() {
        let sim = vec![
            vec![0.9, 0.1, 0.2, 0.3],
            vec![0.8, 0.5, 0.1, 0.0],
            vec![0.9, 0.8, 0.1, 0.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ];
        assert_eq!(recall_at_k(&sim, 1).unwrap(), 50.0);
        assert_eq!(recall_at_k(&sim, 2).unwrap(), 75.0);
        assert_eq!(recall_at_k(&sim, 4).unwrap(), 100.0);
        assert!(recall_at_k(&sim, 0).is_err());
        // tie with an earlier candidate loses
        assert_eq!(recall_at_k(&[vec![1.0, 1.0], vec![1.0, 1.0]], 1).unwrap(), 50.0);
    }

    #[test]
    fn club_gaussian_cases() {
        let correlated = club_mi(&gaussian_pairs(10_000, 0.9, 1)).unwrap();
        assert!(correlated.nats >= -0.5 * (1.0f64 - 0.81).ln() - 0.05, "{correlated:?}");
        let independent = club_mi(&gaussian_pairs(10_000, 0.0, 2)).unwrap();
        assert!(independent.nats.abs() < 0.05, "{independent:?}");
        assert!(independent.diagnostic.is_none());
    }

    #[test]
    fn club_degenerate_dependence_is_flagged() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 10.0]).collect();
        let est = club_mi(&PairedSamples::new(x.clone(), x).unwrap()).unwrap();
        assert!(est.nats.is_finite() && est.nats > 1e6);
        assert_eq!(est.floored_dims, 1);
        assert!(est.diagnostic.is_some());
    }

    #[test]
    fn club_requires_enough_samples() {
        let x = vec![vec![0.0]; 19];
        assert!(club_mi(&PairedSamples::new(x.clone(), x).unwrap()).is_err());
    }

    fn square(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, n), n)
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_rank_invariant(sim in square(6)) {
            let mut last = 0.0;
            for k in 1..=6 {
                let r = recall_at_k(&sim, k).unwrap();
                prop_assert!(r >= last);
                let warped: Vec<Vec<f64>> = sim.iter().map(|row| row.iter().map(|v| v.exp() * 2.0 + 1.0).collect()).collect();
                prop_assert_eq!(r, recall_at_k(&warped, k).unwrap());
                last = r;
            }
            prop_assert_eq!(last, 100.0);
        }

        #[test]
        fn losses_are_permutation_equivariant(sim in square(5), perm in Just(vec![3usize, 0, 4, 1, 2])) {
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| sim[i][j]).collect()).collect();
            prop_assert!((info_nce(&sim, 0.5).unwrap() - info_nce(&permuted, 0.5).unwrap()).abs() < 1e-12);
            prop_assert!(info_nce(&sim, 0.5).unwrap() >= 0.0);
            prop_assert!(
                (contrastive_ranking_loss(&sim, 0.3).unwrap() - contrastive_ranking_loss(&permuted, 0.3).unwrap()).abs() < 1e-12
            );
        }
    }
}
