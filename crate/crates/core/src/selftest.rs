//! Brute-force oracle suites at fixed small sizes, runnable from the CLI.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::diffusion::{bayes_oracle_denoiser, sample_chains, Condition, GridShape, Guidance, WeightedGrid};
use crate::error::{ensure_arg, Result};
use crate::rng;
use crate::schedules::{linear_schedule, Layout, Schedule, ScheduleTable};
use crate::transitions::{brute_force_cumulative, marginal_xt_given_x0, true_posterior, ORACLE_MAX_CLASSES};

/// Agreement tolerance for the matrix-product oracles.
pub const ORACLE_TOL: f64 = 1e-12;
/// Total-variation threshold for end-to-end recovery.
pub const RECOVERY_TV_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed deviation (absolute error, or TV for recovery).
    pub max_error: f64,
    pub threshold: f64,
}

impl std::fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} cases, max error {:.3e} (threshold {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.threshold
        )
    }
}

/// Random valid schedule with per-step `alpha` and `gamma` drawn so every step keeps some
/// uniform mass.
pub fn random_schedule<R: Rng + ?Sized>(num_classes: usize, steps: usize, rng: &mut R) -> Result<ScheduleTable> {
    let stepwise: Vec<(f64, f64)> = (0..steps)
        .map(|_| {
            let a: f64 = rng.random_range(0.3..0.99);
            let g: f64 = rng.random_range(0.0..(1.0 - a));
            (a, g)
        })
        .collect();
    ScheduleTable::from_stepwise(num_classes, &stepwise)
}

/// Largest deviation between the closed-form marginal and the explicit matrix product over
/// every `(x0, t)`, with the number of comparisons.
pub fn marginal_error(table: &ScheduleTable) -> Result<(f64, usize)> {
    let k = table.num_classes();
    let (mut worst, mut cases) = (0.0f64, 0);
    for t in 0..=table.steps() {
        let product = brute_force_cumulative(t, table)?;
        worst = worst.max(product.max_column_defect());
        for x0 in 0..k {
            let closed = marginal_xt_given_x0(x0, t, table)?;
            for (xt, p) in closed.probs().iter().enumerate() {
                worst = worst.max((p - product.get(xt, x0)).abs());
            }
            cases += 1;
        }
    }
    Ok((worst, cases))
}

/// Largest deviation between the closed-form posterior and Bayes' rule applied to explicit
/// one-step and cumulative matrices, over every reachable `(x0, x_t, t)`.
pub fn posterior_error(table: &ScheduleTable) -> Result<(f64, usize)> {
    let k = table.num_classes();
    let (mut worst, mut cases) = (0.0f64, 0);
    for t in 1..=table.steps() {
        let before = brute_force_cumulative(t - 1, table)?;
        let step = brute_force_cumulative(t, table)?;
        let c = table.stepwise(t);
        let one = crate::transitions::build_transition_matrix(c.alpha, c.beta, c.gamma, k)?;
        for x0 in 0..k {
            for xt in 0..=k {
                if step.get(xt, x0) == 0.0 {
                    continue;
                }
                let joint: Vec<f64> = (0..=k).map(|prev| one.get(xt, prev) * before.get(prev, x0)).collect();
                let total: f64 = joint.iter().sum();
                let closed = true_posterior(xt, x0, t, table)?;
                worst = worst.max((closed.probs().iter().sum::<f64>() - 1.0).abs());
                for (p, j) in closed.probs().iter().zip(&joint) {
                    worst = worst.max((p - j / total).abs());
                }
                cases += 1;
            }
        }
    }
    Ok((worst, cases))
}

/// Closed-form marginals against matrix products for `count` random schedules with
/// `K` in `classes` and `T` in `steps`.
pub fn transitions_suite(
    classes: std::ops::RangeInclusive<usize>,
    steps: std::ops::RangeInclusive<usize>,
    count: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    ensure_arg!(*classes.start() >= 2 && *classes.end() <= ORACLE_MAX_CLASSES, "K range must lie in 2..={ORACLE_MAX_CLASSES}");
    ensure_arg!(*steps.start() >= 1, "T range must start at >= 1");
    let mut rng = rng::stream(seed, 0);
    let (mut worst, mut cases) = (0.0f64, 0);
    for _ in 0..count {
        let k = rng.random_range(classes.clone());
        let t = rng.random_range(steps.clone());
        let (e, n) = marginal_error(&random_schedule(k, t, &mut rng)?)?;
        worst = worst.max(e);
        cases += n;
    }
    Ok(SuiteOutcome {
        name: "transitions",
        passed: worst <= ORACLE_TOL,
        cases,
        max_error: worst,
        threshold: ORACLE_TOL,
    })
}

/// Exhaustive posterior check on every `K <= max_classes`, `T <= max_steps` (one random and
/// one linear schedule each).
pub fn posterior_suite(max_classes: usize, max_steps: usize, seed: u64) -> Result<SuiteOutcome> {
    ensure_arg!((2..=ORACLE_MAX_CLASSES).contains(&max_classes), "K must be in 2..={ORACLE_MAX_CLASSES}");
    let mut rng = rng::stream(seed, 1);
    let (mut worst, mut cases) = (0.0f64, 0);
    for k in 2..=max_classes {
        for t in 1..=max_steps {
            for table in [random_schedule(k, t, &mut rng)?, linear_schedule(t, k)?] {
                let (e, n) = posterior_error(&table)?;
                worst = worst.max(e);
                cases += n;
            }
        }
    }
    Ok(SuiteOutcome {
        name: "posterior",
        passed: worst <= ORACLE_TOL,
        cases,
        max_error: worst,
        threshold: ORACLE_TOL,
    })
}

/// The fixed toy distribution used by the recovery suite: `K = 4`, one codebook, three frames.
pub fn toy_distribution() -> (GridShape, Vec<WeightedGrid>) {
    let shape = GridShape::new(4, 1, 3, Layout::Concatenated).expect("valid toy shape");
    let points: [([u32; 3], f64); 6] = [
        ([0, 1, 2], 0.30),
        ([0, 1, 3], 0.20),
        ([1, 1, 2], 0.15),
        ([2, 3, 3], 0.15),
        ([3, 0, 0], 0.12),
        ([1, 2, 0], 0.08),
    ];
    let support = points
        .iter()
        .map(|(tokens, weight)| WeightedGrid {
            tokens: tokens.to_vec(),
            label: Condition::Null,
            weight: *weight,
        })
        .collect();
    (shape, support)
}

/// Total-variation distance between sample frequencies and a weighted support.
pub fn empirical_tv(samples: &[Vec<u32>], support: &[WeightedGrid]) -> f64 {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_default() += 1;
    }
    let n = samples.len() as f64;
    let total: f64 = support.iter().map(|w| w.weight).sum();
    let mut tv = 0.0;
    for w in support {
        let seen = counts.remove(w.tokens.as_slice()).unwrap_or(0) as f64 / n;
        tv += (seen - w.weight / total).abs();
    }
    tv += counts.values().map(|&c| c as f64 / n).sum::<f64>();
    0.5 * tv
}

/// Sample the toy distribution through the exact-Bayes denoiser (linear schedule, `T = 10`)
/// and compare the sample frequencies with the true distribution.
pub fn recovery_suite(samples: usize, seed: u64) -> Result<SuiteOutcome> {
    let (shape, support) = toy_distribution();
    let schedule: Schedule = linear_schedule(10, shape.num_classes)?.into();
    let oracle = bayes_oracle_denoiser(shape, support.clone(), &schedule)?;
    let grids = sample_chains(&oracle, Condition::Null, &schedule, shape, 1, Guidance::off(), seed, samples)?;
    let tokens: Vec<Vec<u32>> = grids.iter().map(|g| g.tokens().to_vec()).collect();
    let tv = empirical_tv(&tokens, &support);
    Ok(SuiteOutcome {
        name: "bayes-recovery",
        passed: tv < RECOVERY_TV_TOL,
        cases: samples,
        max_error: tv,
        threshold: RECOVERY_TV_TOL,
    })
}

/// All suites at their default sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        transitions_suite(2..=5, 2..=8, 50, seed)?,
        posterior_suite(4, 6, seed)?,
        recovery_suite(20_000, seed)?,
    ])
}
