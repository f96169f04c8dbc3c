//! Classifier-free guidance.
//!
//! With `lambda` the guidance scale, the guided distribution is proportional to
//! `p_uncond * (p_cond / p_uncond)^(lambda + 1)`, i.e. the log-space rule
//! `log p_uncond + (lambda + 1) (log p_cond - log p_uncond)` followed by renormalization.
//! The probability-space rule `p_uncond + (lambda + 1) (p_cond - p_uncond)` can go negative;
//! negative masses are clamped to zero before renormalizing.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::transitions::CategoricalDist;

/// Floor applied to unconditional probabilities when `lambda > 0`, where a zero would give an
/// infinite guided weight.
pub const UNCOND_LOG_FLOOR: f64 = -69.07755278982137; // ln(1e-30)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    #[default]
    Log,
    Probability,
}

impl std::str::FromStr for GuidanceMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(GuidanceMode::Log),
            "prob" | "probability" => Ok(GuidanceMode::Probability),
            other => Err(crate::Error::Argument(format!("unknown guidance mode `{other}`"))),
        }
    }
}

/// Guidance scale and combination rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Guidance {
    pub scale: f64,
    pub mode: GuidanceMode,
}

impl Guidance {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn new(scale: f64, mode: GuidanceMode) -> Result<Self> {
        ensure_arg!(scale.is_finite() && scale >= -1.0, "guidance scale must be >= -1, got {scale}");
        Ok(Self { scale, mode })
    }

    pub fn is_active(&self) -> bool {
        self.scale != 0.0
    }
}

/// Combine conditional and unconditional log-probabilities.
pub fn cfg_combine(log_p_cond: &[f64], log_p_uncond: &[f64], lambda: f64, mode: GuidanceMode) -> Result<CategoricalDist> {
    ensure_arg!(lambda.is_finite() && lambda >= -1.0, "guidance scale must be >= -1, got {lambda}");
    ensure_arg!(
        log_p_cond.len() == log_p_uncond.len() && !log_p_cond.is_empty(),
        "conditional and unconditional vectors must be non-empty and equally long"
    );
    match mode {
        GuidanceMode::Log => {
            let weights: Vec<f64> = log_p_cond
                .iter()
                .zip(log_p_uncond)
                .map(|(&lc, &lu)| {
                    let cond_term = if lambda == -1.0 { 0.0 } else { (lambda + 1.0) * lc };
                    let uncond_term = if lambda == 0.0 {
                        0.0
                    } else if lambda > 0.0 {
                        -lambda * lu.max(UNCOND_LOG_FLOOR)
                    } else {
                        -lambda * lu
                    };
                    cond_term + uncond_term
                })
                .collect();
            CategoricalDist::from_log_weights(&weights)
        }
        GuidanceMode::Probability => {
            let weights: Vec<f64> = log_p_cond
                .iter()
                .zip(log_p_uncond)
                .map(|(&lc, &lu)| {
                    let (pc, pu) = (lc.exp(), lu.exp());
                    (pu + (lambda + 1.0) * (pc - pu)).max(0.0)
                })
                .collect();
            CategoricalDist::from_weights(weights)
        }
    }
}

/// [`cfg_combine`] on probability vectors.
pub fn cfg_combine_probs(p_cond: &[f64], p_uncond: &[f64], guidance: Guidance) -> Result<CategoricalDist> {
    let lc: Vec<f64> = p_cond.iter().map(|p| p.ln()).collect();
    let lu: Vec<f64> = p_uncond.iter().map(|p| p.ln()).collect();
    cfg_combine(&lc, &lu, guidance.scale, guidance.mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn logs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn hand_computed_two_class_case() {
        let out = cfg_combine(&logs(&[0.8, 0.2]), &logs(&[0.5, 0.5]), 1.0, GuidanceMode::Log).unwrap();
        let a = 0.8f64.powi(2) / 0.5;
        let b = 0.2f64.powi(2) / 0.5;
        assert_abs_diff_eq!(out.probs()[0], a / (a + b), epsilon = 1e-12);
        assert_abs_diff_eq!(out.probs()[0], 0.941, epsilon = 1e-3);
        assert_abs_diff_eq!(out.probs()[1], 0.059, epsilon = 1e-3);
    }

    #[test]
    fn probability_mode_clamps_negative_mass() {
        // 0.5 + 3 * (0.1 - 0.5) < 0
        let out = cfg_combine(&logs(&[0.1, 0.9]), &logs(&[0.5, 0.5]), 2.0, GuidanceMode::Probability).unwrap();
        assert_eq!(out.probs()[0], 0.0);
        assert_abs_diff_eq!(out.probs()[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_scale_below_minus_one() {
        assert!(cfg_combine(&logs(&[0.5, 0.5]), &logs(&[0.5, 0.5]), -1.5, GuidanceMode::Log).is_err());
    }

    #[test]
    fn minus_one_returns_unconditional() {
        let out = cfg_combine(&logs(&[0.9, 0.1]), &logs(&[0.3, 0.7]), -1.0, GuidanceMode::Log).unwrap();
        assert_abs_diff_eq!(out.probs()[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn zero_unconditional_mass_stays_finite() {
        let out = cfg_combine(&logs(&[0.5, 0.5]), &logs(&[0.0, 1.0]), 2.0, GuidanceMode::Log).unwrap();
        assert!(out.probs().iter().all(|p| p.is_finite()));
        assert!(out.probs()[0] > 0.99);
    }

    proptest! {
        #[test]
        fn neutral_cases_are_identities(
            raw_c in proptest::collection::vec(0.01f64..1.0, 2..10),
            raw_u in proptest::collection::vec(0.01f64..1.0, 2..10),
            lambda in -1.0f64..8.0,
        ) {
            let n = raw_c.len().min(raw_u.len());
            let norm = |v: &[f64]| { let s: f64 = v[..n].iter().sum(); v[..n].iter().map(|x| x / s).collect::<Vec<_>>() };
            let (pc, pu) = (norm(&raw_c), norm(&raw_u));
            for mode in [GuidanceMode::Log, GuidanceMode::Probability] {
                let off = cfg_combine(&logs(&pc), &logs(&pu), 0.0, mode).unwrap();
                for (a, b) in off.probs().iter().zip(&pc) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
                let same = cfg_combine(&logs(&pc), &logs(&pc), lambda, mode).unwrap();
                for (a, b) in same.probs().iter().zip(&pc) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
