//! Objective evaluation metrics: mel-cepstral distortion, SSIM and the pitch-error family.
//!
//! Inputs are frame-aligned; mismatched lengths are rejected rather than warped.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

/// Default number of cepstral coefficients per frame.
pub const DEFAULT_CEPSTRA: usize = 24;
/// Relative F0 deviation above which a both-voiced frame counts as a gross pitch error.
pub const DEFAULT_GPE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_SSIM_WINDOW: usize = 7;

/// Factor converting the unscaled distance to the conventional dB value.
pub const MCD_DB_FACTOR: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

fn check_matrix(name: &str, m: &[Vec<f64>]) -> Result<usize> {
    ensure_arg!(!m.is_empty(), "{name} has no rows");
    let cols = m[0].len();
    ensure_arg!(cols >= 1, "{name} has no columns");
    ensure_arg!(m.iter().all(|r| r.len() == cols), "{name} has ragged rows");
    ensure_arg!(m.iter().flatten().all(|v| v.is_finite()), "{name} has non-finite values");
    Ok(cols)
}

fn check_same_shape(reference: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<usize> {
    let cols = check_matrix("reference", reference)?;
    let other = check_matrix("synthesized", synth)?;
    ensure_arg!(
        reference.len() == synth.len() && cols == other,
        "shape mismatch: {}x{cols} vs {}x{other}",
        reference.len(),
        synth.len()
    );
    Ok(cols)
}

/// Mel-cepstral distortion: mean over frames of the Euclidean distance between cepstra.
///
/// With `db_scale` the result is multiplied by [`MCD_DB_FACTOR`].
pub fn mcd(reference: &[Vec<f64>], synth: &[Vec<f64>], db_scale: bool) -> Result<f64> {
    check_same_shape(reference, synth)?;
    let total: f64 = reference
        .iter()
        .zip(synth)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    let value = total / reference.len() as f64;
    Ok(if db_scale { value * MCD_DB_FACTOR } else { value })
}

/// Stabilizing constants of the SSIM ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    /// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with `L` the value range of `reference`.
    pub fn for_reference(reference: &[Vec<f64>]) -> Self {
        let (lo, hi) = reference
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = if hi > lo { hi - lo } else { 0.0 };
        Self {
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Mean structural similarity over all `window x window` patches.
///
/// Patch statistics use population (co)variances. A luminance or contrast-structure term
/// whose denominator vanishes (both patches zero-mean, or both flat, with zero constants)
/// counts as 1.
pub fn ssim(a: &[Vec<f64>], b: &[Vec<f64>], window: usize, constants: SsimConstants) -> Result<f64> {
    let cols = check_same_shape(a, b)?;
    let rows = a.len();
    ensure_arg!(window >= 1, "window must be >= 1");
    ensure_arg!(
        window <= rows && window <= cols,
        "window {window} exceeds matrix dimensions {rows}x{cols}"
    );
    ensure_arg!(constants.c1 >= 0.0 && constants.c2 >= 0.0, "SSIM constants must be >= 0");
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - window {
        for c0 in 0..=cols - window {
            let patch = || (r0..r0 + window).flat_map(move |r| (c0..c0 + window).map(move |c| (a[r][c], b[r][c])));
            let (mut sa, mut sb) = (0.0, 0.0);
            for (x, y) in patch() {
                sa += x;
                sb += y;
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (x, y) in patch() {
                va += (x - ma).powi(2);
                vb += (y - mb).powi(2);
                cov += (x - ma) * (y - mb);
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let luminance = ratio(2.0 * ma * mb + constants.c1, ma * ma + mb * mb + constants.c1);
            let structure = ratio(2.0 * cov + constants.c2, va + vb + constants.c2);
            total += luminance * structure;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-frame F0 (Hz) and voicing decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    f0: Vec<f64>,
    voiced: Vec<bool>,
}

impl PitchTrack {
    pub fn new(f0: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        ensure_arg!(f0.len() == voiced.len(), "f0 and voicing lengths differ");
        for (i, (&f, &v)) in f0.iter().zip(&voiced).enumerate() {
            ensure_arg!(f.is_finite() && f >= 0.0, "frame {i}: f0 must be finite and >= 0, got {f}");
            ensure_arg!(!v || f > 0.0, "frame {i}: voiced frame needs f0 > 0");
        }
        Ok(Self { f0, voiced })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }
}

/// Pitch error rates; `gpe` is `None` when no frame is voiced in both tracks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchErrors {
    pub gpe: Option<f64>,
    pub vde: f64,
    pub ffe: f64,
    /// Fraction of frames voiced in both tracks.
    pub both_voiced: f64,
}

pub fn pitch_errors(reference: &PitchTrack, synth: &PitchTrack, gpe_threshold: f64) -> Result<PitchErrors> {
    ensure_arg!(!reference.is_empty(), "pitch tracks are empty");
    ensure_arg!(
        reference.len() == synth.len(),
        "track lengths differ: {} vs {}",
        reference.len(),
        synth.len()
    );
    ensure_arg!(gpe_threshold >= 0.0, "GPE threshold must be >= 0");
    let (mut mismatched, mut both, mut gross) = (0usize, 0usize, 0usize);
    for i in 0..reference.len() {
        match (reference.voiced[i], synth.voiced[i]) {
            (true, true) => {
                both += 1;
                let rel = (synth.f0[i] - reference.f0[i]).abs() / reference.f0[i];
                if rel > gpe_threshold {
                    gross += 1;
                }
            }
            (false, false) => {}
            _ => mismatched += 1,
        }
    }
    let n = reference.len() as f64;
    Ok(PitchErrors {
        gpe: (both > 0).then(|| gross as f64 / both as f64),
        vde: mismatched as f64 / n,
        ffe: (gross + mismatched) as f64 / n,
        both_voiced: both as f64 / n,
    })
}
