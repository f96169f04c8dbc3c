//! Mask+uniform noise schedules.
//!
//! A schedule stores, for every step `t` in `0..=T`, the cumulative coefficients of the
//! forward marginal `q(x_t | x_0)`:
//!
//! - `alpha_bar[t]`: probability the original token survives,
//! - `beta_bar[t]`: probability of landing on any *particular* non-mask token by uniform
//!   resampling (total uniform mass is `K * beta_bar[t]`),
//! - `gamma_bar[t]`: probability of being masked.
//!
//! The per-step coefficients `alpha[t]`, `beta[t]`, `gamma[t]` that define the one-step
//! transition matrix are derived from the cumulatives by inverting the products
//! `alpha_bar[t] = alpha_bar[t-1] * alpha[t]` and
//! `1 - gamma_bar[t] = (1 - gamma_bar[t-1]) * (1 - gamma[t])`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

/// Tolerance used for every schedule invariant.
pub const SCHEDULE_TOL: f64 = 1e-12;

/// How a multi-codebook grid is flattened into a single token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// All frames of layer 0, then all frames of layer 1, ...
    #[default]
    Concatenated,
    /// Frame 0 of every layer, then frame 1 of every layer, ...
    Interleaved,
}

impl Layout {
    /// Layer (codebook index) owning flattened position `position`.
    pub fn layer_of(self, position: usize, num_layers: usize, frames: usize) -> usize {
        match self {
            Layout::Concatenated => position / frames,
            Layout::Interleaved => position % num_layers,
        }
    }

    /// Flattened position of (`layer`, `frame`).
    pub fn position(self, layer: usize, frame: usize, num_layers: usize, frames: usize) -> usize {
        match self {
            Layout::Concatenated => layer * frames + frame,
            Layout::Interleaved => frame * num_layers + layer,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Concatenated => "concatenated",
            Layout::Interleaved => "interleaved",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concatenated" => Ok(Layout::Concatenated),
            "interleaved" => Ok(Layout::Interleaved),
            other => Err(Error::Argument(format!("unknown layout `{other}`"))),
        }
    }
}

/// Cumulative and stepwise coefficients of a single (position-independent) schedule.
///
/// Stepwise vectors are indexed by `t` as well; entry 0 holds the identity step
/// `(alpha, beta, gamma) = (1, 0, 0)` so that indices line up with the cumulatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    num_classes: usize,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

/// One-step (or multi-step) mask+uniform kernel coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScheduleTable {
    /// Build a table from cumulative coefficients, validating every invariant and deriving the
    /// stepwise coefficients.
    pub fn from_cumulative(
        num_classes: usize,
        alpha_bar: Vec<f64>,
        beta_bar: Vec<f64>,
        gamma_bar: Vec<f64>,
    ) -> Result<Self> {
        ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
        ensure_arg!(
            alpha_bar.len() >= 2 && alpha_bar.len() == beta_bar.len() && alpha_bar.len() == gamma_bar.len(),
            "cumulative arrays must share a length of at least 2 (T >= 1)"
        );
        validate_cumulative(num_classes, &alpha_bar, &beta_bar, &gamma_bar)?;
        let (alpha, beta, gamma) = stepwise_from_cumulative(num_classes, &alpha_bar, &gamma_bar)?;
        Ok(Self {
            num_classes,
            alpha_bar,
            beta_bar,
            gamma_bar,
            alpha,
            beta,
            gamma,
        })
    }

    /// Build a table from per-step `(alpha[t], gamma[t])` for `t = 1..=T`; `beta[t]` follows
    /// from the simplex constraint.
    pub fn from_stepwise(num_classes: usize, steps: &[(f64, f64)]) -> Result<Self> {
        ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
        ensure_arg!(!steps.is_empty(), "at least one step is required");
        let k = num_classes as f64;
        let mut alpha_bar = vec![1.0];
        let mut gamma_bar = vec![0.0];
        let mut beta_bar = vec![0.0];
        for (i, &(a, g)) in steps.iter().enumerate() {
            ensure_arg!(
                (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&g) && a + g <= 1.0 + SCHEDULE_TOL,
                "step {} has invalid coefficients alpha={a}, gamma={g}",
                i + 1
            );
            let ab = alpha_bar[i] * a;
            let survive = (1.0 - gamma_bar[i]) * (1.0 - g);
            let gb = 1.0 - survive;
            alpha_bar.push(ab);
            gamma_bar.push(gb);
            beta_bar.push(((1.0 - ab - gb) / k).max(0.0));
        }
        Self::from_cumulative(num_classes, alpha_bar, beta_bar, gamma_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_bar(&self) -> &[f64] {
        &self.beta_bar
    }

    pub fn gamma_bar(&self) -> &[f64] {
        &self.gamma_bar
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Cumulative coefficients at step `t`.
    pub fn cumulative(&self, t: usize) -> StepCoefficients {
        StepCoefficients {
            alpha: self.alpha_bar[t],
            beta: self.beta_bar[t],
            gamma: self.gamma_bar[t],
        }
    }

    /// Coefficients of the one-step kernel `Q_t`.
    pub fn stepwise(&self, t: usize) -> StepCoefficients {
        StepCoefficients {
            alpha: self.alpha[t],
            beta: self.beta[t],
            gamma: self.gamma[t],
        }
    }

    /// Coefficients of the composite kernel `Q_t Q_{t-1} ... Q_{s+1}` taking `x_s` to `x_t`.
    ///
    /// The composition of mask+uniform kernels is again mask+uniform; for `s = t - 1` this is
    /// exactly [`ScheduleTable::stepwise`].
    pub fn transition_between(&self, s: usize, t: usize) -> StepCoefficients {
        debug_assert!(s < t && t <= self.steps());
        if s + 1 == t {
            return self.stepwise(t);
        }
        let (alpha, gamma) = step_quotients(
            self.alpha_bar[s],
            self.alpha_bar[t],
            self.gamma_bar[s],
            self.gamma_bar[t],
        );
        let beta = ((1.0 - alpha - gamma) / self.num_classes as f64).max(0.0);
        StepCoefficients { alpha, beta, gamma }
    }
}

/// Check the simplex, range, boundary and monotonicity invariants of cumulative arrays.
fn validate_cumulative(k: usize, alpha_bar: &[f64], beta_bar: &[f64], gamma_bar: &[f64]) -> Result<()> {
    let kf = k as f64;
    if alpha_bar[0] != 1.0 || gamma_bar[0] != 0.0 || beta_bar[0] != 0.0 {
        return Err(Error::Schedule(
            "step 0 must be the identity (alpha_bar=1, beta_bar=0, gamma_bar=0)".into(),
        ));
    }
    for t in 0..alpha_bar.len() {
        let (a, b, g) = (alpha_bar[t], beta_bar[t], gamma_bar[t]);
        let in_range = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(in_range(a) && in_range(b) && in_range(g)) {
            return Err(Error::Schedule(format!(
                "t={t}: coefficients out of [0,1]: alpha_bar={a}, beta_bar={b}, gamma_bar={g}"
            )));
        }
        let total = a + kf * b + g;
        if (total - 1.0).abs() > SCHEDULE_TOL {
            return Err(Error::Schedule(format!(
                "t={t}: alpha_bar + K*beta_bar + gamma_bar = {total}, expected 1"
            )));
        }
        if t > 0 {
            if a > alpha_bar[t - 1] + SCHEDULE_TOL {
                return Err(Error::Schedule(format!("alpha_bar increases at t={t}")));
            }
            if g < gamma_bar[t - 1] - SCHEDULE_TOL {
                return Err(Error::Schedule(format!("gamma_bar decreases at t={t}")));
            }
        }
    }
    Ok(())
}

fn step_quotients(alpha_prev: f64, alpha_cur: f64, gamma_prev: f64, gamma_cur: f64) -> (f64, f64) {
    let alpha = if alpha_prev > 0.0 {
        (alpha_cur / alpha_prev).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let survive_prev = 1.0 - gamma_prev;
    let gamma = if survive_prev > 0.0 {
        (1.0 - (1.0 - gamma_cur) / survive_prev).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (alpha, gamma)
}

/// Invert the cumulative products into per-step coefficients.
///
/// Returns `(alpha, beta, gamma)`, each of length `T + 1` with the identity step at index 0.
/// Steps following a fully absorbed or fully decayed cumulative take `alpha[t] = 0` /
/// `gamma[t] = 1`.
pub fn stepwise_from_cumulative(
    num_classes: usize,
    alpha_bar: &[f64],
    gamma_bar: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
    ensure_arg!(
        alpha_bar.len() == gamma_bar.len() && !alpha_bar.is_empty(),
        "cumulative arrays must be non-empty and equally long"
    );
    let kf = num_classes as f64;
    let mut alpha = vec![1.0];
    let mut beta = vec![0.0];
    let mut gamma = vec![0.0];
    for t in 1..alpha_bar.len() {
        if alpha_bar[t] > alpha_bar[t - 1] + SCHEDULE_TOL || gamma_bar[t] < gamma_bar[t - 1] - SCHEDULE_TOL {
            return Err(Error::Schedule(format!("cumulatives are not monotone at t={t}")));
        }
        if alpha_bar[t - 1] <= 0.0 && alpha_bar[t] > SCHEDULE_TOL {
            return Err(Error::Schedule(format!("alpha_bar revives after reaching 0 at t={t}")));
        }
        let (a, g) = step_quotients(alpha_bar[t - 1], alpha_bar[t], gamma_bar[t - 1], gamma_bar[t]);
        let uniform = 1.0 - a - g;
        if uniform < -SCHEDULE_TOL {
            return Err(Error::Schedule(format!(
                "t={t}: stepwise uniform mass {uniform} is negative; cumulatives are not reachable"
            )));
        }
        alpha.push(a);
        gamma.push(g);
        beta.push(uniform.max(0.0) / kf);
    }
    Ok((alpha, beta, gamma))
}

/// The linear schedule: `gamma_bar` rises to 0.9, the total uniform mass `K * beta_bar` rises
/// to 0.1 and `alpha_bar` falls from 1 to 0 over `T` steps.
pub fn linear_schedule(steps: usize, num_classes: usize) -> Result<ScheduleTable> {
    linear_schedule_with_endpoints(steps, num_classes, 0.9, 0.1)
}

/// Linear schedule with custom terminal mask mass and total uniform mass (summing to 1).
pub fn linear_schedule_with_endpoints(
    steps: usize,
    num_classes: usize,
    final_mask: f64,
    final_uniform: f64,
) -> Result<ScheduleTable> {
    ensure_arg!(steps >= 1, "step count T must be >= 1, got {steps}");
    ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
    ensure_arg!(
        final_mask >= 0.0 && final_uniform >= 0.0 && (final_mask + final_uniform - 1.0).abs() <= SCHEDULE_TOL,
        "terminal mask and uniform mass must be nonnegative and sum to 1"
    );
    let kf = num_classes as f64;
    let tf = steps as f64;
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    let mut beta_bar = Vec::with_capacity(steps + 1);
    let mut gamma_bar = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let frac = t as f64 / tf;
        alpha_bar.push(1.0 - frac);
        gamma_bar.push(final_mask * frac);
        beta_bar.push(final_uniform * frac / kf);
    }
    ScheduleTable::from_cumulative(num_classes, alpha_bar, beta_bar, gamma_bar)
}

/// Per-layer schedule used for multi-codebook grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalScheduleTable {
    layers: Vec<ScheduleTable>,
    layout: Layout,
    frames: usize,
}

impl PositionalScheduleTable {
    pub fn new(layers: Vec<ScheduleTable>, layout: Layout, frames: usize) -> Result<Self> {
        ensure_arg!(!layers.is_empty(), "at least one layer is required");
        ensure_arg!(frames >= 1, "frames per layer L must be >= 1");
        let (t, k) = (layers[0].steps(), layers[0].num_classes());
        ensure_arg!(
            layers.iter().all(|l| l.steps() == t && l.num_classes() == k),
            "all layers must share T and K"
        );
        Ok(Self { layers, layout, frames })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn layers(&self) -> &[ScheduleTable] {
        &self.layers
    }

    pub fn layer(&self, q: usize) -> &ScheduleTable {
        &self.layers[q]
    }

    pub fn layer_of(&self, position: usize) -> usize {
        self.layout.layer_of(position, self.layers.len(), self.frames)
    }
}

/// Raw (unclamped) cumulative coefficients of the easy-first schedule for layer `layer`.
///
/// Returns `(alpha_bar, gamma_bar)`; the uniform component is identically zero.
pub fn improved_raw(t: usize, steps: usize, layer: usize, num_layers: usize) -> (f64, f64) {
    let tf = steps as f64;
    let offset = (layer as f64 / (2.0 * num_layers as f64)).exp() / (2.0 * tf);
    let frac = t as f64 / tf;
    (1.0 - frac - offset, frac + offset)
}

/// The easy-first per-codebook schedule.
///
/// Later codebooks receive a larger mask offset, so they are masked earlier in the forward
/// process and recovered later in the reverse process. The uniform component is zero, raw
/// `alpha_bar` is clamped to `[0, 1]` and `gamma_bar` absorbs the remainder. Step 0 is the
/// identity for every layer.
pub fn improved_schedule(
    steps: usize,
    num_classes: usize,
    num_layers: usize,
    layout: Layout,
    frames: usize,
) -> Result<PositionalScheduleTable> {
    ensure_arg!(steps >= 1, "step count T must be >= 1, got {steps}");
    ensure_arg!(num_classes >= 2, "alphabet size K must be >= 2, got {num_classes}");
    ensure_arg!(num_layers >= 1, "layer count N_q must be >= 1, got {num_layers}");
    ensure_arg!(frames >= 1, "frames per layer L must be >= 1, got {frames}");
    let kf = num_classes as f64;
    let layers = (0..num_layers)
        .map(|q| {
            let mut alpha_bar = vec![1.0];
            let mut beta_bar = vec![0.0];
            let mut gamma_bar = vec![0.0];
            for t in 1..=steps {
                let (a_raw, g_raw) = improved_raw(t, steps, q, num_layers);
                // the three lines sum to 1 exactly; drop rounding residue
                let residue = 1.0 - a_raw - g_raw;
                let b = if residue.abs() <= SCHEDULE_TOL { 0.0 } else { (residue / kf).clamp(0.0, 1.0) };
                let a = a_raw.clamp(0.0, 1.0);
                let g = 1.0 - a - kf * b;
                alpha_bar.push(a);
                beta_bar.push(b);
                gamma_bar.push(g);
            }
            ScheduleTable::from_cumulative(num_classes, alpha_bar, beta_bar, gamma_bar)
        })
        .collect::<Result<Vec<_>>>()?;
    PositionalScheduleTable::new(layers, layout, frames)
}

/// Either a shared schedule or a per-layer one.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Uniform(ScheduleTable),
    Positional(PositionalScheduleTable),
}

impl Schedule {
    pub fn steps(&self) -> usize {
        match self {
            Schedule::Uniform(t) => t.steps(),
            Schedule::Positional(p) => p.layers[0].steps(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Schedule::Uniform(t) => t.num_classes(),
            Schedule::Positional(p) => p.layers[0].num_classes(),
        }
    }

    /// The coefficient table governing flattened position `position`.
    pub fn table_at(&self, position: usize) -> &ScheduleTable {
        match self {
            Schedule::Uniform(t) => t,
            Schedule::Positional(p) => p.layer(p.layer_of(position)),
        }
    }

    /// Verify that a grid of the given shape can be diffused with this schedule.
    pub fn check_shape(&self, num_classes: usize, num_layers: usize, frames: usize, layout: Layout) -> Result<()> {
        ensure_arg!(
            num_classes == self.num_classes(),
            "grid alphabet K={num_classes} does not match schedule K={}",
            self.num_classes()
        );
        if let Schedule::Positional(p) = self {
            ensure_arg!(
                p.num_layers() == num_layers && p.frames() == frames && p.layout() == layout,
                "grid shape {num_layers}x{frames} ({}) does not match schedule shape {}x{} ({})",
                layout.name(),
                p.num_layers(),
                p.frames(),
                p.layout().name()
            );
        }
        Ok(())
    }
}

impl From<ScheduleTable> for Schedule {
    fn from(t: ScheduleTable) -> Self {
        Schedule::Uniform(t)
    }
}

impl From<PositionalScheduleTable> for Schedule {
    fn from(p: PositionalScheduleTable) -> Self {
        Schedule::Positional(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Improved,
}

/// Cumulative column in a schedule file: flat for shared schedules, `[t][layer]` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CumulativeColumn {
    Flat(Vec<f64>),
    PerLayer(Vec<Vec<f64>>),
}

/// JSON schedule description.
///
/// When the cumulative arrays are present they define the schedule (and are validated);
/// otherwise it is generated from `kind` and the dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub kind: ScheduleKind,
    #[serde(rename = "N_q", default = "one")]
    pub num_layers: usize,
    #[serde(default)]
    pub layout: Layout,
    #[serde(rename = "L", default = "one")]
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<CumulativeColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_bar: Option<CumulativeColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_bar: Option<CumulativeColumn>,
}

fn one() -> usize {
    1
}

impl ScheduleFile {
    /// A generator-only description (no explicit arrays).
    pub fn generated(kind: ScheduleKind, steps: usize, num_classes: usize, num_layers: usize, layout: Layout, frames: usize) -> Self {
        Self {
            steps,
            num_classes,
            kind,
            num_layers,
            layout,
            frames,
            alpha_bar: None,
            gamma_bar: None,
            beta_bar: None,
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        match (&self.alpha_bar, &self.gamma_bar, &self.beta_bar) {
            (None, None, None) => match self.kind {
                ScheduleKind::Linear => Ok(linear_schedule(self.steps, self.num_classes)?.into()),
                ScheduleKind::Improved => Ok(improved_schedule(
                    self.steps,
                    self.num_classes,
                    self.num_layers,
                    self.layout,
                    self.frames,
                )?
                .into()),
            },
            (Some(a), Some(g), Some(b)) => self.build_explicit(a, g, b),
            _ => Err(Error::Argument(
                "schedule file must give all of alpha_bar, gamma_bar, beta_bar or none".into(),
            )),
        }
    }

    fn build_explicit(&self, a: &CumulativeColumn, g: &CumulativeColumn, b: &CumulativeColumn) -> Result<Schedule> {
        use CumulativeColumn::*;
        let check_len = |n: usize| -> Result<()> {
            ensure_arg!(n == self.steps + 1, "cumulative arrays must have T+1 = {} entries, got {n}", self.steps + 1);
            Ok(())
        };
        match (a, g, b) {
            (Flat(a), Flat(g), Flat(b)) => {
                check_len(a.len())?;
                Ok(ScheduleTable::from_cumulative(self.num_classes, a.clone(), b.clone(), g.clone())?.into())
            }
            (PerLayer(a), PerLayer(g), PerLayer(b)) => {
                check_len(a.len())?;
                let column = |rows: &[Vec<f64>], q: usize| -> Result<Vec<f64>> {
                    rows.iter()
                        .map(|r| {
                            r.get(q)
                                .copied()
                                .ok_or_else(|| Error::Argument(format!("per-layer row is missing layer {q}")))
                        })
                        .collect()
                };
                let layers = (0..self.num_layers)
                    .map(|q| {
                        ScheduleTable::from_cumulative(self.num_classes, column(a, q)?, column(b, q)?, column(g, q)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PositionalScheduleTable::new(layers, self.layout, self.frames)?.into())
            }
            _ => Err(Error::Argument("cumulative arrays must all be flat or all per-layer".into())),
        }
    }

    /// Full description including the cumulative arrays of `schedule`.
    pub fn describe(schedule: &Schedule) -> Self {
        match schedule {
            Schedule::Uniform(t) => Self {
                steps: t.steps(),
                num_classes: t.num_classes(),
                kind: ScheduleKind::Linear,
                num_layers: 1,
                layout: Layout::Concatenated,
                frames: 1,
                alpha_bar: Some(CumulativeColumn::Flat(t.alpha_bar.clone())),
                gamma_bar: Some(CumulativeColumn::Flat(t.gamma_bar.clone())),
                beta_bar: Some(CumulativeColumn::Flat(t.beta_bar.clone())),
            },
            Schedule::Positional(p) => {
                let per_layer = |f: fn(&ScheduleTable) -> &[f64]| {
                    CumulativeColumn::PerLayer(
                        (0..=p.layers[0].steps())
                            .map(|t| p.layers.iter().map(|l| f(l)[t]).collect())
                            .collect(),
                    )
                };
                Self {
                    steps: p.layers[0].steps(),
                    num_classes: p.layers[0].num_classes(),
                    kind: ScheduleKind::Improved,
                    num_layers: p.num_layers(),
                    layout: p.layout(),
                    frames: p.frames(),
                    alpha_bar: Some(per_layer(ScheduleTable::alpha_bar)),
                    gamma_bar: Some(per_layer(ScheduleTable::gamma_bar)),
                    beta_bar: Some(per_layer(ScheduleTable::beta_bar)),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn assert_invariants(t: &ScheduleTable) {
        let k = t.num_classes() as f64;
        for s in 0..=t.steps() {
            let c = t.cumulative(s);
            assert_abs_diff_eq!(c.alpha + k * c.beta + c.gamma, 1.0, epsilon = 1e-12);
            if s > 0 {
                assert!(t.alpha_bar()[s] <= t.alpha_bar()[s - 1] + 1e-12);
                assert!(t.gamma_bar()[s] >= t.gamma_bar()[s - 1] - 1e-12);
                let st = t.stepwise(s);
                assert_abs_diff_eq!(st.alpha + k * st.beta + st.gamma, 1.0, epsilon = 1e-12);
            }
        }
    }

    fn rebuild(t: &ScheduleTable) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![1.0];
        let mut g = vec![0.0];
        for s in 1..=t.steps() {
            a.push(a[s - 1] * t.alpha()[s]);
            g.push(1.0 - (1.0 - g[s - 1]) * (1.0 - t.gamma()[s]));
        }
        (a, g)
    }

    #[test]
    fn linear_endpoints() {
        let t = linear_schedule(100, 512).unwrap();
        assert_abs_diff_eq!(t.gamma_bar()[100], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(512.0 * t.beta_bar()[100], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(t.alpha_bar()[100], 0.0, epsilon = 1e-12);
        assert_eq!((t.alpha_bar()[0], t.gamma_bar()[0], t.beta_bar()[0]), (1.0, 0.0, 0.0));
        assert_abs_diff_eq!(t.gamma_bar()[50], 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(512.0 * t.beta_bar()[50], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(t.alpha_bar()[50], 0.5, epsilon = 1e-12);
        assert_invariants(&t);
    }

    #[test]
    fn linear_rejects_bad_dimensions() {
        assert!(matches!(linear_schedule(0, 10), Err(Error::Argument(_))));
        assert!(matches!(linear_schedule(10, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn linear_round_trip() {
        let t = linear_schedule(100, 512).unwrap();
        let (a, g) = rebuild(&t);
        for s in 0..=100 {
            assert_abs_diff_eq!(a[s], t.alpha_bar()[s], epsilon = 1e-12);
            assert_abs_diff_eq!(g[s], t.gamma_bar()[s], epsilon = 1e-12);
        }
    }

    #[test]
    fn geometric_stepwise() {
        let (a, _, _) = stepwise_from_cumulative(2, &[1.0, 0.5, 0.25], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(&a[1..], &[0.5, 0.5]);
        let (_, _, g) = stepwise_from_cumulative(2, &[1.0, 0.5, 0.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(g[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn stepwise_rejects_non_monotone() {
        let err = stepwise_from_cumulative(2, &[1.0, 0.5, 0.6], &[0.0, 0.5, 0.4]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
        let err = ScheduleTable::from_cumulative(2, vec![1.0, 0.5, 0.6], vec![0.0; 3], vec![0.0, 0.5, 0.4]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    #[test]
    fn simplex_violation_is_rejected() {
        let err = ScheduleTable::from_cumulative(2, vec![1.0, 0.5], vec![0.0, 0.1], vec![0.0, 0.1]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    #[test]
    fn improved_examples() {
        let p = improved_schedule(100, 1024, 4, Layout::Concatenated, 5).unwrap();
        let expected = 1.0 - 0.5 - (2.0f64 / 8.0).exp() / 200.0;
        assert_abs_diff_eq!(p.layer(2).alpha_bar()[50], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.49358, epsilon = 1e-5);
        let (raw, _) = improved_raw(100, 100, 0, 4);
        assert_abs_diff_eq!(raw, -0.005, epsilon = 1e-15);
        assert_eq!(p.layer(0).alpha_bar()[100], 0.0);
        for layer in p.layers() {
            assert_invariants(layer);
            assert!(layer.beta_bar().iter().all(|&b| b == 0.0));
        }
        for t in 0..=100 {
            for q in 1..4 {
                assert!(p.layer(q).gamma_bar()[t] >= p.layer(q - 1).gamma_bar()[t]);
            }
        }
    }

    #[test]
    fn layouts_map_positions_to_layers() {
        let c = improved_schedule(10, 4, 3, Layout::Concatenated, 2).unwrap();
        assert_eq!((0..6).map(|i| c.layer_of(i)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        let i = improved_schedule(10, 4, 3, Layout::Interleaved, 2).unwrap();
        assert_eq!((0..6).map(|p| i.layer_of(p)).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
        for layout in [Layout::Concatenated, Layout::Interleaved] {
            for q in 0..3 {
                for f in 0..2 {
                    assert_eq!(layout.layer_of(layout.position(q, f, 3, 2), 3, 2), q);
                }
            }
        }
    }

    #[test]
    fn schedule_file_round_trips() {
        for sched in [
            Schedule::from(linear_schedule(7, 3).unwrap()),
            Schedule::from(improved_schedule(6, 5, 3, Layout::Interleaved, 2).unwrap()),
        ] {
            let json = serde_json::to_string(&ScheduleFile::describe(&sched)).unwrap();
            let back: ScheduleFile = serde_json::from_str(&json).unwrap();
            assert_eq!(back.build().unwrap(), sched);
        }
        let gen: ScheduleFile = serde_json::from_str(r#"{"T":100,"K":512,"kind":"linear"}"#).unwrap();
        assert_eq!(gen.build().unwrap(), Schedule::from(linear_schedule(100, 512).unwrap()));
    }

    #[test]
    fn multi_step_kernel_matches_consecutive_steps() {
        let t = linear_schedule(10, 4).unwrap();
        let c = t.transition_between(3, 7);
        assert_abs_diff_eq!(c.alpha, t.alpha_bar()[7] / t.alpha_bar()[3], epsilon = 1e-14);
        let prod: f64 = (4..=7).map(|s| 1.0 - t.gamma()[s]).product();
        assert_abs_diff_eq!(1.0 - c.gamma, prod, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn random_stepwise_round_trips(
            k in 2usize..8,
            steps in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)
        ) {
            let kf = k as f64;
            let coeffs: Vec<(f64, f64)> = steps
                .iter()
                .map(|&(a, b, g)| {
                    let z = a + kf * b + g + 1e-9;
                    (a / z, g / z)
                })
                .collect();
            let table = ScheduleTable::from_stepwise(k, &coeffs).unwrap();
            assert_invariants(&table);
            let (a, g) = rebuild(&table);
            for s in 0..=table.steps() {
                prop_assert!((a[s] - table.alpha_bar()[s]).abs() <= 1e-12);
                prop_assert!((g[s] - table.gamma_bar()[s]).abs() <= 1e-12);
            }
        }

        #[test]
        fn improved_is_easy_first(steps in 1usize..200, layers in 1usize..12) {
            let p = improved_schedule(steps, 16, layers, Layout::Concatenated, 1).unwrap();
            for t in 0..=steps {
                for q in 1..layers {
                    prop_assert!(p.layer(q).gamma_bar()[t] >= p.layer(q - 1).gamma_bar()[t]);
                }
            }
        }
    }
}
