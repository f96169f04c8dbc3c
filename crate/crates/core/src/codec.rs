//! Vector quantization of feature frames into token grids.
//!
//! Four quantizer families share one model type:
//!
//! - `VQ`: one codebook over the whole frame.
//! - `RVQ`: `R` codebooks applied in sequence, each to the residual left by the previous ones.
//! - `GVQ`: the frame is split into `G` contiguous sub-vectors, each with its own codebook.
//! - `GRVQ`: `G` groups, each quantized residually with depth `R`.
//!
//! Book `g * R + r` is residual layer `r` of group `g`. Token grids list the active books in
//! depth-major order (layer `j` is group `j % G`, depth `j / G`), so the first layers always
//! carry the coarsest information.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GridShape, TokenGrid};
use crate::error::{ensure_arg, Error, Result};
use crate::rng;
use crate::schedules::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerKind {
    #[serde(rename = "VQ")]
    Vq,
    #[serde(rename = "RVQ")]
    Rvq,
    #[serde(rename = "GVQ")]
    Gvq,
    #[serde(rename = "GRVQ")]
    Grvq,
}

impl QuantizerKind {
    pub fn is_residual(self) -> bool {
        matches!(self, QuantizerKind::Rvq | QuantizerKind::Grvq)
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VQ" => Ok(QuantizerKind::Vq),
            "RVQ" => Ok(QuantizerKind::Rvq),
            "GVQ" => Ok(QuantizerKind::Gvq),
            "GRVQ" => Ok(QuantizerKind::Grvq),
            _ => Err(Error::Argument(format!("unknown quantizer kind `{s}`"))),
        }
    }
}

/// Row-major `rows x dim` matrix of real feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(rows >= 1 && dim >= 1, "feature matrix needs at least one row and column");
        ensure_arg!(data.len() == rows * dim, "expected {} values for {rows}x{dim}, got {}", rows * dim, data.len());
        ensure_arg!(data.iter().all(|v| v.is_finite()), "feature matrix has non-finite entries");
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure_arg!(!rows.is_empty(), "feature matrix needs at least one row");
        let dim = rows[0].len();
        ensure_arg!(rows.iter().all(|r| r.len() == dim), "ragged feature rows");
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Mean squared error per element.
    pub fn mse(&self, other: &FeatureMatrix) -> Result<f64> {
        ensure_arg!(self.dim == other.dim && self.data.len() == other.data.len(), "shape mismatch");
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.data.len() as f64)
    }
}

/// `codes x dim` code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    data: Vec<f64>,
}

impl Codebook {
    pub fn new(codes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(codes >= 1 && dim >= 1, "codebook needs at least one code of dimension >= 1");
        ensure_arg!(data.len() == codes * dim, "codebook data has {} values, expected {}", data.len(), codes * dim);
        ensure_arg!(data.iter().all(|v| v.is_finite()), "codebook has non-finite entries");
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure_arg!(!rows.is_empty(), "codebook needs at least one code");
        let dim = rows[0].len();
        ensure_arg!(rows.iter().all(|r| r.len() == dim), "ragged codebook rows");
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn codes(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Index of the closest code in squared Euclidean distance, ties to the lowest index,
    /// together with that distance.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, code) in self.data.chunks(self.dim).enumerate() {
            let d = squared_distance(code, v);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// A fitted (or explicitly constructed) multi-codebook quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    kind: QuantizerKind,
    groups: usize,
    depth: usize,
    codebooks: Vec<Codebook>,
}

impl CodecModel {
    /// `codebooks[g * depth + r]` is residual layer `r` of group `g`.
    pub fn new(kind: QuantizerKind, groups: usize, depth: usize, codebooks: Vec<Codebook>) -> Result<Self> {
        ensure_arg!(groups >= 1 && depth >= 1, "G and R must be >= 1");
        match kind {
            QuantizerKind::Vq => ensure_arg!(groups == 1 && depth == 1, "VQ needs G = R = 1"),
            QuantizerKind::Rvq => ensure_arg!(groups == 1, "RVQ needs G = 1"),
            QuantizerKind::Gvq => ensure_arg!(depth == 1, "GVQ needs R = 1"),
            QuantizerKind::Grvq => {}
        }
        ensure_arg!(
            codebooks.len() == groups * depth,
            "expected G*R = {} codebooks, got {}",
            groups * depth,
            codebooks.len()
        );
        let (codes, sub_dim) = (codebooks[0].codes(), codebooks[0].dim());
        ensure_arg!(
            codebooks.iter().all(|b| b.codes() == codes && b.dim() == sub_dim),
            "all codebooks must share K' and sub-dimension"
        );
        Ok(Self {
            kind,
            groups,
            depth,
            codebooks,
        })
    }

    /// Model with Gaussian random code vectors, for constructing configurations.
    pub fn random(kind: QuantizerKind, groups: usize, depth: usize, codes: usize, dim: usize, seed: u64) -> Result<Self> {
        ensure_arg!(groups >= 1 && dim % groups == 0, "feature dimension {dim} is not divisible by G={groups}");
        let sub = dim / groups;
        let mut rng = rng::stream(seed, 0);
        let books = (0..groups * depth)
            .map(|_| {
                let data = (0..codes * sub).map(|_| standard_normal(&mut rng)).collect();
                Codebook::new(codes, sub, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kind, groups, depth, books)
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Total number of codebooks `N_q = G * R`.
    pub fn num_books(&self) -> usize {
        self.codebooks.len()
    }

    /// Codes per book `K'`.
    pub fn codes_per_book(&self) -> usize {
        self.codebooks[0].codes()
    }

    pub fn sub_dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    pub fn dim(&self) -> usize {
        self.sub_dim() * self.groups
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn book(&self, group: usize, layer: usize) -> &Codebook {
        &self.codebooks[group * self.depth + layer]
    }

    /// `(group, residual layer)` of token-grid layer `j`.
    pub fn layer_book(&self, j: usize) -> (usize, usize) {
        (j % self.groups, j / self.groups)
    }

    fn check_active(&self, active_books: usize) -> Result<()> {
        if self.kind.is_residual() {
            ensure_arg!(
                (1..=self.num_books()).contains(&active_books),
                "active books must be in 1..={}, got {active_books}",
                self.num_books()
            );
        } else {
            ensure_arg!(
                active_books == self.num_books(),
                "{:?} always uses all {} books",
                self.kind,
                self.num_books()
            );
        }
        Ok(())
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Quantize every frame with the first `active_books` books (depth-major order).
///
/// Returns the token grid (`active_books` layers of `rows` frames, alphabet `K'`) and the
/// reconstruction.
pub fn quantize(features: &FeatureMatrix, model: &CodecModel, active_books: usize) -> Result<(TokenGrid, FeatureMatrix)> {
    ensure_arg!(
        features.dim() == model.dim(),
        "feature dimension {} does not match codec dimension {}",
        features.dim(),
        model.dim()
    );
    model.check_active(active_books)?;
    let rows = features.rows();
    let sub = model.sub_dim();
    let shape = GridShape::new(model.codes_per_book().max(2), active_books, rows, Layout::Concatenated)?;
    let mut layers = vec![vec![0u32; rows]; active_books];
    let mut recon = vec![0.0; rows * model.dim()];
    for i in 0..rows {
        let frame = features.row(i);
        for g in 0..model.groups() {
            let lo = g * sub;
            let mut residual = frame[lo..lo + sub].to_vec();
            for r in 0..model.depth() {
                let j = r * model.groups() + g;
                if j >= active_books {
                    break;
                }
                let book = model.book(g, r);
                let (k, _) = book.nearest(&residual);
                layers[j][i] = k as u32;
                for (d, c) in book.code(k).iter().enumerate() {
                    residual[d] -= c;
                    recon[i * model.dim() + lo + d] += c;
                }
            }
        }
    }
    let grid = TokenGrid::from_layers(shape.num_classes, shape.layout, &layers)?;
    Ok((grid, FeatureMatrix::new(rows, model.dim(), recon)?))
}

/// Codebook lookup: the inverse of [`quantize`]'s reconstruction.
pub fn dequantize(tokens: &TokenGrid, model: &CodecModel) -> Result<FeatureMatrix> {
    ensure_arg!(tokens.is_clean(), "token grid contains mask ids");
    let shape = tokens.shape();
    model.check_active(shape.num_layers)?;
    let codes = model.codes_per_book();
    let sub = model.sub_dim();
    let mut recon = vec![0.0; shape.frames * model.dim()];
    for j in 0..shape.num_layers {
        let (g, r) = model.layer_book(j);
        let book = model.book(g, r);
        for i in 0..shape.frames {
            let k = tokens.get(j, i) as usize;
            ensure_arg!(k < codes, "token {k} out of range for a book of {codes} codes");
            for (d, c) in book.code(k).iter().enumerate() {
                recon[i * model.dim() + g * sub + d] += c;
            }
        }
    }
    FeatureMatrix::new(shape.frames, model.dim(), recon)
}

/// Reconstruction MSE for each usable number of active books.
///
/// Residual quantizers report depths `1..=N_q`; flat and group quantizers a single row.
pub fn reconstruction_report(features: &FeatureMatrix, model: &CodecModel) -> Result<Vec<(usize, f64)>> {
    let depths: Vec<usize> = if model.kind().is_residual() {
        (1..=model.num_books()).collect()
    } else {
        vec![model.num_books()]
    };
    depths
        .into_iter()
        .map(|a| {
            let (_, recon) = quantize(features, model, a)?;
            Ok((a, features.mse(&recon)?))
        })
        .collect()
}

/// Result of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Codebook,
    pub assignments: Vec<usize>,
    /// Inertia (sum of squared distances) after every assignment step.
    pub inertia: Vec<f64>,
}

fn count_distinct(points: &[f64], dim: usize) -> usize {
    points
        .chunks(dim)
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn assign(points: &[f64], dim: usize, centroids: &Codebook, out: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.chunks(dim).enumerate() {
        let (k, d) = centroids.nearest(p);
        out[i] = k;
        dist[i] = d;
        inertia += d;
    }
    inertia
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Runs at most `iters` update rounds, stopping early when assignments stabilize. A cluster
/// left empty by an update is re-seeded at the point farthest from its current centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut R) -> Result<KMeansResult> {
    ensure_arg!(dim >= 1 && k >= 1, "k-means needs dim >= 1 and k >= 1");
    ensure_arg!(points.len() % dim == 0, "point buffer is not a multiple of dim");
    let n = points.len() / dim;
    let distinct = count_distinct(points, dim);
    if distinct < k {
        return Err(Error::Fitting(format!("need at least {k} distinct frames to fit {k} codes, found {distinct}")));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(point(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        if d2[pick] == 0.0 {
            // rounding fell off the end; take the farthest point instead
            pick = argmax(&d2);
        }
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(point(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut book = Codebook::new(k, dim, centers)?;
    let mut assignments = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut inertia = vec![assign(points, dim, &book, &mut assignments, &mut dist)];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    book.data[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else {
                let far = argmax(&dist);
                book.data[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                dist[far] = 0.0;
            }
        }
        let previous = assignments.clone();
        inertia.push(assign(points, dim, &book, &mut assignments, &mut dist));
        if assignments == previous {
            break;
        }
    }
    Ok(KMeansResult {
        centroids: book,
        assignments,
        inertia,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Codebook fitting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub kind: QuantizerKind,
    pub groups: usize,
    pub depth: usize,
    pub codes: usize,
    pub iters: usize,
    pub seed: u64,
    /// Quantizer dropout (RVQ only): refine all books jointly, each round truncating every
    /// frame to a depth drawn uniformly from `1..=R`.
    pub dropout: bool,
}

impl FitConfig {
    pub fn new(kind: QuantizerKind, groups: usize, depth: usize, codes: usize) -> Self {
        Self {
            kind,
            groups,
            depth,
            codes,
            iters: 25,
            seed: 0,
            dropout: false,
        }
    }
}

/// Fit a codec by k-means, one book at a time; residual books are fitted on the residuals
/// left by the books before them.
pub fn fit_codebooks(features: &FeatureMatrix, config: &FitConfig) -> Result<CodecModel> {
    let (g_count, depth) = (config.groups, config.depth);
    ensure_arg!(g_count >= 1 && depth >= 1 && config.codes >= 1, "G, R and K' must be >= 1");
    ensure_arg!(
        features.dim() % g_count == 0,
        "feature dimension {} is not divisible by G={g_count}",
        features.dim()
    );
    ensure_arg!(
        !config.dropout || config.kind == QuantizerKind::Rvq,
        "quantizer dropout applies to RVQ only"
    );
    let sub = features.dim() / g_count;
    let rows = features.rows();
    let mut rng = rng::stream(config.seed, 0);
    let mut books = Vec::with_capacity(g_count * depth);
    for g in 0..g_count {
        let mut residual: Vec<f64> = (0..rows)
            .flat_map(|i| features.row(i)[g * sub..(g + 1) * sub].to_vec())
            .collect();
        for _ in 0..depth {
            let fit = kmeans(&residual, sub, config.codes, config.iters, &mut rng)?;
            for (i, &a) in fit.assignments.iter().enumerate() {
                for (r, c) in residual[i * sub..(i + 1) * sub].iter_mut().zip(fit.centroids.code(a)) {
                    *r -= c;
                }
            }
            books.push(fit.centroids);
        }
    }
    let mut model = CodecModel::new(config.kind, g_count, depth, books)?;
    if config.dropout && depth > 1 {
        refine_with_dropout(features, &mut model, config.iters, &mut rng);
    }
    Ok(model)
}

/// Joint residual refinement where each frame only updates the books within its sampled
/// depth, so every prefix of books is trained to reconstruct on its own.
fn refine_with_dropout<R: Rng + ?Sized>(features: &FeatureMatrix, model: &mut CodecModel, rounds: usize, rng: &mut R) {
    let (depth, dim, codes) = (model.depth(), model.sub_dim(), model.codes_per_book());
    for _ in 0..rounds {
        let mut sums = vec![vec![0.0; codes * dim]; depth];
        let mut counts = vec![vec![0usize; codes]; depth];
        for i in 0..features.rows() {
            let keep = rng.random_range(1..=depth);
            let mut residual = features.row(i).to_vec();
            for r in 0..keep {
                let book = &model.codebooks[r];
                let (k, _) = book.nearest(&residual);
                counts[r][k] += 1;
                for (s, v) in sums[r][k * dim..(k + 1) * dim].iter_mut().zip(&residual) {
                    *s += v;
                }
                for (v, c) in residual.iter_mut().zip(book.code(k)) {
                    *v -= c;
                }
            }
        }
        for r in 0..depth {
            for k in 0..codes {
                if counts[r][k] > 0 {
                    for d in 0..dim {
                        model.codebooks[r].data[k * dim + d] = sums[r][k * dim + d] / counts[r][k] as f64;
                    }
                }
            }
        }
    }
}

/// JSON codec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecFile {
    pub kind: QuantizerKind,
    #[serde(rename = "G")]
    pub groups: usize,
    #[serde(rename = "R")]
    pub depth: usize,
    #[serde(rename = "Kp")]
    pub codes: usize,
    pub codebooks: Vec<Vec<Vec<f64>>>,
}

impl From<&CodecModel> for CodecFile {
    fn from(m: &CodecModel) -> Self {
        Self {
            kind: m.kind,
            groups: m.groups,
            depth: m.depth,
            codes: m.codes_per_book(),
            codebooks: m.codebooks.iter().map(Codebook::to_rows).collect(),
        }
    }
}

impl TryFrom<CodecFile> for CodecModel {
    type Error = Error;

    fn try_from(f: CodecFile) -> Result<Self> {
        let books = f
            .codebooks
            .iter()
            .map(|rows| Codebook::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        ensure_arg!(
            books.iter().all(|b| b.codes() == f.codes),
            "codebooks do not all have Kp={} codes",
            f.codes
        );
        CodecModel::new(f.kind, f.groups, f.depth, books)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gaussian(rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rng::stream(seed, 0);
        FeatureMatrix::new(rows, dim, (0..rows * dim).map(|_| standard_normal(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn nearest_neighbor_by_hand() {
        let book = Codebook::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let model = CodecModel::new(QuantizerKind::Vq, 1, 1, vec![book]).unwrap();
        let f = FeatureMatrix::from_rows(&[vec![0.9, 0.8]]).unwrap();
        let (tokens, recon) = quantize(&f, &model, 1).unwrap();
        assert_eq!(tokens.tokens(), &[1]);
        assert_eq!(recon.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = Codebook::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(book.nearest(&[0.0]).0, 0);
    }

    #[test]
    fn exact_hit_has_zero_residual() {
        let model = CodecModel::random(QuantizerKind::Vq, 1, 1, 8, 3, 4).unwrap();
        let f = FeatureMatrix::from_rows(&[model.codebooks()[0].code(5).to_vec()]).unwrap();
        let (tokens, recon) = quantize(&f, &model, 1).unwrap();
        assert_eq!(tokens.tokens(), &[5]);
        assert_eq!(recon.mse(&f).unwrap(), 0.0);
    }

    #[test]
    fn group_lookup_concatenates() {
        let g0 = Codebook::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g1 = Codebook::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let model = CodecModel::new(QuantizerKind::Gvq, 2, 1, vec![g0, g1]).unwrap();
        let grid = TokenGrid::from_layers(2, Layout::Concatenated, &[vec![1], vec![0]]).unwrap();
        let out = dequantize(&grid, &model).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn constant_lookup() {
        let model = CodecModel::random(QuantizerKind::Vq, 1, 1, 4, 2, 1).unwrap();
        let grid = TokenGrid::from_layers(4, Layout::Concatenated, &[vec![0, 0, 0]]).unwrap();
        let out = dequantize(&grid, &model).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), model.codebooks()[0].code(0));
        }
    }

    #[test]
    fn dequantize_rejects_masks_and_bad_depths() {
        let model = CodecModel::random(QuantizerKind::Gvq, 2, 1, 4, 4, 1).unwrap();
        let masked = TokenGrid::from_layers(4, Layout::Concatenated, &[vec![4], vec![0]]).unwrap();
        assert!(dequantize(&masked, &model).is_err());
        let f = gaussian(3, 4, 0);
        assert!(quantize(&f, &model, 1).is_err());
        assert!(quantize(&gaussian(3, 5, 0), &model, 2).is_err());
    }

    #[test]
    fn residual_depth_never_hurts_on_fitted_data() {
        let f = gaussian(400, 4, 9);
        for (kind, g, r) in [(QuantizerKind::Rvq, 1, 4), (QuantizerKind::Grvq, 2, 2)] {
            let model = fit_codebooks(&f, &FitConfig::new(kind, g, r, 8)).unwrap();
            let report = reconstruction_report(&f, &model).unwrap();
            assert_eq!(report.len(), g * r);
            for w in report.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-12, "{report:?}");
            }
        }
    }

    #[test]
    fn kmeans_inertia_is_monotone() {
        let f = gaussian(300, 3, 2);
        let fit = kmeans(f.data(), 3, 10, 50, &mut rng::stream(1, 0)).unwrap();
        for w in fit.inertia.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn separable_points_are_recovered_exactly() {
        let pts = [vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let rows: Vec<Vec<f64>> = (0..30).map(|i| pts[i % 3].clone()).collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let model = fit_codebooks(&f, &FitConfig::new(QuantizerKind::Vq, 1, 1, 3)).unwrap();
        let mut codes = model.codebooks()[0].to_rows();
        codes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = pts.to_vec();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(codes, expected);
        assert_eq!(reconstruction_report(&f, &model).unwrap(), vec![(1, 0.0)]);
    }

    #[test]
    fn too_few_distinct_frames_is_a_fitting_error() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        let err = fit_codebooks(&f, &FitConfig::new(QuantizerKind::Vq, 1, 1, 3)).unwrap_err();
        assert!(matches!(err, Error::Fitting(_)));
    }

    #[test]
    fn dropout_fit_is_deterministic_and_rvq_only() {
        let f = gaussian(200, 2, 5);
        let mut cfg = FitConfig::new(QuantizerKind::Rvq, 1, 3, 4);
        cfg.dropout = true;
        let a = fit_codebooks(&f, &cfg).unwrap();
        let b = fit_codebooks(&f, &cfg).unwrap();
        assert_eq!(a, b);
        let report = reconstruction_report(&f, &a).unwrap();
        assert!(report[2].1 < report[0].1);
        cfg.kind = QuantizerKind::Grvq;
        assert!(fit_codebooks(&f, &cfg).is_err());
    }

    #[test]
    fn codec_file_round_trips() {
        let model = CodecModel::random(QuantizerKind::Grvq, 2, 2, 3, 4, 8).unwrap();
        let json = serde_json::to_string(&CodecFile::from(&model)).unwrap();
        let back: CodecFile = serde_json::from_str(&json).unwrap();
        assert_eq!(CodecModel::try_from(back).unwrap(), model);
    }

    proptest! {
        #[test]
        fn quantize_is_optimal_and_invertible(seed in 0u64..1000, rows in 1usize..20) {
            let model = CodecModel::random(QuantizerKind::Grvq, 2, 3, 5, 4, seed).unwrap();
            let f = gaussian(rows, 4, seed + 1);
            for active in 1..=model.num_books() {
                let (tokens, recon) = quantize(&f, &model, active).unwrap();
                prop_assert_eq!(dequantize(&tokens, &model).unwrap(), recon.clone());
            }
            let flat = CodecModel::random(QuantizerKind::Vq, 1, 1, 7, 4, seed).unwrap();
            let (tokens, _) = quantize(&f, &flat, 1).unwrap();
            for i in 0..rows {
                let chosen = squared_distance(flat.codebooks()[0].code(tokens.get(0, i) as usize), f.row(i));
                for k in 0..7 {
                    prop_assert!(chosen <= squared_distance(flat.codebooks()[0].code(k), f.row(i)));
                }
            }
        }

        #[test]
        fn residual_reconstruction_telescopes(seed in 0u64..1000) {
            let model = CodecModel::random(QuantizerKind::Rvq, 1, 4, 6, 3, seed).unwrap();
            let f = gaussian(5, 3, seed);
            let (tokens, _) = quantize(&f, &model, 4).unwrap();
            for depth in 1..=4 {
                let (_, recon) = quantize(&f, &model, depth).unwrap();
                for i in 0..5 {
                    let mut sum = [0.0; 3];
                    for r in 0..depth {
                        for (s, c) in sum.iter_mut().zip(model.book(0, r).code(tokens.get(r, i) as usize)) {
                            *s += c;
                        }
                    }
                    for (a, b) in sum.iter().zip(recon.row(i)) {
                        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
                    }
                }
            }
        }
    }
}
