//! Label spreading over an affinity graph of document-topic vectors.
//!
//! Build `W` with an RBF or symmetrized KNN kernel, normalize to
//! `S = D^-1/2 W D^-1/2`, then iterate `F <- alpha S F + (1 - alpha) Y`
//! from `F = Y` until the largest entry change drops to `tol`. The fixpoint
//! solves `(I - alpha S) F = (1 - alpha) Y`, which [`closed_form`] computes
//! directly and serves as the check on the iteration.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{LabelMatrix, NEGATIVE, POSITIVE};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_GAMMA: f64 = 20.0;
pub const DEFAULT_K: usize = 7;
pub const DEFAULT_MAX_ITER: usize = 1_000;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const CLOSED_FORM_MAX_N: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum KernelMeta {
    Rbf { gamma: f64 },
    Knn {
        k: usize,
        #[serde(default)]
        symmetrization: Symmetrization,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetrization {
    #[default]
    Union,
}

impl KernelMeta {
    pub fn name(&self) -> &'static str {
        match self {
            KernelMeta::Rbf { .. } => "rbf",
            KernelMeta::Knn { .. } => "knn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub ids: Vec<String>,
    pub weights: DMatrix<f64>,
    pub kernel: KernelMeta,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(ids: &[String], x: &[Vec<f64>]) -> Result<()> {
    if ids.len() != x.len() {
        return Err(Error::InvalidInput(format!("{} ids for {} points", ids.len(), x.len())));
    }
    if let Some(first) = x.first() {
        if x.iter().any(|r| r.len() != first.len()) {
            return Err(Error::InvalidInput("points have mixed dimensions".into()));
        }
    }
    Ok(())
}

/// `W_ij = exp(-gamma |x_i - x_j|^2)`, zero diagonal.
pub fn rbf_affinity(ids: &[String], x: &[Vec<f64>], gamma: f64) -> Result<AffinityGraph> {
    check_points(ids, x)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { (-gamma * sq_dist(&x[i], &x[j])).exp() })
                .collect()
        })
        .collect();
    // Mirror the upper triangle so symmetry is exact regardless of rounding.
    let weights = DMatrix::from_fn(n, n, |i, j| if i <= j { rows[i][j] } else { rows[j][i] });
    Ok(AffinityGraph {
        ids: ids.to_vec(),
        weights,
        kernel: KernelMeta::Rbf { gamma },
    })
}

/// Indices of the `k` nearest other points, ties broken by lower index.
pub fn nearest_neighbors(x: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = (0..x.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(&x[i], &x[j]), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Binary KNN graph symmetrized by union.
pub fn knn_affinity(ids: &[String], x: &[Vec<f64>], k: usize) -> Result<AffinityGraph> {
    check_points(ids, x)?;
    let n = x.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("knn needs 1 <= k < N (k = {k}, N = {n})")));
    }
    let neighbors: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| nearest_neighbors(x, i, k)).collect();
    let mut weights = DMatrix::zeros(n, n);
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            weights[(i, j)] = 1.0;
            weights[(j, i)] = 1.0;
        }
    }
    Ok(AffinityGraph {
        ids: ids.to_vec(),
        weights,
        kernel: KernelMeta::Knn {
            k,
            symmetrization: Symmetrization::Union,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    pub s: DMatrix<f64>,
    /// Rows of `W` that sum to zero; their rows and columns of `S` are zero.
    pub isolated: Vec<usize>,
}

/// `S = D^-1/2 W D^-1/2`.
pub fn normalize(graph: &AffinityGraph) -> NormalizedGraph {
    let w = &graph.weights;
    let n = w.nrows();
    let degree: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    let isolated = (0..n).filter(|&i| degree[i] <= 0.0).collect();
    let s = DMatrix::from_fn(n, n, |i, j| {
        if degree[i] > 0.0 && degree[j] > 0.0 {
            w[(i, j)] / (degree[i] * degree[j]).sqrt()
        } else {
            0.0
        }
    });
    NormalizedGraph { s, isolated }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            alpha: DEFAULT_ALPHA,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidInput("tol must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardLabel {
    Positive,
    Negative,
}

impl HardLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            HardLabel::Positive => "positive",
            HardLabel::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    /// `N x 2` soft scores, column 0 positive.
    pub f: DMatrix<f64>,
    pub hard: Vec<HardLabel>,
    pub iterations: usize,
    pub converged: bool,
    /// Upper bound on the max-abs distance from `f` to the exact fixpoint.
    pub residual: f64,
}

impl PropagationResult {
    pub fn score(&self, i: usize) -> [f64; 2] {
        [self.f[(i, POSITIVE)], self.f[(i, NEGATIVE)]]
    }
}

/// Row-argmax; a tie (including an all-zero row) is negative.
pub fn hard_labels(f: &DMatrix<f64>) -> Vec<HardLabel> {
    (0..f.nrows())
        .map(|i| {
            if f[(i, POSITIVE)] > f[(i, NEGATIVE)] {
                HardLabel::Positive
            } else {
                HardLabel::Negative
            }
        })
        .collect()
}

pub fn seed_matrix(y: &LabelMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(y.n(), 2, |i, j| y.rows[i][j])
}

/// `S F` computed row by row in a fixed order, so results are bit-stable.
fn mul_sf(s: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let c = f.ncols();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..c)
                .map(|col| {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += s[(i, k)] * f[(k, col)];
                    }
                    acc
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

/// Iterative label spreading.
pub fn label_spread(s: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &PropagationConfig) -> Result<PropagationResult> {
    cfg.validate()?;
    if s.nrows() != s.ncols() || s.nrows() != y.nrows() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: S is {}x{}, Y is {}x{}",
            s.nrows(),
            s.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let base = y * (1.0 - cfg.alpha);
    let mut f = y.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let next = mul_sf(s, &f) * cfg.alpha + &base;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite score at iteration {}", iterations + 1)));
        }
        // S has spectral norm at most 1, so the update contracts by alpha
        // in the Frobenius norm and this bounds the max-abs distance to
        // the fixpoint.
        residual = cfg.alpha / (1.0 - cfg.alpha) * (&next - &f).norm();
        f = next;
        iterations += 1;
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    if f.nrows() == 0 {
        converged = true;
        residual = 0.0;
    }
    Ok(PropagationResult {
        hard: hard_labels(&f),
        f,
        iterations,
        converged,
        residual,
    })
}

/// Solves `(I - alpha S) F = (1 - alpha) Y` by dense LU.
pub fn closed_form(s: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if n > CLOSED_FORM_MAX_N {
        return Err(Error::InvalidInput(format!("closed form is capped at N = {CLOSED_FORM_MAX_N}")));
    }
    let a = DMatrix::<f64>::identity(n, n) - s * alpha;
    let b = y * (1.0 - alpha);
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular system in closed-form solve".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub assigned_positive: usize,
    pub expert_confirmed: usize,
    pub precision: Option<f64>,
}

impl PrecisionReport {
    /// Percentage truncated to two decimals, e.g. `"92.41%"`; `None` when
    /// nothing was assigned.
    pub fn percent(&self) -> Option<String> {
        if self.assigned_positive == 0 {
            return None;
        }
        let basis_points = self.expert_confirmed as u128 * 10_000 / self.assigned_positive as u128;
        Some(format!("{}.{:02}%", basis_points / 100, basis_points % 100))
    }
}

/// Precision of model-assigned positives against expert confirmations.
pub fn evaluate_precision<S: AsRef<str>>(assigned: &[S], confirmed: &[S]) -> Result<PrecisionReport> {
    let assigned: HashSet<&str> = assigned.iter().map(AsRef::as_ref).collect();
    let confirmed: HashSet<&str> = confirmed.iter().map(AsRef::as_ref).collect();
    if let Some(stray) = confirmed.iter().find(|c| !assigned.contains(*c)) {
        return Err(Error::InvalidInput(format!("confirmed id `{stray}` was never assigned positive")));
    }
    Ok(precision_from_counts(assigned.len(), confirmed.len()))
}

pub fn precision_from_counts(assigned: usize, confirmed: usize) -> PrecisionReport {
    PrecisionReport {
        assigned_positive: assigned,
        expert_confirmed: confirmed,
        precision: (assigned > 0).then(|| confirmed as f64 / assigned as f64),
    }
}

/// Stop-word-filtered token counts, descending, ties alphabetical.
pub fn top_terms<D: AsRef<[String]>>(docs: &[D], stopwords: &HashSet<String>, top_k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in docs {
        for t in d.as_ref() {
            if !stopwords.contains(t) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_owned(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    ranked
}

/// Everything needed to run one spread from points and seeds.
pub fn spread_points(
    ids: &[String],
    x: &[Vec<f64>],
    seeds: &LabelMatrix,
    kernel: KernelMeta,
    cfg: &PropagationConfig,
) -> Result<(PropagationResult, Vec<usize>)> {
    let graph = match kernel {
        KernelMeta::Rbf { gamma } => rbf_affinity(ids, x, gamma)?,
        KernelMeta::Knn { k, .. } => knn_affinity(ids, x, k)?,
    };
    let norm = normalize(&graph);
    let result = label_spread(&norm.s, &seed_matrix(seeds), cfg)?;
    Ok((result, norm.isolated))
}

/// Ids that were unseeded and came out positive, by descending positive score.
pub fn ranked_positives(ids: &[String], seeds: &LabelMatrix, result: &PropagationResult, exclude: &BTreeSet<&str>) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = (0..ids.len())
        .filter(|&i| !seeds.is_seeded(i) && !exclude.contains(ids[i].as_str()))
        .filter(|&i| result.hard[i] == HardLabel::Positive)
        .map(|i| (ids[i].clone(), result.f[(i, POSITIVE)]))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
