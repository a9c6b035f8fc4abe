//! Unsupervised filtering and the projection sanity check.
//!
//! Listings with no feature bit set are dropped. The filtered set can then
//! be checked against a sample of the dropped ones: project both to 2-D with
//! exact t-SNE, split the projection with 2-means, and measure how cleanly the
//! clusters line up with filtered/unfiltered membership.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_ids: Vec<String>,
    pub dropped_count: usize,
}

/// Keeps vectors with at least one bit set, in input order.
pub fn filter_corpus(vectors: &[FeatureVector]) -> FilterReport {
    let kept_ids: Vec<String> = vectors
        .iter()
        .filter(|v| v.any_set())
        .map(|v| v.listing_id.clone())
        .collect();
    FilterReport {
        input_count: vectors.len(),
        dropped_count: vectors.len() - kept_ids.len(),
        kept_ids,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidInput(format!(
            "k-means needs 1 <= k <= N (k = {k}, N = {})",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("points have mixed dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let step: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let changed = step.iter().zip(&assignments).any(|(s, a)| s.0 != *a);
        assignments = step.iter().map(|s| s.0).collect();
        inertia.push(step.iter().map(|s| s.1).sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        iterations,
        inertia,
    })
}

/// Agreement between a 2-way clustering and a binary labeling, under the
/// better of the two cluster-to-label matchings.
pub fn purity(assignments: &[usize], truth: &[bool]) -> f64 {
    assert_eq!(assignments.len(), truth.len(), "purity: length mismatch");
    if truth.is_empty() {
        return 1.0;
    }
    let agree = assignments
        .iter()
        .zip(truth)
        .filter(|(&a, &t)| (a == 1) == t)
        .count();
    agree.max(truth.len() - agree) as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1_000,
            seed: 0,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

pub const TSNE_MAX_POINTS: usize = 5_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// `(iteration, KL(P || Q))` recorded every 50 iterations and at the end.
    pub kl_trace: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace.iter().find(|(i, _)| *i == iteration).map(|(_, kl)| *kl)
    }
}

fn pairwise_sq_dists(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .par_iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b)).collect())
        .collect()
}

/// Conditional affinities for one row, bisecting the Gaussian precision until
/// the row's perplexity matches the target.
fn row_affinities(dists: &[f64], self_idx: usize, target_entropy: f64) -> Vec<f64> {
    let n = dists.len();
    let mut beta = 1.0;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut row = vec![0.0; n];
    // Shift by the nearest distance so exp() never underflows the whole row.
    let min_d = dists
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != self_idx)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..100 {
        let mut sum = 0.0;
        for j in 0..n {
            row[j] = if j == self_idx { 0.0 } else { (-(dists[j] - min_d) * beta).exp() };
            sum += row[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            if row[j] > 0.0 {
                row[j] /= sum;
                h -= row[j] * row[j].ln();
            }
        }
        let diff = h - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    row
}

/// Symmetrized joint affinities `P`, row-major `n x n`.
pub fn joint_affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let d = pairwise_sq_dists(points);
    let target = perplexity.ln();
    let cond: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| row_affinities(&d[i], i, target))
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }
    p
}

/// KL(P || Q) for an embedding under the Student-t kernel.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let num: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let dx = y[i][0] - y[j][0];
                        let dy = y[i][1] - y[j][1];
                        1.0 / (1.0 + dx * dx + dy * dy)
                    }
                })
                .collect()
        })
        .collect();
    let z: f64 = num.iter().map(|r| r.iter().sum::<f64>()).sum();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (num[i][j] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Exact O(N^2) t-SNE to two dimensions.
pub fn tsne_project(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = points.len();
    if n > TSNE_MAX_POINTS {
        return Err(Error::InvalidInput(format!("t-SNE is capped at {TSNE_MAX_POINTS} points")));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity.is_finite()) || 3.0 * cfg.perplexity >= n as f64 {
        if n >= 2 {
            return Err(Error::InvalidInput(format!(
                "perplexity {} infeasible for {n} points (needs 0 < perplexity < N/3)",
                cfg.perplexity
            )));
        }
    }
    if n < 2 {
        return Ok(TsneResult {
            coords: vec![[0.0, 0.0]; n],
            kl_trace: Vec::new(),
        });
    }

    let p = joint_affinities(points, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut kl_trace = Vec::new();

    for iter in 1..=cfg.iterations {
        let exaggeration = if iter <= cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter <= cfg.exaggeration_iters { 0.5 } else { 0.8 };

        let num: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let dx = y[i][0] - y[j][0];
                            let dy = y[i][1] - y[j][1];
                            1.0 / (1.0 + dx * dx + dy * dy)
                        }
                    })
                    .collect()
            })
            .collect();
        let z: f64 = num.iter().map(|r| r.iter().sum::<f64>()).sum();
        let grads: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = (exaggeration * p[i * n + j] - num[i][j] / z) * num[i][j];
                    g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * w * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();

        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grads[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8f64).max(0.01) } else { gains[i][d] + 0.2 };
                velocity[i][d] = momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grads[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in y.iter_mut() {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
        if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::Numerical(format!("t-SNE diverged at iteration {iter}")));
        }
        if iter % 50 == 0 || iter == cfg.iterations {
            kl_trace.push((iter, kl_divergence(&p, &y)));
        }
    }
    Ok(TsneResult { coords: y, kl_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub kmeans_assignment: Vec<usize>,
    pub in_filtered: Vec<bool>,
    pub purity: f64,
}

/// Samples up to `per_side` filtered and `per_side` dropped vectors, embeds
/// them, and scores 2-means on the embedding against membership.
pub fn projection_check(
    vectors: &[FeatureVector],
    per_side: usize,
    tsne: &TsneConfig,
    seed: u64,
) -> Result<ProjectionResult> {
    let (kept, dropped): (Vec<&FeatureVector>, Vec<&FeatureVector>) = vectors.iter().partition(|v| v.any_set());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pool: &[&FeatureVector]| -> Vec<usize> {
        let m = per_side.min(pool.len());
        let mut idx = sample(&mut rng, pool.len(), m).into_vec();
        idx.sort_unstable();
        idx
    };
    let kept_idx = pick(&kept);
    let dropped_idx = pick(&dropped);

    let mut ids = Vec::new();
    let mut pts = Vec::new();
    let mut in_filtered = Vec::new();
    for &i in &kept_idx {
        ids.push(kept[i].listing_id.clone());
        pts.push(kept[i].as_point());
        in_filtered.push(true);
    }
    for &i in &dropped_idx {
        ids.push(dropped[i].listing_id.clone());
        pts.push(dropped[i].as_point());
        in_filtered.push(false);
    }
    if pts.len() < 2 {
        return Err(Error::InvalidInput("projection needs at least two listings".into()));
    }
    let mut cfg = *tsne;
    // Keep the perplexity feasible on small samples.
    let cap = (pts.len() as f64 - 1.0) / 3.0;
    if cfg.perplexity >= cap {
        cfg.perplexity = cap.max(0.5) * 0.99;
    }
    let emb = tsne_project(&pts, &cfg)?;
    let coords: Vec<Vec<f64>> = emb.coords.iter().map(|c| c.to_vec()).collect();
    let km = kmeans(&coords, 2, seed, 300)?;
    Ok(ProjectionResult {
        purity: purity(&km.assignments, &in_filtered),
        ids,
        coords: emb.coords,
        kmeans_assignment: km.assignments,
        in_filtered,
    })
}

/// `id,x,y,cluster,in_filtered`.
pub fn write_projection_csv(path: &Path, proj: &ProjectionResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::artifact(path, e))?;
    w.write_record(["id", "x", "y", "cluster", "in_filtered"])
        .map_err(|e| Error::artifact(path, e))?;
    for i in 0..proj.ids.len() {
        w.write_record([
            proj.ids[i].clone(),
            proj.coords[i][0].to_string(),
            proj.coords[i][1].to_string(),
            proj.kmeans_assignment[i].to_string(),
            (proj.in_filtered[i] as u8).to_string(),
        ])
        .map_err(|e| Error::artifact(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_rule() {
        let mut only_weight = FeatureVector::from_bits("w", [false; 15]);
        only_weight.low_weight = true;
        let zero = FeatureVector::from_bits("z", [false; 15]);
        let r = filter_corpus(&[zero, only_weight]);
        assert_eq!(r.kept_ids, vec!["w"]);
        assert_eq!(r.dropped_count, 1);
        assert_eq!(r.input_count, 2);
    }

    #[test]
    fn kmeans_point_masses() {
        let mut pts = vec![vec![0.0, 0.0]; 100];
        pts.extend(vec![vec![10.0, 10.0]; 100]);
        let truth: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        let r = kmeans(&pts, 2, 5, 100).unwrap();
        assert_eq!(purity(&r.assignments, &truth), 1.0);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]];
        let r = kmeans(&pts, 1, 0, 10).unwrap();
        assert_eq!(r.centroids, vec![vec![2.0, 3.0]]);
        assert!(kmeans(&pts, 4, 0, 10).is_err());
        assert!(kmeans(&pts, 0, 0, 10).is_err());
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        for seed in 0..5 {
            let r = kmeans(&pts, 5, seed, 100).unwrap();
            for w in r.inertia.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia);
            }
        }
    }

    #[test]
    fn tsne_two_points() {
        let pts = vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let cfg = TsneConfig { perplexity: 0.5, iterations: 100, ..TsneConfig::default() };
        let r = tsne_project(&pts, &cfg).unwrap();
        assert_eq!(r.coords.len(), 2);
        assert!(r.coords.iter().flatten().all(|x| x.is_finite()));
        assert_ne!(r.coords[0], r.coords[1]);
    }

    #[test]
    fn tsne_rejects_infeasible_perplexity() {
        let pts = vec![vec![0.0]; 30];
        assert!(tsne_project(&pts, &TsneConfig::default()).is_err());
        assert!(tsne_project(&pts, &TsneConfig { perplexity: -1.0, ..TsneConfig::default() }).is_err());
    }

    #[test]
    fn purity_matching() {
        assert_eq!(purity(&[0, 0, 1, 1], &[true, true, false, false]), 1.0);
        assert_eq!(purity(&[0, 1, 0, 1], &[true, true, false, false]), 0.5);
        assert_eq!(purity(&[1, 1, 1, 0], &[true, true, false, false]), 0.75);
    }
}
