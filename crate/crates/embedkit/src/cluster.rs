//! Clustering instruments: k-means with k-means++ seeding, silhouette
//! scoring, bottom-up agglomerative clustering, and the per-dimension
//! compression quality report.
//!
//! All operations are deterministic given their inputs and seed. Distances
//! are Euclidean; silhouette additionally accepts a cosine metric.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;
use crate::svd;

/// Hard cap for the O(N²)-memory agglomerative path.
pub const AGGLOMERATIVE_MAX_POINTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    pub inertia: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignment: ClusterAssignment,
    /// k × dim centroid coordinates, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub n_iter: usize,
    /// Inertia recorded after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Average,
    Complete,
    Single,
}

impl std::str::FromStr for Linkage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ward" => Ok(Linkage::Ward),
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            other => Err(Error::InvalidConfig(format!("unknown linkage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

fn metric_distance(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => squared_distance(a, b).sqrt(),
        Metric::Cosine => {
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for (&x, &y) in a.iter().zip(b) {
                dot += x as f64 * y as f64;
                na += (x as f64) * (x as f64);
                nb += (y as f64) * (y as f64);
            }
            if na == 0.0 || nb == 0.0 {
                // Zero vectors carry no direction; treat as maximally distant.
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}

/// Lloyd's algorithm from k-means++ initialization.
///
/// Assignment ties go to the lowest centroid index and clusters left empty
/// keep their previous centroid, so the run is fully deterministic for a
/// fixed `(x, k, seed)`. Stops when the largest centroid shift drops below
/// `tol` or after `max_iter` iterations.
pub fn kmeans(
    x: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansResult> {
    let n = x.n_rows();
    let dim = x.n_cols();
    if n == 0 || dim == 0 {
        return Err(Error::EmptyInput("kmeans on empty matrix".into()));
    }
    if k == 0 || k > n {
        return Err(Error::ClusterCountOutOfRange(format!("k={k}, n={n}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
    }
    if tol < 0.0 {
        return Err(Error::InvalidConfig("tol must be >= 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(x, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut inertia_history = Vec::new();
    let mut n_iter = 0;

    for iter in 0..max_iter {
        n_iter = iter + 1;
        // Assignment step.
        let mut inertia = 0.0f64;
        for i in 0..n {
            let row = x.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
                let d = sq_dist_f64(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
            inertia += best_d;
        }
        inertia_history.push(inertia);

        // Update step.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i];
            counts[c] += 1;
            let row = x.row(i);
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let inv = 1.0 / counts[c] as f64;
            let mut shift_sq = 0.0f64;
            for j in 0..dim {
                let new = sums[c * dim + j] * inv;
                let old = centroids[c * dim + j];
                shift_sq += (new - old) * (new - old);
                centroids[c * dim + j] = new;
            }
            max_shift = max_shift.max(shift_sq.sqrt());
        }
        if max_shift < tol {
            break;
        }
    }

    // Final assignment against the converged centroids.
    let mut inertia = 0.0f64;
    for i in 0..n {
        let row = x.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let d = sq_dist_f64(row, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        inertia += best_d;
    }
    inertia_history.push(inertia);

    Ok(KmeansResult {
        assignment: ClusterAssignment {
            labels,
            n_clusters: k,
            inertia: Some(inertia),
        },
        centroids,
        dim,
        n_iter,
        inertia_history,
    })
}

fn sq_dist_f64(row: &[f32], centroid: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in row.iter().zip(centroid) {
        let d = a as f64 - b;
        acc += d * d;
    }
    acc
}

/// k-means++ seeding: first centre uniform, each next drawn with probability
/// proportional to squared distance from the nearest chosen centre. When all
/// remaining distances are zero the smallest unchosen index is taken.
fn kmeans_pp_init(x: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.n_rows();
    let dim = x.n_cols();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend(x.row(first).iter().map(|&v| v as f64));

    let mut dist_sq: Vec<f64> = (0..n)
        .map(|i| squared_distance(x.row(i), x.row(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = dist_sq.iter().sum();
        let next = if total > 0.0 {
            let r = rng.random_range(0.0..1.0) * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                cum += d;
                if cum > r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[next] = true;
        centroids.extend(x.row(next).iter().map(|&v| v as f64));
        for i in 0..n {
            let d = squared_distance(x.row(i), x.row(next));
            if d < dist_sq[i] {
                dist_sq[i] = d;
            }
        }
    }
    centroids
}

/// Mean silhouette over all samples, Euclidean metric.
pub fn silhouette_score(x: &EmbeddingMatrix, labels: &[usize]) -> Result<f64> {
    silhouette_score_with_metric(x, labels, Metric::Euclidean)
}

/// Mean over samples of `(b - a) / max(a, b)`, where `a` is the mean
/// intra-cluster distance (excluding self) and `b` the smallest mean distance
/// to another cluster. Samples in singleton clusters contribute 0, and the
/// degenerate 0/0 case is defined as 0.
pub fn silhouette_score_with_metric(
    x: &EmbeddingMatrix,
    labels: &[usize],
    metric: Metric,
) -> Result<f64> {
    let n = x.n_rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n < 3 {
        return Err(Error::EmptyInput(format!(
            "silhouette needs at least 3 samples, got {n}"
        )));
    }
    let k = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let populated = counts.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::ClusterCountOutOfRange(
            "silhouette needs at least 2 non-empty clusters".into(),
        ));
    }
    if populated > n {
        return Err(Error::ClusterCountOutOfRange(format!(
            "{populated} clusters for {n} points"
        )));
    }

    let mut total = 0.0f64;
    let mut sums = vec![0.0f64; k];
    for i in 0..n {
        sums.fill(0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            sums[labels[j]] += metric_distance(x.row(i), x.row(j), metric);
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue; // singleton contributes 0
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c == own || counts[c] == 0 {
                continue;
            }
            let mean = sums[c] / counts[c] as f64;
            if mean < b {
                b = mean;
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        } // a == b == 0 contributes 0
    }
    Ok(total / n as f64)
}

/// Bottom-up agglomerative clustering with the Lance–Williams update.
///
/// Euclidean dissimilarities (squared for Ward); at each step the closest
/// active pair merges, ties broken by the smallest `(i, j)` pair index.
/// Output labels are renumbered by first sample occurrence, so the result is
/// deterministic.
pub fn agglomerative_cluster(
    x: &EmbeddingMatrix,
    n_clusters: usize,
    linkage: Linkage,
) -> Result<ClusterAssignment> {
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyInput("agglomerative_cluster on empty matrix".into()));
    }
    if n > AGGLOMERATIVE_MAX_POINTS {
        return Err(Error::InputTooLarge(format!(
            "{n} points exceeds the {AGGLOMERATIVE_MAX_POINTS}-point agglomerative cap"
        )));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::ClusterCountOutOfRange(format!(
            "n_clusters={n_clusters}, n={n}"
        )));
    }

    // Pairwise dissimilarity matrix: squared Euclidean for Ward (the LW ward
    // recurrence is exact on squared distances), plain Euclidean otherwise.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sq = squared_distance(x.row(i), x.row(j));
            let d = if linkage == Linkage::Ward { sq } else { sq.sqrt() };
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut n_active = n;

    while n_active > n_clusters {
        // Closest active pair, first (i, j) in lexicographic order wins ties.
        let mut best = (usize::MAX, usize::MAX);
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i * n + j];
                if d < best_d {
                    best_d = d;
                    best = (i, j);
                }
            }
        }
        let (i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        let d_ij = dist[i * n + j];

        // Merge j into i; update d(i, k) for every other active k.
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let d_ik = dist[i * n + k];
            let d_jk = dist[j * n + k];
            let nk = size[k] as f64;
            let updated = match linkage {
                Linkage::Single => d_ik.min(d_jk),
                Linkage::Complete => d_ik.max(d_jk),
                Linkage::Average => (ni * d_ik + nj * d_jk) / (ni + nj),
                Linkage::Ward => {
                    ((ni + nk) * d_ik + (nj + nk) * d_jk - nk * d_ij) / (ni + nj + nk)
                }
            };
            dist[i * n + k] = updated;
            dist[k * n + i] = updated;
        }
        size[i] += size[j];
        active[j] = false;
        parent[j] = i;
        n_active -= 1;
    }

    // Resolve roots and renumber by first occurrence.
    let mut root_of = vec![0usize; n];
    for s in 0..n {
        let mut r = s;
        while parent[r] != r {
            r = parent[r];
        }
        root_of[s] = r;
    }
    let mut label_of_root = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(n);
    for &r in &root_of {
        let next = label_of_root.len();
        let l = *label_of_root.entry(r).or_insert(next);
        labels.push(l);
    }

    Ok(ClusterAssignment {
        labels,
        n_clusters,
        inertia: None,
    })
}

/// One row of a [`QualityReport`]: the quality instruments at one target
/// dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityRow {
    pub dim: usize,
    pub mse: f64,
    pub silhouette: f64,
    pub silhouette_delta: f64,
}

/// Pre- vs post-compression quality at a set of target dimensions: the
/// reconstruction MSE and the silhouette of k-means labels on the compressed
/// data against the uncompressed baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub model_id: String,
    pub k_clusters: usize,
    pub seed: u64,
    pub silhouette_baseline: f64,
    pub rows: Vec<QualityRow>,
}

const QUALITY_KMEANS_MAX_ITER: usize = 100;
const QUALITY_KMEANS_TOL: f64 = 1e-7;

/// Scores each candidate target dimension. Rows come back sorted by
/// dimension ascending. The baseline silhouette is k-means on the
/// uncompressed input with the same seed.
pub fn compression_quality(
    x: &EmbeddingMatrix,
    target_dims: &[usize],
    k_clusters: usize,
    seed: u64,
) -> Result<QualityReport> {
    let base = kmeans(x, k_clusters, seed, QUALITY_KMEANS_MAX_ITER, QUALITY_KMEANS_TOL)?;
    let silhouette_baseline = silhouette_score(x, &base.assignment.labels)?;

    let mut dims: Vec<usize> = target_dims.to_vec();
    dims.sort_unstable();
    dims.dedup();

    let mut rows = Vec::with_capacity(dims.len());
    for &dim in &dims {
        let model = svd::fit_truncated_svd(x, dim, seed)?;
        let z = model.transform(x)?;
        let x_hat = model.reconstruct(&z)?;
        let mse = svd::reconstruction_mse(x, &x_hat)?;
        let km = kmeans(&z, k_clusters, seed, QUALITY_KMEANS_MAX_ITER, QUALITY_KMEANS_TOL)?;
        let silhouette = silhouette_score(&z, &km.assignment.labels)?;
        rows.push(QualityRow {
            dim,
            mse,
            silhouette,
            silhouette_delta: silhouette - silhouette_baseline,
        });
    }
    Ok(QualityReport {
        model_id: x.model_id().to_string(),
        k_clusters,
        seed,
        silhouette_baseline,
        rows,
    })
}
