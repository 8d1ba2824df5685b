//! Unsupervised embedding refinement: pseudolabels from agglomerative
//! clustering, a square linear map tied across the four seasons, and a
//! bias-free linear classifier on the mapped embeddings, optimized jointly
//! by deterministic gradient descent.
//!
//! The map starts at identity, so stopping early degrades gracefully to the
//! unrefined pipeline. Only the map is meant to survive training; the probe
//! exists to shape it and is discarded by callers after the fact.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterAssignment, Linkage};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::matrix::{concat_columns, EmbeddingMatrix};
use crate::store;

/// A square D×D linear map applied identically to every season's embedding.
#[derive(Debug, Clone)]
pub struct LinearMap {
    w: Mat,
    init_scheme: String,
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    kind: String,
    d: usize,
    init_scheme: String,
}

impl LinearMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            w: Mat::identity(dim),
            init_scheme: "identity".into(),
        }
    }

    pub fn from_weights(dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {dim}x{dim} map",
                w.len()
            )));
        }
        if let Some(idx) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self {
            w: Mat::from_rows(dim, dim, w),
            init_scheme: "explicit".into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.w.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.w.data
    }

    pub fn init_scheme(&self) -> &str {
        &self.init_scheme
    }

    /// min/max singular value of the map. Full rank is monitored through
    /// this ratio, not enforced.
    pub fn singular_value_ratio(&self) -> f64 {
        let (sigma, _) = linalg::jacobi_svd_right(&self.w);
        match (sigma.first(), sigma.last()) {
            (Some(&max), Some(&min)) if max > 0.0 => min / max,
            _ => 0.0,
        }
    }

    /// Serializes as an EMB1-style container, kind `map1` (f32 payload).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = MapHeader {
            kind: "map1".into(),
            d: self.dim(),
            init_scheme: self.init_scheme.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        store::write_container(path.as_ref(), &header_bytes, &self.w.to_f32())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header_value, payload) = store::read_container(path.as_ref())?;
        store::expect_kind(&header_value, "map1")?;
        let header: MapHeader = serde_json::from_value(header_value)
            .map_err(|e| Error::InvalidHeader(e.to_string()))?;
        let expected = header.d * header.d;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        Ok(Self {
            w: Mat::from_rows(header.d, header.d, payload.iter().map(|&v| v as f64).collect()),
            init_scheme: header.init_scheme,
        })
    }
}

/// Bias-free classifier weights: one row per class, no intercept anywhere.
#[derive(Debug, Clone)]
pub struct ProbeWeights {
    w: Mat, // C x in_dim
}

impl ProbeWeights {
    pub fn zeros(n_classes: usize, in_dim: usize) -> Self {
        Self {
            w: Mat::zeros(n_classes, in_dim),
        }
    }

    /// Small-uniform init in (-scale, scale), filled row-major from a
    /// ChaCha8 stream, so two equal seeds give identical probes.
    pub fn seeded_uniform(n_classes: usize, in_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n_classes * in_dim)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Self {
            w: Mat::from_rows(n_classes, in_dim, data),
        }
    }

    pub fn from_weights(n_classes: usize, in_dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n_classes * in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {n_classes}x{in_dim} probe",
                w.len()
            )));
        }
        Ok(Self {
            w: Mat::from_rows(n_classes, in_dim, w),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.w.data
    }

    pub fn class_row(&self, c: usize) -> &[f64] {
        self.w.row(c)
    }
}

/// Training hyperparameters. The underlying procedure names none of these,
/// so they are all explicit here with documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch; `Some(b)` uses seeded shuffling.
    pub batch_size: Option<usize>,
    pub l2_penalty: f64,
    pub seed: u64,
    /// Cluster count for pseudolabel generation (pipeline-level use).
    pub n_pseudo_clusters: usize,
    /// 0.0 is plain gradient descent.
    pub momentum: f64,
    /// Diagnostic: keep the map at identity and train the probe alone.
    pub freeze_map: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 100,
            batch_size: None,
            l2_penalty: 1e-4,
            seed: 0,
            n_pseudo_clusters: 32,
            momentum: 0.0,
            freeze_map: false,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.l2_penalty < 0.0 {
            return Err(Error::InvalidConfig("l2_penalty must be >= 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of refinement: the trained map, the (discardable) probe, the
/// per-epoch loss trace, and the map's monitored conditioning.
#[derive(Debug, Clone)]
pub struct RefinerState {
    pub map: LinearMap,
    pub probe: ProbeWeights,
    pub loss_trace: Vec<f64>,
    pub map_sv_ratio: f64,
}

/// Gradients of the joint loss.
#[derive(Debug, Clone)]
pub struct Grads {
    /// D×D, row-major.
    pub map: Vec<f64>,
    /// C×(S·D), row-major.
    pub probe: Vec<f64>,
}

pub const PROBE_INIT_SCALE: f64 = 0.01;

/// Concatenates the four seasons (caller passes them in slot order:
/// spring, summer, fall, winter) and clusters the result bottom-up.
pub fn make_pseudolabels(
    seasons: &[EmbeddingMatrix],
    n_clusters: usize,
    linkage: Linkage,
) -> Result<ClusterAssignment> {
    if seasons.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "expected 4 seasons, got {}",
            seasons.len()
        )));
    }
    validate_seasons(seasons)?;
    let refs: Vec<&EmbeddingMatrix> = seasons.iter().collect();
    let combined = concat_columns(&refs)?;
    cluster::agglomerative_cluster(&combined, n_clusters, linkage)
}

fn validate_seasons(seasons: &[EmbeddingMatrix]) -> Result<()> {
    let first = seasons
        .first()
        .ok_or_else(|| Error::EmptyInput("no seasons".into()))?;
    for s in seasons.iter().skip(1) {
        if s.n_cols() != first.n_cols() {
            return Err(Error::ShapeMismatch(format!(
                "season {:?} has {} cols, expected {}",
                s.model_id(),
                s.n_cols(),
                first.n_cols()
            )));
        }
        if !first.rows_aligned_with(s) {
            return Err(Error::RowMismatch(format!(
                "season {:?} is not row-aligned",
                s.model_id()
            )));
        }
        if s.n_rows() != first.n_rows() {
            return Err(Error::RowMismatch("season row counts differ".into()));
        }
    }
    Ok(())
}

fn seasons_to_f64(seasons: &[EmbeddingMatrix]) -> Result<Vec<Mat>> {
    validate_seasons(seasons)?;
    Ok(seasons.iter().map(Mat::from_embedding).collect())
}

/// Logits of the tied-map model, N×C row-major.
#[derive(Debug, Clone)]
pub struct Logits {
    pub n_rows: usize,
    pub n_classes: usize,
    pub data: Vec<f64>,
}

/// logits = concat_s(x_s · Wᵀ) · Pᵀ. No bias is added anywhere.
pub fn forward(
    map: &LinearMap,
    probe: &ProbeWeights,
    seasons: &[EmbeddingMatrix],
) -> Result<Logits> {
    let xs = seasons_to_f64(seasons)?;
    check_dims(map, probe, &xs)?;
    let z = mapped_concat(&map.w, &xs);
    let logits = linalg::matmul_abt(&z, &probe.w);
    Ok(Logits {
        n_rows: logits.rows,
        n_classes: logits.cols,
        data: logits.data,
    })
}

fn check_dims(map: &LinearMap, probe: &ProbeWeights, xs: &[Mat]) -> Result<()> {
    let d = map.dim();
    for x in xs {
        if x.cols != d {
            return Err(Error::ShapeMismatch(format!(
                "season has {} cols, map expects {d}",
                x.cols
            )));
        }
    }
    if probe.in_dim() != xs.len() * d {
        return Err(Error::ShapeMismatch(format!(
            "probe expects {} inputs, seasons provide {}",
            probe.in_dim(),
            xs.len() * d
        )));
    }
    Ok(())
}

/// Z = [x_1 Wᵀ | x_2 Wᵀ | ... ] (N × S·D).
fn mapped_concat(w: &Mat, xs: &[Mat]) -> Mat {
    let n = xs[0].rows;
    let d = w.rows;
    let s = xs.len();
    let mut z = Mat::zeros(n, s * d);
    for (si, x) in xs.iter().enumerate() {
        let zs = linalg::matmul_abt(x, w);
        for i in 0..n {
            z.row_mut(i)[si * d..(si + 1) * d].copy_from_slice(zs.row(i));
        }
    }
    z
}

/// Joint loss and exact analytic gradients.
///
/// Loss is the mean softmax cross-entropy over samples plus
/// `l2 · (‖W‖²_F + ‖P‖²_F) / 2`. The map gradient accumulates contributions
/// from every season, since the weights are tied.
pub fn loss_and_grads(
    map: &LinearMap,
    probe: &ProbeWeights,
    seasons: &[EmbeddingMatrix],
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Grads)> {
    let xs = seasons_to_f64(seasons)?;
    check_dims(map, probe, &xs)?;
    loss_and_grads_inner(&map.w, &probe.w, &xs, labels, l2)
}

fn loss_and_grads_inner(
    w: &Mat,
    p: &Mat,
    xs: &[Mat],
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Grads)> {
    let n = xs[0].rows;
    let c = p.rows;
    let d = w.rows;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no samples".into()));
    }

    let z = mapped_concat(w, xs); // N x SD
    let logits = linalg::matmul_abt(&z, p); // N x C

    // Stable softmax cross-entropy plus dLoss/dLogits.
    let mut loss = 0.0f64;
    let mut g = Mat::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        loss += lse - row[labels[i]];
        let grow = g.row_mut(i);
        for j in 0..c {
            grow[j] = (row[j] - lse).exp();
        }
        grow[labels[i]] -= 1.0;
    }
    loss /= n as f64;
    g.scale(1.0 / n as f64);
    loss += 0.5 * l2 * (w.frobenius_sq() + p.frobenius_sq());

    // grad_P = Gᵀ Z + l2 P
    let mut grad_p = linalg::matmul_atb(&g, &z);
    grad_p.add_scaled(p, l2);

    // grad_Z = G P, split per season; grad_W = Σ_s gz_sᵀ x_s + l2 W
    let grad_z = linalg::matmul(&g, p); // N x SD
    let mut grad_w = Mat::zeros(d, d);
    for (si, x) in xs.iter().enumerate() {
        let mut gz = Mat::zeros(n, d);
        for i in 0..n {
            gz.row_mut(i)
                .copy_from_slice(&grad_z.row(i)[si * d..(si + 1) * d]);
        }
        let contrib = linalg::matmul_atb(&gz, x);
        grad_w.add_scaled(&contrib, 1.0);
    }
    grad_w.add_scaled(w, l2);

    Ok((
        loss,
        Grads {
            map: grad_w.data,
            probe: grad_p.data,
        },
    ))
}

fn loss_only(w: &Mat, p: &Mat, xs: &[Mat], labels: &[usize], l2: f64) -> f64 {
    let z = mapped_concat(w, xs);
    let logits = linalg::matmul_abt(&z, p);
    let n = xs[0].rows;
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += max + denom.ln() - row[labels[i]];
    }
    loss / n as f64 + 0.5 * l2 * (w.frobenius_sq() + p.frobenius_sq())
}

/// Gradient descent from map = identity and a seeded small-uniform probe.
///
/// The loss trace records the full objective on the complete data set at the
/// start of each epoch, before that epoch's updates. Deterministic for a
/// fixed config; aborts with a diagnostic if the loss leaves the finite
/// range.
pub fn train_refiner(
    seasons: &[EmbeddingMatrix],
    labels: &[usize],
    cfg: &RefinerConfig,
) -> Result<RefinerState> {
    cfg.validate()?;
    let xs = seasons_to_f64(seasons)?;
    let n = xs[0].rows;
    if n == 0 {
        return Err(Error::EmptyInput("no samples".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let d = xs[0].cols;
    let s = xs.len();
    let c = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    if c < 2 {
        return Err(Error::DegenerateTargets(
            "pseudolabels contain fewer than 2 classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Mat::identity(d);
    let init: Vec<f64> = (0..c * s * d)
        .map(|_| rng.random_range(-PROBE_INIT_SCALE..PROBE_INIT_SCALE))
        .collect();
    let mut p = Mat::from_rows(c, s * d, init);

    let mut vel_w = Mat::zeros(d, d);
    let mut vel_p = Mat::zeros(c, s * d);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        match cfg.batch_size {
            None => {
                let (loss, grads) = loss_and_grads_inner(&w, &p, &xs, labels, cfg.l2_penalty)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(epoch));
                }
                trace.push(loss);
                apply_update(
                    &mut w,
                    &mut p,
                    &mut vel_w,
                    &mut vel_p,
                    &grads,
                    cfg,
                );
            }
            Some(batch) => {
                let loss = loss_only(&w, &p, &xs, labels, cfg.l2_penalty);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(epoch));
                }
                trace.push(loss);
                let mut order: Vec<usize> = (0..n).collect();
                // Fisher-Yates on the config stream keeps runs bit-identical.
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                for chunk in order.chunks(batch) {
                    let (bxs, blabels) = gather_batch(&xs, labels, chunk);
                    let (bloss, grads) =
                        loss_and_grads_inner(&w, &p, &bxs, &blabels, cfg.l2_penalty)?;
                    if !bloss.is_finite() {
                        return Err(Error::NonFiniteLoss(epoch));
                    }
                    apply_update(&mut w, &mut p, &mut vel_w, &mut vel_p, &grads, cfg);
                }
            }
        }
    }

    let map = LinearMap {
        w,
        init_scheme: "identity".into(),
    };
    let map_sv_ratio = map.singular_value_ratio();
    Ok(RefinerState {
        probe: ProbeWeights { w: p },
        map,
        loss_trace: trace,
        map_sv_ratio,
    })
}

fn gather_batch(xs: &[Mat], labels: &[usize], idx: &[usize]) -> (Vec<Mat>, Vec<usize>) {
    let d = xs[0].cols;
    let bxs: Vec<Mat> = xs
        .iter()
        .map(|x| {
            let mut b = Mat::zeros(idx.len(), d);
            for (bi, &i) in idx.iter().enumerate() {
                b.row_mut(bi).copy_from_slice(x.row(i));
            }
            b
        })
        .collect();
    let blabels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    (bxs, blabels)
}

fn apply_update(
    w: &mut Mat,
    p: &mut Mat,
    vel_w: &mut Mat,
    vel_p: &mut Mat,
    grads: &Grads,
    cfg: &RefinerConfig,
) {
    if !cfg.freeze_map {
        for ((v, &g), wv) in vel_w.data.iter_mut().zip(&grads.map).zip(&mut w.data) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *wv += *v;
        }
    }
    for ((v, &g), pv) in vel_p.data.iter_mut().zip(&grads.probe).zip(&mut p.data) {
        *v = cfg.momentum * *v - cfg.learning_rate * g;
        *pv += *v;
    }
}

/// x · Wᵀ, same shape as the input; identity metadata is carried over.
pub fn apply_linear_map(map: &LinearMap, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if x.n_cols() != map.dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} cols, map expects {}",
            x.n_cols(),
            map.dim()
        )));
    }
    let out = linalg::matmul_abt(&Mat::from_embedding(x), &map.w);
    let mut m = EmbeddingMatrix::new(x.model_id(), x.n_rows(), x.n_cols(), out.to_f32())?;
    if let Some(season) = x.season() {
        m = m.with_season(season);
    }
    if let Some(ids) = x.row_ids() {
        m = m.with_row_ids(ids.to_vec())?;
    }
    Ok(m)
}
