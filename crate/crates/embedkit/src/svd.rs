//! Deterministic truncated SVD: the compression primitive.
//!
//! No mean-centering is applied before factorization — this matches the
//! TruncatedSVD convention and differs from PCA; centering first would change
//! every result downstream.
//!
//! Small problems (min(n_rows, n_cols) <= 256) use an exact one-sided Jacobi
//! SVD. Larger ones use a seeded randomized range finder with oversampling 10
//! and two power iterations, which keeps fits reproducible for a fixed
//! `(x, k, seed)` at any scale. Component rows are sign-canonicalized (first
//! nonzero entry positive) so two equal fits are bit-comparable.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::matrix::EmbeddingMatrix;
use crate::store;

/// Problem sizes at or below this use the exact dense path.
pub const DENSE_FALLBACK_MAX: usize = 256;

const OVERSAMPLE: usize = 10;
const POWER_ITERATIONS: usize = 2;

/// A fitted truncated-SVD factorization: `k` orthonormal right-singular
/// vectors of the fitting data (rows of `components`) plus their singular
/// values.
#[derive(Debug, Clone)]
pub struct SvdModel {
    components: Mat, // k x D, rows orthonormal
    singular_values: Vec<f64>,
    input_dim: usize,
    target_dim: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SvdHeader {
    kind: String,
    k: usize,
    d: usize,
    seed: u64,
}

impl SvdModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Row `i` is the i-th right singular vector (length `input_dim`).
    pub fn component(&self, i: usize) -> &[f64] {
        self.components.row(i)
    }

    /// Projects `x` onto the top-k singular directions: returns `x · Vᵀ`
    /// (n_rows × k). Model identity and row ids are carried over.
    pub fn transform(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.n_cols() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "transform input has {} cols, model expects {}",
                x.n_cols(),
                self.input_dim
            )));
        }
        let z = linalg::matmul_abt(&Mat::from_embedding(x), &self.components);
        let mut out = EmbeddingMatrix::new(x.model_id(), x.n_rows(), self.target_dim, z.to_f32())?;
        if let Some(season) = x.season() {
            out = out.with_season(season);
        }
        if let Some(ids) = x.row_ids() {
            out = out.with_row_ids(ids.to_vec())?;
        }
        Ok(out)
    }

    /// Maps compressed rows back into the original space: `z · V`
    /// (n_rows × input_dim).
    pub fn reconstruct(&self, z: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if z.n_cols() != self.target_dim {
            return Err(Error::ShapeMismatch(format!(
                "reconstruct input has {} cols, model expects {}",
                z.n_cols(),
                self.target_dim
            )));
        }
        let x = linalg::matmul(&Mat::from_embedding(z), &self.components);
        let mut out = EmbeddingMatrix::new(z.model_id(), z.n_rows(), self.input_dim, x.to_f32())?;
        if let Some(season) = z.season() {
            out = out.with_season(season);
        }
        if let Some(ids) = z.row_ids() {
            out = out.with_row_ids(ids.to_vec())?;
        }
        Ok(out)
    }

    /// Serializes as an EMB1-style container, kind `svd1`: header carries
    /// (k, D, seed); payload is the k×D components followed by the k
    /// singular values, all f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = SvdHeader {
            kind: "svd1".into(),
            k: self.target_dim,
            d: self.input_dim,
            seed: self.seed,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut payload = self.components.to_f32();
        payload.extend(self.singular_values.iter().map(|&v| v as f32));
        store::write_container(path.as_ref(), &header_bytes, &payload)
    }

    /// Loads a `svd1` container. Components round-trip through f32 storage,
    /// so reloaded models match saved ones to f32 precision.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header_value, payload) = store::read_container(path.as_ref())?;
        store::expect_kind(&header_value, "svd1")?;
        let header: SvdHeader = serde_json::from_value(header_value)
            .map_err(|e| Error::InvalidHeader(e.to_string()))?;
        let expected = header.k * header.d + header.k;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        let comp_data: Vec<f64> = payload[..header.k * header.d]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let singular_values: Vec<f64> = payload[header.k * header.d..]
            .iter()
            .map(|&v| v as f64)
            .collect();
        for pair in singular_values.windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::InvalidHeader(
                    "singular values are not non-increasing".into(),
                ));
            }
        }
        if singular_values.last().is_some_and(|&s| s < 0.0) {
            return Err(Error::InvalidHeader("negative singular value".into()));
        }
        Ok(Self {
            components: Mat::from_rows(header.k, header.d, comp_data),
            singular_values,
            input_dim: header.d,
            target_dim: header.k,
            seed: header.seed,
        })
    }
}

/// Fits the top-k singular directions of `x` without mean-centering.
/// Deterministic for fixed `(x, k, seed)`.
pub fn fit_truncated_svd(x: &EmbeddingMatrix, k: usize, seed: u64) -> Result<SvdModel> {
    let (n, d) = (x.n_rows(), x.n_cols());
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput("fit_truncated_svd on empty matrix".into()));
    }
    let max_k = n.min(d);
    if k == 0 || k > max_k {
        return Err(Error::KOutOfRange { k, max: max_k });
    }
    let a = Mat::from_embedding(x);
    let (mut sigma, mut vt) = if max_k <= DENSE_FALLBACK_MAX {
        let (s, v) = linalg::jacobi_svd_right(&a);
        (s, v)
    } else {
        randomized_right_svd(&a, k, seed)
    };
    sigma.truncate(k);
    vt = truncate_rows(vt, k);
    canonicalize_signs(&mut vt);
    Ok(SvdModel {
        components: vt,
        singular_values: sigma,
        input_dim: d,
        target_dim: k,
        seed,
    })
}

fn truncate_rows(m: Mat, k: usize) -> Mat {
    let cols = m.cols;
    let mut data = m.data;
    data.truncate(k * cols);
    Mat::from_rows(k, cols, data)
}

/// Flip each row so its first nonzero entry is positive.
fn canonicalize_signs(components: &mut Mat) {
    for i in 0..components.rows {
        let row = components.row_mut(i);
        if let Some(&lead) = row.iter().find(|&&v| v != 0.0) {
            if lead < 0.0 {
                for v in row {
                    *v = -*v;
                }
            }
        }
    }
}

/// Halko-style randomized range finder: Gaussian sketch with oversampling,
/// two QR-stabilized power iterations, then an exact SVD of the projected
/// (k+10) × D matrix.
fn randomized_right_svd(a: &Mat, k: usize, seed: u64) -> (Vec<f64>, Mat) {
    let (n, d) = (a.rows, a.cols);
    let l = (k + OVERSAMPLE).min(n.min(d));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = Mat::zeros(d, l);
    for v in &mut omega.data {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let mut q = linalg::thin_q(&linalg::matmul(a, &omega)); // n x l
    for _ in 0..POWER_ITERATIONS {
        let z = linalg::thin_q(&linalg::matmul_atb(a, &q)); // d x l
        q = linalg::thin_q(&linalg::matmul(a, &z)); // n x l
    }
    let b = linalg::matmul_atb(&q, a); // l x d
    let (sigma, v) = linalg::jacobi_svd_right(&b);
    (sigma, v)
}

/// Mean squared elementwise difference, accumulated in f64.
pub fn reconstruction_mse(x: &EmbeddingMatrix, x_hat: &EmbeddingMatrix) -> Result<f64> {
    if x.n_rows() != x_hat.n_rows() || x.n_cols() != x_hat.n_cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            x.n_rows(),
            x.n_cols(),
            x_hat.n_rows(),
            x_hat.n_cols()
        )));
    }
    let count = x.data().len();
    if count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let diff = a as f64 - b as f64;
        acc += diff * diff;
    }
    Ok(acc / count as f64)
}

/// Fit, transform, reconstruct, and measure in one call.
pub fn compress_mse(x: &EmbeddingMatrix, k: usize, seed: u64) -> Result<f64> {
    let model = fit_truncated_svd(x, k, seed)?;
    let z = model.transform(x)?;
    let x_hat = model.reconstruct(&z)?;
    reconstruction_mse(x, &x_hat)
}
