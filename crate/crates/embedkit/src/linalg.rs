//! Internal dense f64 kernels: row-major matrices, products, Householder QR,
//! one-sided Jacobi SVD, and a Cholesky solver.
//!
//! Everything here runs sequentially with a fixed accumulation order, so
//! results are bit-identical across runs and independent of thread count.

use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_embedding(m: &EmbeddingMatrix) -> Self {
        Self {
            rows: m.n_rows(),
            cols: m.n_cols(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// C = A · B
pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// C = A · Bᵀ
pub(crate) fn matmul_abt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            c.data[i * b.rows + j] = acc;
        }
    }
    c
}

/// C = Aᵀ · B
pub(crate) fn matmul_atb(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut c = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                crow[j] += aki * brow[j];
            }
        }
    }
    c
}

/// Thin Q of the Householder QR of `a` (requires rows >= cols). Columns of
/// the result are orthonormal; zero columns in the input produce canonical
/// completion via the skipped-reflector convention.
pub(crate) fn thin_q(a: &Mat) -> Mat {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "thin_q requires rows >= cols");
    let mut r = a.clone();
    // Reflector j: v (length m - j) and beta.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * norm;
        let vtv: f64 = v.iter().map(|&x| x * x).sum();
        let beta = 2.0 / vtv;
        // Apply H = I - beta v vᵀ to R[j.., j..].
        for col in j..n {
            let mut dot = 0.0;
            for (t, &vt) in v.iter().enumerate() {
                dot += vt * r.get(j + t, col);
            }
            let f = beta * dot;
            for (t, &vt) in v.iter().enumerate() {
                let cur = r.get(j + t, col);
                r.set(j + t, col, cur - f * vt);
            }
        }
        reflectors.push((v, beta));
    }
    // Q = H_0 ... H_{n-1} applied to the first n columns of I_m.
    let mut q = Mat::zeros(m, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for j in (0..n).rev() {
        let (v, beta) = &reflectors[j];
        if *beta == 0.0 {
            continue;
        }
        for col in 0..n {
            let mut dot = 0.0;
            for (t, &vt) in v.iter().enumerate() {
                dot += vt * q.get(j + t, col);
            }
            let f = beta * dot;
            for (t, &vt) in v.iter().enumerate() {
                let cur = q.get(j + t, col);
                q.set(j + t, col, cur - f * vt);
            }
        }
    }
    q
}

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-14;

/// Right singular structure of `a` by one-sided Jacobi.
///
/// Returns `(singular_values, right_vectors)` with `min(rows, cols)` entries,
/// singular values sorted non-increasing and the i-th row of `right_vectors`
/// holding the corresponding right singular vector (length `a.cols`). The
/// rows are orthonormal even when `a` is rank deficient.
pub(crate) fn jacobi_svd_right(a: &Mat) -> (Vec<f64>, Mat) {
    if a.rows >= a.cols {
        jacobi_tall(a)
    } else {
        jacobi_wide(a)
    }
}

/// Case rows >= cols: rotate columns of a working copy, accumulate V. V stays
/// exactly orthogonal, so rank deficiency needs no special handling.
fn jacobi_tall(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.cols;
    let mut w = a.clone();
    let mut v = Mat::identity(n);
    jacobi_orthogonalize_columns(&mut w, Some(&mut v));

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| column_norm(&w, j))
        .collect();
    let order = sort_desc_indices(&sigma);
    sigma = order.iter().map(|&j| sigma[j]).collect();
    let mut rows = Mat::zeros(n, n);
    for (out_i, &j) in order.iter().enumerate() {
        for t in 0..n {
            rows.data[out_i * n + t] = v.get(t, j);
        }
    }
    (sigma, rows)
}

/// Case rows < cols: run on the transpose. Right singular vectors of `a` are
/// the normalized rotated columns; zero-σ columns are completed with
/// canonical basis vectors orthogonalized against the rest.
fn jacobi_wide(a: &Mat) -> (Vec<f64>, Mat) {
    let b = a.transpose(); // cols x rows
    let n = b.cols; // == a.rows == min(m, n)
    let dim = b.rows; // == a.cols
    let mut w = b;
    jacobi_orthogonalize_columns(&mut w, None);

    let mut sigma: Vec<f64> = (0..n).map(|j| column_norm(&w, j)).collect();
    let order = sort_desc_indices(&sigma);
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let scale = sigma.first().copied().unwrap_or(0.0);
    let cutoff = scale * 1e-13;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank_i, &j) in order.iter().enumerate() {
        if sigma[rank_i] > cutoff {
            let mut col: Vec<f64> = (0..dim).map(|t| w.get(t, j)).collect();
            let norm = sigma[rank_i];
            for x in &mut col {
                *x /= norm;
            }
            vectors.push(col);
        } else {
            vectors.push(Vec::new()); // placeholder, completed below
        }
    }
    complete_orthonormal(&mut vectors, dim);

    let mut rows = Mat::zeros(n, dim);
    for (i, vec) in vectors.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(vec);
    }
    (sigma, rows)
}

fn column_norm(w: &Mat, j: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..w.rows {
        let x = w.get(i, j);
        acc += x * x;
    }
    acc.sqrt()
}

/// Cyclic one-sided Jacobi sweeps until all column pairs are numerically
/// orthogonal. Optionally accumulates the applied rotations into `v`.
fn jacobi_orthogonalize_columns(w: &mut Mat, mut v: Option<&mut Mat>) {
    let n = w.cols;
    if n < 2 {
        return;
    }
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..w.rows {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                if rel > off {
                    off = rel;
                }
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(w, p, q, c, s);
                if let Some(vm) = v.as_deref_mut() {
                    rotate_columns(vm, p, q, c, s);
                }
            }
        }
        if off <= JACOBI_TOL {
            break;
        }
    }
}

/// In-place right rotation of columns (p, q): new_p = c·p − s·q,
/// new_q = s·p + c·q.
fn rotate_columns(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    for i in 0..m.rows {
        let base = i * cols;
        let vp = m.data[base + p];
        let vq = m.data[base + q];
        m.data[base + p] = c * vp - s * vq;
        m.data[base + q] = s * vp + c * vq;
    }
}

fn sort_desc_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j)));
    idx
}

/// Fills empty placeholder vectors with canonical basis vectors
/// orthogonalized (twice, for stability) against all finished rows.
fn complete_orthonormal(vectors: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0usize;
    for i in 0..vectors.len() {
        if !vectors[i].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < dim, "ran out of basis vectors during completion");
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in vectors.iter().filter(|o| !o.is_empty()) {
                    let dot: f64 = v.iter().zip(other.iter()).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in v.iter_mut().zip(other.iter()) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in &mut v {
                    *x /= norm;
                }
                vectors[i] = v;
                break;
            }
        }
    }
}

/// Solves (symmetric positive definite) A x = b by Cholesky. Fails with
/// `SingularSystem` when a pivot collapses relative to the diagonal scale.
pub(crate) fn cholesky_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(b.len(), a.rows);
    let n = a.rows;
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0f64, f64::max);
    let floor = if max_diag > 0.0 { max_diag * 1e-12 } else { 0.0 };
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= floor {
                    return Err(Error::SingularSystem(format!(
                        "Cholesky pivot {sum:.3e} at row {i} (scale {max_diag:.3e})"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::from_rows(rows, cols, data)
    }

    #[test]
    fn matmul_small_known() {
        let a = Mat::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_rows(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        let c2 = matmul_abt(&a, &b.transpose());
        assert_eq!(c2.data, c.data);
        let c3 = matmul_atb(&a.transpose(), &b);
        assert_eq!(c3.data, c.data);
    }

    #[test]
    fn thin_q_is_orthonormal() {
        let a = random_mat(20, 7, 3);
        let q = thin_q(&a);
        let qtq = matmul_atb(&q, &q);
        for i in 0..7 {
            for j in 0..7 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (qtq.get(i, j) - expect).abs() < 1e-12,
                    "QtQ[{i},{j}] = {}",
                    qtq.get(i, j)
                );
            }
        }
    }

    #[test]
    fn thin_q_spans_input() {
        // Q Qᵀ A == A when A has full column rank.
        let a = random_mat(15, 4, 9);
        let q = thin_q(&a);
        let proj = matmul(&q, &matmul_atb(&q, &a));
        for (x, y) in proj.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobi_matches_nalgebra_tall_and_wide() {
        for (rows, cols, seed) in [(12usize, 8usize, 1u64), (8, 12, 2), (30, 30, 3)] {
            let a = random_mat(rows, cols, seed);
            let (sigma, v) = jacobi_svd_right(&a);
            let na = nalgebra::DMatrix::from_row_slice(rows, cols, &a.data);
            let oracle = na.svd(false, false);
            let mut oracle_s: Vec<f64> = oracle.singular_values.iter().copied().collect();
            oracle_s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            assert_eq!(sigma.len(), rows.min(cols));
            for (mine, theirs) in sigma.iter().zip(&oracle_s) {
                assert!(
                    (mine - theirs).abs() < 1e-9 * oracle_s[0].max(1.0),
                    "sigma {mine} vs {theirs}"
                );
            }
            // Right vectors orthonormal.
            let vvt = matmul_abt(&v, &v);
            for i in 0..v.rows {
                for j in 0..v.rows {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((vvt.get(i, j) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn jacobi_rank_deficient_wide_completes_basis() {
        // 2x4 rank-1 matrix; both right vectors must still be orthonormal.
        let a = Mat::from_rows(2, 4, vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
        let (sigma, v) = jacobi_svd_right(&a);
        assert!(sigma[1] < 1e-10 * sigma[0]);
        let vvt = matmul_abt(&v, &v);
        assert!((vvt.get(0, 0) - 1.0).abs() < 1e-10);
        assert!((vvt.get(1, 1) - 1.0).abs() < 1e-10);
        assert!(vvt.get(0, 1).abs() < 1e-10);
    }

    #[test]
    fn cholesky_solves_known_system() {
        // A = [[4,2],[2,3]], b = [8, 7] -> x = [1.25, 1.5]
        let a = Mat::from_rows(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let x = cholesky_solve(&a, &[8.0, 7.0]).unwrap();
        assert!((x[0] - 1.25).abs() < 1e-12);
        assert!((x[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = Mat::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            cholesky_solve(&a, &[1.0, 1.0]).unwrap_err(),
            Error::SingularSystem(_)
        ));
    }
}
