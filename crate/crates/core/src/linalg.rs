//! Dense row-major matrices and the thin SVD.
//!
//! The SVD first reduces a tall matrix with Householder QR and then runs
//! one-sided (Hestenes) Jacobi on the square triangular factor. Layer-output
//! matrices are very tall (tens of thousands of samples, at most a few
//! hundred neurons), so almost all of the work is the QR pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl Matrix {
    /// Build from row-major data. Fails on a length mismatch or non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Rows picked by index, in the given order (duplicates allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    /// Leading `n` rows.
    pub fn leading_rows(&self, n: usize) -> Matrix {
        assert!(n <= self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in row `i` (first one on ties).
    pub fn row_argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    if !c.is_finite() {
        return Err(Error::Numeric("matmul produced non-finite entries".into()));
    }
    Ok(c)
}

/// `c = alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
/// Shapes are programmer invariants here and are asserted.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides describe the row-major buffers exactly and the asserted
    // shapes keep every access in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Thin SVD `y = u · diag(sigma) · vt` with `r = min(rows, cols)` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// Number of columns of the factored matrix.
    pub fn cols(&self) -> usize {
        self.vt.cols()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        let mut out = Matrix::zeros(self.u.rows, self.vt.cols);
        gemm(1.0, &us, false, &self.vt, false, 0.0, &mut out);
        out
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

pub fn thin_svd(y: &Matrix) -> Result<SvdFactors> {
    if y.rows == 0 || y.cols == 0 {
        return Err(Error::Shape("thin_svd of an empty matrix".into()));
    }
    if !y.is_finite() {
        return Err(Error::Numeric("thin_svd input has non-finite entries".into()));
    }
    if y.rows >= y.cols {
        Ok(tall_svd(y))
    } else {
        let f = tall_svd(&y.transpose());
        Ok(SvdFactors {
            u: f.vt.transpose(),
            sigma: f.sigma,
            vt: f.u.transpose(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

struct Reflector {
    v: Vec<f64>,
    tau: f64,
}

fn tall_svd(y: &Matrix) -> SvdFactors {
    let (m, n) = y.shape();
    // Column-major copy: column j is a[j*m..(j+1)*m].
    let mut a = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            a[j * m + i] = y.get(i, j);
        }
    }

    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        let (head, tail) = a.split_at_mut((k + 1) * m);
        let col = &mut head[k * m + k..];
        let norm = dot(col, col).sqrt();
        if norm == 0.0 {
            reflectors.push(Reflector {
                v: Vec::new(),
                tau: 0.0,
            });
            continue;
        }
        let alpha = if col[0] > 0.0 { -norm } else { norm };
        let mut v = col.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        let tau = if vv > 0.0 { 2.0 / vv } else { 0.0 };
        col[0] = alpha;
        col[1..].iter_mut().for_each(|x| *x = 0.0);
        for j in 0..(n - k - 1) {
            let cj = &mut tail[j * m + k..(j + 1) * m];
            let s = tau * dot(&v, cj);
            axpy(-s, &v, cj);
        }
        reflectors.push(Reflector { v, tau });
    }

    // R (n x n upper triangular), column-major.
    let mut w = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..=j {
            w[j * n + i] = a[j * m + i];
        }
    }
    drop(a);

    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let tol = (n.max(1) as f64) * f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (wp, wq) = column_pair(&mut w, n, p, q);
                let alpha = dot(wp, wp);
                let beta = dot(wq, wq);
                let gamma = dot(wp, wq);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(wp, wq, c, s);
                let (vp, vq) = column_pair(&mut v, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(&w[j * n..(j + 1) * n], &w[j * n..(j + 1) * n]).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let cutoff = (sigma.first().copied().unwrap_or(0.0) * n as f64 * f64::EPSILON).max(f64::MIN_POSITIVE * 1e4);
    // Left vectors of R in sorted order, re-orthogonalized against the
    // earlier ones; directions lost to rounding are completed below.
    let mut ur: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let mut e: Vec<f64> = w[j * n..(j + 1) * n].iter().map(|x| x / s).collect();
        let mut keep = s > cutoff;
        if keep {
            for _ in 0..2 {
                for other in ur.iter().flatten() {
                    let d = dot(&e, other);
                    axpy(-d, other, &mut e);
                }
            }
            let norm = dot(&e, &e).sqrt();
            keep = norm > 0.5;
            e.iter_mut().for_each(|x| *x /= norm);
        }
        ur.push(keep.then_some(e));
    }
    complete_orthonormal(&mut ur, n);
    let ur: Vec<Vec<f64>> = ur.into_iter().map(Option::unwrap).collect();

    // U = Q · [U_R; 0], applying reflectors in reverse.
    let mut u = Matrix::zeros(m, n);
    let mut col = vec![0.0; m];
    for (c, urc) in ur.iter().enumerate() {
        col.iter_mut().for_each(|x| *x = 0.0);
        col[..n].copy_from_slice(urc);
        for (k, h) in reflectors.iter().enumerate().rev() {
            if h.tau == 0.0 {
                continue;
            }
            let seg = &mut col[k..];
            let s = h.tau * dot(&h.v, seg);
            axpy(-s, &h.v, seg);
        }
        for (i, v) in col.iter().enumerate().take(m) {
            u.data[i * n + c] = *v;
        }
    }

    let mut vt = Matrix::zeros(n, n);
    for (r, &j) in order.iter().enumerate() {
        vt.row_mut(r).copy_from_slice(&v[j * n..(j + 1) * n]);
    }

    SvdFactors { u, sigma, vt }
}

fn column_pair(buf: &mut [f64], n: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = buf.split_at_mut(q * n);
    (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
}

fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fill `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], n: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        loop {
            assert!(candidate < n, "orthonormal completion exhausted the basis");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against all filled columns.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let d = dot(&e, other);
                    axpy(-d, other, &mut e);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}

/// Number of singular values above `rel_tol · sigma[0]`.
pub fn effective_rank(sigma: &[f64], rel_tol: f64) -> usize {
    match sigma.first() {
        Some(&s0) if s0 > 0.0 => sigma.iter().filter(|&&s| s > rel_tol * s0).count(),
        _ => 0,
    }
}

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn identity_times_a() {
        let a = random(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(7, 5, 2);
        let b = random(5, 3, 3);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_gemm_matches() {
        let a = random(6, 4, 4);
        let b = random(6, 3, 5);
        let mut c = Matrix::zeros(4, 3);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        assert!(c.max_abs_diff(&naive(&a.transpose(), &b)) < 1e-12);
        let e = random(5, 4, 6);
        let mut d = Matrix::zeros(6, 5);
        gemm(1.0, &a, false, &e, true, 0.0, &mut d);
        assert!(d.max_abs_diff(&naive(&a, &e.transpose())) < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(Matrix::new(1, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn svd_of_diagonal() {
        let f = thin_svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        for (s, e) in f.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - e).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_of_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0, 1.5];
        let v = [2.0, 1.0, -1.0, 0.25];
        let y = Matrix::from_fn(5, 4, |i, j| u[i] * v[j]);
        let f = thin_svd(&y).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((f.sigma[0] - nu * nv).abs() < 1e-10);
        for s in &f.sigma[1..] {
            assert!(s.abs() < 1e-10);
        }
        assert_orthonormal_cols(&f.u, 1e-8);
        assert_orthonormal_cols(&f.vt.transpose(), 1e-8);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let f = thin_svd(&Matrix::zeros(6, 3)).unwrap();
        assert!(f.sigma.iter().all(|&s| s == 0.0));
        assert_orthonormal_cols(&f.u, 1e-12);
        assert_eq!(effective_rank(&f.sigma, DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn svd_wide_matrix() {
        let y = random(4, 9, 11);
        let f = thin_svd(&y).unwrap();
        assert_eq!(f.u.shape(), (4, 4));
        assert_eq!(f.vt.shape(), (4, 9));
        assert!(f.reconstruct().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn svd_rejects_non_finite_and_empty() {
        assert!(thin_svd(&Matrix::zeros(0, 3)).is_err());
    }

    fn assert_orthonormal_cols(m: &Matrix, tol: f64) {
        let g = matmul(&m.transpose(), m).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(m.cols())) < tol);
    }

    #[test]
    fn eckart_young_random_50x8() {
        let y = random(50, 8, 7);
        let f = thin_svd(&y).unwrap();
        for m in 0..=8 {
            let v = f.vt.leading_rows(m).transpose();
            let proj = matmul(&matmul(&y, &v).unwrap(), &v.transpose()).unwrap();
            let err = y.sub(&proj).unwrap().frobenius_norm();
            let tail: f64 = f.sigma[m..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - tail).abs() < 1e-9, "m={m}: {err} vs {tail}");
        }
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[3.0, 2.0, 1e-14], 1e-10), 2);
        assert_eq!(effective_rank(&[0.0, 0.0, 0.0], 1e-10), 0);
        assert_eq!(effective_rank(&[], 1e-10), 0);
    }

    #[test]
    fn planted_rank_recovered() {
        for r in [1, 3, 6] {
            let a = random(40, r, 20 + r as u64);
            let b = random(r, 10, 30 + r as u64);
            let f = thin_svd(&matmul(&a, &b).unwrap()).unwrap();
            assert_eq!(effective_rank(&f.sigma, DEFAULT_RANK_TOL), r);
            assert_orthonormal_cols(&f.u, 1e-8);
        }
    }
}
