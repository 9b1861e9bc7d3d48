//! Small dense kernels for the K×K correlation blocks (K ≤ 128).
//!
//! Everything here is exact-arithmetic style: Cholesky for log-determinants
//! and inverses, cyclic Jacobi for symmetric eigenproblems and one-sided
//! Jacobi for the SVD. A ridge `λ·I` is always added before factorizing.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e} at ridge {ridge:e})")]
    NotPositiveDefinite { pivot: usize, value: f64, ridge: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite matrix entry")]
    NonFinite,
}

pub type LinalgResult<T> = Result<T, LinalgError>;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> LinalgResult<Self> {
        if rows * cols != data.len() {
            return Err(LinalgError::Dimension(format!(
                "{}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> LinalgResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_ridge(&self, ridge: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += ridge;
        }
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.sub(other).max_abs()
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn frob_dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// `[[a, b], [c, d]]` block assembly.
    pub fn block2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let rows = a.rows + c.rows;
        let cols = a.cols + b.cols;
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for col in 0..cols {
                m[(r, col)] = match (r < a.rows, col < a.cols) {
                    (true, true) => a[(r, col)],
                    (true, false) => b[(r, col - a.cols)],
                    (false, true) => c[(r - a.rows, col)],
                    (false, false) => d[(r - a.rows, col - a.cols)],
                };
            }
        }
        m
    }

    /// Sub-block `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self[(r0 + r, c0 + c)];
            }
        }
        m
    }

    fn check_finite(&self) -> LinalgResult<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LinalgError::NonFinite)
        }
    }
}

/// Symmetric matrix; symmetrized on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> LinalgResult<Self> {
        if !m.is_square() {
            return Err(LinalgError::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        Ok(SymMatrix(m.symmetrized()))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n))
    }

    pub fn from_diag(d: &[f64]) -> Self {
        SymMatrix(Matrix::from_diag(d))
    }

    pub fn order(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower-triangular Cholesky factor of `m + ridge·I`.
pub fn cholesky(m: &SymMatrix, ridge: f64) -> LinalgResult<Matrix> {
    let a = m.as_matrix();
    a.check_finite()?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + ridge;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j,
                value: d,
                ridge,
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// `log det(m + ridge·I)` as twice the log-sum of the Cholesky diagonal.
pub fn cholesky_logdet(m: &SymMatrix, ridge: f64) -> LinalgResult<f64> {
    let l = cholesky(m, ridge)?;
    Ok(2.0 * (0..l.rows).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// `(m + ridge·I)⁻¹` through the Cholesky factor.
pub fn ridge_inverse(m: &SymMatrix, ridge: f64) -> LinalgResult<SymMatrix> {
    let l = cholesky(m, ridge)?;
    let n = l.rows;
    // L⁻¹ by forward substitution, then (L⁻¹)ᵀ L⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        for r in c..n {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                s -= l[(r, k)] * linv[(k, c)];
            }
            linv[(r, c)] = s / l[(r, r)];
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[(k, i)] * linv[(k, j)];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    SymMatrix::new(inv)
}

/// Eigendecomposition of a symmetric matrix: eigenvalues descending and the
/// matching eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn jacobi_eigh(m: &SymMatrix) -> LinalgResult<SymEigen> {
    let mut a = m.as_matrix().clone();
    a.check_finite()?;
    let n = a.rows;
    let mut v = Matrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale * (n as f64) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEigen { values, vectors })
}

pub fn min_eigenvalue(m: &SymMatrix) -> LinalgResult<f64> {
    Ok(jacobi_eigh(m)?
        .values
        .last()
        .copied()
        .unwrap_or(f64::INFINITY))
}

/// Symmetric `S = (m + ridge·I)^{-1/2}` from the Jacobi eigendecomposition.
pub fn inv_sqrt_sym(m: &SymMatrix, ridge: f64) -> LinalgResult<SymMatrix> {
    let shifted = SymMatrix::new(m.as_matrix().add_ridge(ridge))?;
    // The Cholesky attempt is the positive-definiteness test.
    cholesky(&shifted, 0.0)?;
    let eig = jacobi_eigh(&shifted)?;
    let n = m.order();
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in eig.values.iter().enumerate() {
        if lam <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: k,
                value: lam,
                ridge,
            });
        }
        let w = 1.0 / lam.sqrt();
        for i in 0..n {
            let vi = eig.vectors[(i, k)] * w;
            for j in 0..n {
                out[(i, j)] += vi * eig.vectors[(j, k)];
            }
        }
    }
    SymMatrix::new(out)
}

/// `m = U · diag(singular_values) · Vᵀ` with descending singular values.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.u.rows;
        let mut us = self.u.clone();
        for r in 0..n {
            for c in 0..self.singular_values.len() {
                us[(r, c)] *= self.singular_values[c];
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// SVD of a square matrix by one-sided (Hestenes) Jacobi rotations.
pub fn svd_small(m: &Matrix) -> LinalgResult<SvdResult> {
    if !m.is_square() {
        return Err(LinalgError::Dimension(format!(
            "svd_small expects a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    m.check_finite()?;
    let n = m.rows;
    // Work on columns of W = M·V; rotations orthogonalize them pairwise.
    let mut w = m.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..n {
                    let wp = w[(k, p)];
                    let wq = w[(k, q)];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let wp = w[(k, p)];
                    let wq = w[(k, q)];
                    w[(k, p)] = c * wp - s * wq;
                    w[(k, q)] = s * wp + c * wq;
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n)
        .map(|c| (0..n).map(|r| w[(r, c)] * w[(r, c)]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-13 * n as f64;

    let mut u = Matrix::zeros(n, n);
    let mut vs = Matrix::zeros(n, n);
    let mut sv = Vec::with_capacity(n);
    let mut filled = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sv.push(s);
        for k in 0..n {
            vs[(k, dst)] = v[(k, src)];
        }
        if s > tol {
            for k in 0..n {
                u[(k, dst)] = w[(k, src)] / s;
            }
            filled.push(true);
        } else {
            filled.push(false);
        }
    }
    complete_orthonormal(&mut u, &filled);
    Ok(SvdResult {
        u,
        singular_values: sv,
        v: vs,
    })
}

/// Fills the unset columns of `u` with an orthonormal completion
/// (Gram–Schmidt against the standard basis).
fn complete_orthonormal(u: &mut Matrix, filled: &[bool]) {
    let n = u.rows;
    let mut candidate = 0;
    for c in 0..n {
        if filled[c] {
            continue;
        }
        loop {
            assert!(candidate < n, "orthonormal completion ran out of candidates");
            let mut x = vec![0.0; n];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (other, &ok) in filled.iter().enumerate() {
                    if !ok && other >= c {
                        continue;
                    }
                    let dot: f64 = (0..n).map(|k| u[(k, other)] * x[k]).sum();
                    for k in 0..n {
                        x[k] -= dot * u[(k, other)];
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for k in 0..n {
                    u[(k, c)] = x[k] / norm;
                }
                break;
            }
        }
    }
}

/// SVD of an `a×b` matrix: `U` is a×a, `V` is b×b and `min(a, b)`
/// singular values are returned. Zero columns added to make it
/// square are never rotated by one-sided Jacobi and sort behind the real
/// ones, so truncating the padded factors is exact.
pub fn svd_rect(t: &Matrix) -> LinalgResult<(Matrix, Vec<f64>, Matrix)> {
    let (a, b) = (t.rows(), t.cols());
    if a < b {
        let (v, s, u) = svd_rect(&t.transpose())?;
        return Ok((u, s, v));
    }
    let mut padded = Matrix::zeros(a, a);
    for r in 0..a {
        for c in 0..b {
            padded[(r, c)] = t[(r, c)];
        }
    }
    let svd = svd_small(&padded)?;
    let v = svd.v.block(0, 0, b, b);
    let s = svd.singular_values[..b].to_vec();
    Ok((svd.u, s, v))
}
