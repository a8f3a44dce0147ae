//! Small dense linear-algebra kernels.
//!
//! Everything here operates on matrices of at most a few hundred rows:
//! nearfield blocks, coupling matrices and thin basis factors. The
//! symmetric eigensolvers double as independent oracles for the slicing
//! driver, so they must not share code with the hierarchical path.

use thiserror::Error;

/// Relative pivot threshold for [`ldlt`], measured against the Frobenius
/// norm of the input. Pivots below it signal a (near-)singular leading
/// minor rather than roundoff.
pub const DEFAULT_PIVOT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DenseError {
    /// Pivot `i` of an unpivoted LDL^T factorization fell below the
    /// breakdown threshold; the caller is expected to perturb the shift.
    #[error("LDL^T pivot breakdown at index {0}")]
    PivotBreakdown(usize),
    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
}

/// Dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let crow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (c, o) in crow.iter_mut().zip(orow) {
                    *c += a * o;
                }
            }
        }
        out
    }

    /// `self^T * other`
    pub fn tr_matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "dimension mismatch in tr_matmul");
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * other.cols..(k + 1) * other.cols];
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let crow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (c, b) in crow.iter_mut().zip(brow) {
                    *c += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn matmul_tr(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "dimension mismatch in matmul_tr");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                out[(i, j)] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Copy of rows `r0..r1`.
    pub fn row_block(&self, r0: usize, r1: usize) -> DenseMatrix {
        assert!(r0 <= r1 && r1 <= self.rows);
        DenseMatrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Stack `top` over `bottom` (column counts must match).
    pub fn vstack(top: &DenseMatrix, bottom: &DenseMatrix) -> DenseMatrix {
        assert_eq!(top.cols, bottom.cols);
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        DenseMatrix { rows: top.rows + bottom.rows, cols: top.cols, data }
    }

    /// Place `other` side by side: `[self | other]`.
    pub fn hstack(left: &DenseMatrix, right: &DenseMatrix) -> DenseMatrix {
        assert_eq!(left.rows, right.rows);
        let mut out = DenseMatrix::zeros(left.rows, left.cols + right.cols);
        for i in 0..left.rows {
            out.data[i * out.cols..i * out.cols + left.cols]
                .copy_from_slice(left.row(i));
            out.data[i * out.cols + left.cols..(i + 1) * out.cols]
                .copy_from_slice(right.row(i));
        }
        out
    }

    /// Keep the first `k` columns.
    pub fn take_cols(&self, k: usize) -> DenseMatrix {
        assert!(k <= self.cols);
        DenseMatrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// ── thin QR ─────────────────────────────────────────────────────────

/// Thin QR factorization by Householder reflections.
///
/// Returns `(Q, R)` with `Q` of size m x min(m,n), `R` upper triangular of
/// size min(m,n) x n, and the diagonal of `R` nonnegative. Rank-deficient
/// input is allowed; `R` may then contain zero rows.
pub fn thin_qr(m: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let (rows, cols) = (m.rows(), m.cols());
    let r = rows.min(cols);
    let mut a = m.clone();
    // Householder vectors stored below the diagonal, v[0] implicit.
    let mut taus = Vec::with_capacity(r);
    let mut v0s = Vec::with_capacity(r);
    for k in 0..r {
        let mut norm2 = 0.0;
        for i in k..rows {
            norm2 += a[(i, k)] * a[(i, k)];
        }
        if norm2 <= f64::MIN_POSITIVE {
            taus.push(0.0);
            v0s.push(1.0);
            continue;
        }
        let norm = norm2.sqrt();
        let akk = a[(k, k)];
        let sigma = if akk >= 0.0 { norm } else { -norm };
        let v0 = akk + sigma;
        for i in (k + 1)..rows {
            a[(i, k)] /= v0;
        }
        let tau = v0 / sigma;
        // apply reflector to trailing columns
        for j in (k + 1)..cols {
            let mut dot = a[(k, j)];
            for i in (k + 1)..rows {
                dot += a[(i, k)] * a[(i, j)];
            }
            dot *= tau;
            a[(k, j)] -= dot;
            for i in (k + 1)..rows {
                let v = a[(i, k)];
                a[(i, j)] -= dot * v;
            }
        }
        a[(k, k)] = -sigma;
        taus.push(tau);
        v0s.push(v0);
    }
    // extract R
    let mut rmat = DenseMatrix::zeros(r, cols);
    for i in 0..r {
        for j in i..cols {
            rmat[(i, j)] = a[(i, j)];
        }
    }
    // accumulate thin Q by applying reflectors to the first r identity columns
    let mut q = DenseMatrix::zeros(rows, r);
    for i in 0..r {
        q[(i, i)] = 1.0;
    }
    for k in (0..r).rev() {
        let tau = taus[k];
        if tau == 0.0 {
            continue;
        }
        for j in 0..r {
            let mut dot = q[(k, j)];
            for i in (k + 1)..rows {
                dot += a[(i, k)] * q[(i, j)];
            }
            dot *= tau;
            q[(k, j)] -= dot;
            for i in (k + 1)..rows {
                let v = a[(i, k)];
                q[(i, j)] -= dot * v;
            }
        }
    }
    let _ = v0s;
    // sign-normalize so diag(R) >= 0
    for k in 0..r {
        if rmat[(k, k)] < 0.0 {
            for j in 0..cols {
                rmat[(k, j)] = -rmat[(k, j)];
            }
            for i in 0..rows {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, rmat)
}

// ── SVD ─────────────────────────────────────────────────────────────

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Returns `(U, sigma, V)` with singular values sorted descending,
/// `U` m x min(m,n) and `V` n x min(m,n), both with orthonormal columns.
pub fn svd(m: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    if m.rows() < m.cols() {
        let (u, s, v) = svd(&m.transpose());
        return (v, s, u);
    }
    let rows = m.rows();
    let cols = m.cols();
    let mut a = m.clone();
    let mut v = DenseMatrix::identity(cols);
    if cols > 0 {
        let mut norms: Vec<f64> = vec![0.0; cols];
        for _sweep in 0..60 {
            // refresh the cached squared column norms once per sweep so
            // the rotation identities cannot drift
            for (j, nj) in norms.iter_mut().enumerate() {
                *nj = (0..rows).map(|i| a[(i, j)] * a[(i, j)]).sum();
            }
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let app = norms[p];
                    let aqq = norms[q];
                    let mut apq = 0.0;
                    for i in 0..rows {
                        apq += a[(i, p)] * a[(i, q)];
                    }
                    // relative off-diagonal test; columns spanning wildly
                    // different scales must still be rotated against each
                    // other, so no absolute threshold here
                    if apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                        continue;
                    }
                    let zeta = (aqq - app) / (2.0 * apq);
                    let t = if zeta >= 0.0 {
                        1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                    } else {
                        -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                    };
                    // a rotation this small is a numerical no-op; applying
                    // it anyway can stall the sweep loop near convergence
                    if t.abs() <= 1e-14 {
                        continue;
                    }
                    rotated = true;
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let ap = a[(i, p)];
                        let aq = a[(i, q)];
                        a[(i, p)] = c * ap - s * aq;
                        a[(i, q)] = s * ap + c * aq;
                    }
                    for i in 0..cols {
                        let vp = v[(i, p)];
                        let vq = v[(i, q)];
                        v[(i, p)] = c * vp - s * vq;
                        v[(i, q)] = s * vp + c * vq;
                    }
                    // exact rotation identities for the squared norms
                    norms[p] = c * c * app - 2.0 * c * s * apq + s * s * aqq;
                    norms[q] = s * s * app + 2.0 * c * s * apq + c * c * aqq;
                }
            }
            if !rotated {
                break;
            }
        }
    }
    // column norms are the singular values
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());
    let mut u = DenseMatrix::zeros(rows, cols);
    let mut vv = DenseMatrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (jj, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u[(i, jj)] = a[(i, j)] / s;
            }
        }
        for i in 0..cols {
            vv[(i, jj)] = v[(i, j)];
        }
    }
    complete_orthonormal(&mut u, &sigma);
    (u, sigma, vv)
}

/// Replace the columns belonging to zero singular values with an
/// orthonormal completion so `U^T U = I` holds even for rank-deficient
/// input.
fn complete_orthonormal(u: &mut DenseMatrix, sigma: &[f64]) {
    let rows = u.rows();
    let cols = u.cols();
    for j in 0..cols {
        if sigma[j] > 0.0 {
            continue;
        }
        // pick the unit vector with the largest residual after projection
        let mut best: Option<(f64, Vec<f64>)> = None;
        for cand in 0..rows {
            let mut vec = vec![0.0; rows];
            vec[cand] = 1.0;
            for k in 0..cols {
                if k == j {
                    continue;
                }
                if k > j && sigma[k] <= 0.0 {
                    continue; // not yet filled
                }
                let dot: f64 = (0..rows).map(|i| u[(i, k)] * vec[i]).sum();
                for i in 0..rows {
                    vec[i] -= dot * u[(i, k)];
                }
            }
            // also orthogonalize against already completed zero-columns
            for k in 0..j {
                if sigma[k] > 0.0 {
                    continue;
                }
                let dot: f64 = (0..rows).map(|i| u[(i, k)] * vec[i]).sum();
                for i in 0..rows {
                    vec[i] -= dot * u[(i, k)];
                }
            }
            let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(b, _)| norm > *b) {
                best = Some((norm, vec));
            }
        }
        if let Some((norm, vec)) = best {
            if norm > 0.0 {
                for i in 0..rows {
                    u[(i, j)] = vec[i] / norm;
                }
            }
        }
    }
}

// ── truncation rank ─────────────────────────────────────────────────

use crate::h2::{TruncationControl, TruncationMode};

/// Number of singular values kept under the given control.
///
/// Weighted mode keeps values strictly greater than one (ties at exactly
/// 1.0 are dropped); relative mode keeps the smallest rank `r` with
/// `sigma[r] <= eps * sigma[0]`. Both are capped by `max_rank`.
pub fn truncation_rank(singular_values: &[f64], control: &TruncationControl) -> usize {
    let r = match control.mode {
        TruncationMode::Weighted => singular_values.iter().take_while(|&&s| s > 1.0).count(),
        TruncationMode::Relative => {
            let s0 = singular_values.first().copied().unwrap_or(0.0);
            if s0 <= 0.0 {
                0
            } else {
                let thresh = control.eps * s0;
                singular_values.iter().take_while(|&&s| s > thresh).count()
            }
        }
    };
    r.min(control.max_rank)
}

// ── LDL^T ───────────────────────────────────────────────────────────

/// Unpivoted LDL^T factorization of a symmetric matrix.
///
/// Returns unit lower triangular `L` (diagonal stored as exact ones,
/// upper part zero) and the diagonal `D`. A pivot with
/// `|d_i| <= pivot_tol * ||A||_F` raises [`DenseError::PivotBreakdown`];
/// the slicing driver reacts by perturbing the shift.
pub fn ldlt(a: &DenseMatrix, pivot_tol: f64) -> Result<(DenseMatrix, Vec<f64>), DenseError> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let breakdown = pivot_tol * a.frobenius_norm();
    let mut l = DenseMatrix::identity(n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if dj.abs() <= breakdown {
            return Err(DenseError::PivotBreakdown(j));
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok((l, d))
}

/// In-place variant used on nearfield blocks: overwrites `a` with the unit
/// lower triangular factor (ones on the diagonal, zeros above) and returns
/// the diagonal. `breakdown` is an absolute pivot threshold computed by the
/// caller from the global matrix scale.
pub fn ldlt_in_place(a: &mut DenseMatrix, breakdown: f64) -> Result<Vec<f64>, DenseError> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= a[(j, k)] * a[(j, k)] * d[k];
        }
        if dj.abs() <= breakdown {
            return Err(DenseError::PivotBreakdown(j));
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= a[(i, k)] * a[(j, k)] * d[k];
            }
            a[(i, j)] = v / dj;
        }
    }
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in (i + 1)..n {
            a[(i, j)] = 0.0;
        }
    }
    Ok(d)
}

/// Cholesky factorization `A = C C^T` with `C` lower triangular.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix, DenseError> {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut c = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= c[(j, k)] * c[(j, k)];
        }
        if dj <= 0.0 {
            return Err(DenseError::NotPositiveDefinite(j));
        }
        let cjj = dj.sqrt();
        c[(j, j)] = cjj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= c[(i, k)] * c[(j, k)];
            }
            c[(i, j)] = v / cjj;
        }
    }
    Ok(c)
}

// ── symmetric eigensolvers ──────────────────────────────────────────

/// Eigenvalues of a symmetric matrix, sorted ascending.
pub fn sym_eig(a: &DenseMatrix) -> Vec<f64> {
    sym_eig_full(a, false).0
}

/// Eigenvalues (ascending) and, when requested, the matching orthonormal
/// eigenvectors as columns. Householder tridiagonalization followed by
/// implicit-shift QL iterations.
pub fn sym_eig_full(a: &DenseMatrix, vectors: bool) -> (Vec<f64>, Option<DenseMatrix>) {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    if n == 0 {
        return (Vec::new(), if vectors { Some(DenseMatrix::zeros(0, 0)) } else { None });
    }
    let mut z = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut z, &mut d, &mut e, vectors);
    ql_implicit(&mut d, &mut e, if vectors { Some(&mut z) } else { None });
    // sort ascending, permuting vectors along
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let vecs = if vectors {
        let mut v = DenseMatrix::zeros(n, n);
        for (jj, &j) in order.iter().enumerate() {
            for i in 0..n {
                v[(i, jj)] = z[(i, j)];
            }
        }
        Some(v)
    } else {
        None
    };
    (vals, vecs)
}

/// Householder reduction to tridiagonal form (diagonal `d`, off-diagonal
/// `e[1..]`); accumulates the transform in `z` when `vectors` is set.
fn tridiagonalize(z: &mut DenseMatrix, d: &mut [f64], e: &mut [f64], vectors: bool) {
    let n = z.rows();
    for i in (1..n).rev() {
        let l = i;
        let mut h = 0.0;
        if l > 1 {
            let mut scale = 0.0;
            for k in 0..l {
                scale += z[(i, k)].abs();
            }
            if scale == 0.0 {
                e[i] = z[(i, l - 1)];
            } else {
                for k in 0..l {
                    let v = z[(i, k)] / scale;
                    z[(i, k)] = v;
                    h += v * v;
                }
                let f = z[(i, l - 1)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[(i, l - 1)] = f - g;
                let mut tau = 0.0;
                for j in 0..l {
                    if vectors {
                        z[(j, i)] = z[(i, j)] / h;
                    }
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[(j, k)] * z[(i, k)];
                    }
                    for k in (j + 1)..l {
                        g += z[(k, j)] * z[(i, k)];
                    }
                    e[j] = g / h;
                    tau += e[j] * z[(i, j)];
                }
                let hh = tau / (2.0 * h);
                for j in 0..l {
                    let f = z[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let delta = f * e[k] + g * z[(i, k)];
                        z[(j, k)] -= delta;
                    }
                }
            }
        } else {
            e[i] = z[(i, l - 1)];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if vectors {
            if d[i] != 0.0 {
                for j in 0..i {
                    let mut g = 0.0;
                    for k in 0..i {
                        g += z[(i, k)] * z[(k, j)];
                    }
                    for k in 0..i {
                        let delta = g * z[(k, i)];
                        z[(k, j)] -= delta;
                    }
                }
            }
            d[i] = z[(i, i)];
            z[(i, i)] = 1.0;
            for j in 0..i {
                z[(j, i)] = 0.0;
                z[(i, j)] = 0.0;
            }
        } else {
            d[i] = z[(i, i)];
        }
    }
}

/// Implicit-shift QL iterations on a symmetric tridiagonal matrix.
fn ql_implicit(d: &mut [f64], e: &mut [f64], mut z: Option<&mut DenseMatrix>) {
    let n = d.len();
    if n <= 1 {
        return;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 50, "QL iteration failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(zm) = z.as_deref_mut() {
                    let nn = zm.rows();
                    for k in 0..nn {
                        f = zm[(k, i + 1)];
                        zm[(k, i + 1)] = s * zm[(k, i)] + c * f;
                        zm[(k, i)] = c * zm[(k, i)] - s * f;
                    }
                }
            }
            if r == 0.0 && m > l {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Eigenvalues of the symmetric-definite pencil `(A, B)`, ascending,
/// reduced via `B = C C^T` to a standard symmetric problem.
pub fn gen_eig(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>, DenseError> {
    Ok(gen_eig_full(a, b, false)?.0)
}

/// Generalized eigenvalues and, when requested, B-orthonormal eigenvectors.
pub fn gen_eig_full(
    a: &DenseMatrix,
    b: &DenseMatrix,
    vectors: bool,
) -> Result<(Vec<f64>, Option<DenseMatrix>), DenseError> {
    let c = cholesky(b)?;
    let n = a.rows();
    // M = C^{-1} A C^{-T}, formed by two triangular solves
    let mut m = a.clone();
    // left solve: C X = A  (forward substitution on each column)
    for j in 0..n {
        for i in 0..n {
            let mut v = m[(i, j)];
            for k in 0..i {
                v -= c[(i, k)] * m[(k, j)];
            }
            m[(i, j)] = v / c[(i, i)];
        }
    }
    // right solve: M C^T = X  => rows solved against C
    for i in 0..n {
        for j in 0..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= m[(i, k)] * c[(j, k)];
            }
            m[(i, j)] = v / c[(j, j)];
        }
    }
    // symmetrize against roundoff
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let (vals, vecs) = sym_eig_full(&m, vectors);
    let out_vecs = match vecs {
        Some(u) if vectors => {
            // x = C^{-T} u
            let mut x = u;
            for j in 0..x.cols() {
                for i in (0..n).rev() {
                    let mut v = x[(i, j)];
                    for k in (i + 1)..n {
                        v -= c[(k, i)] * x[(k, j)];
                    }
                    x[(i, j)] = v / c[(i, i)];
                }
            }
            Some(x)
        }
        _ => None,
    };
    Ok((vals, out_vecs))
}
