//! Small dense linear algebra in `f64`.
//!
//! Only what the rest of the crate needs: a row-major [`Mat`], matrix products
//! backed by `matrixmultiply`, symmetric eigendecomposition, Gram matrices and
//! the two-sided eigenbasis change used by the EKFAC preconditioner.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Asymmetry (relative to the largest entry) above which `sym_eig` refuses input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Cyclic Jacobi stops once the off-diagonal Frobenius norm falls below this
/// fraction of the full norm.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

const QL_MAX_ITERATIONS: usize = 60;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::structural(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self - other`, shapes must agree.
    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::structural(format!(
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
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows.min(self.cols) {
            for j in i + 1..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Dense product `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(1.0, self, Op::N, other, Op::N, 0.0, &mut out)?;
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::structural(format!(
                "matvec: vector of length {} against {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Whether a gemm operand is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

impl Op {
    fn apply(self, m: &Mat) -> (usize, usize, isize, isize) {
        let (rs, cs) = (m.cols as isize, 1isize);
        match self {
            Op::N => (m.rows, m.cols, rs, cs),
            Op::T => (m.cols, m.rows, cs, rs),
        }
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`.
pub fn gemm(alpha: f64, a: &Mat, op_a: Op, b: &Mat, op_b: Op, beta: f64, c: &mut Mat) -> Result<()> {
    let (m, k, rsa, csa) = op_a.apply(a);
    let (kb, n, rsb, csb) = op_b.apply(b);
    if k != kb || c.rows != m || c.cols != n {
        return Err(Error::structural(format!(
            "gemm: ({m}x{k})·({kb}x{n}) into {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale(beta);
        return Ok(());
    }
    // SAFETY: dimensions and strides describe the row-major buffers checked above;
    // `c` is uniquely borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators keep the loop vectorizable while fixing the summation order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y ← y + alpha·x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Result of a symmetric eigendecomposition: `m = q · diag(values) · qᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub vectors: Mat,
    /// Eigenvalues in descending order, matching the columns of `vectors`.
    pub values: Vec<f64>,
}

impl SymEig {
    /// `q · diag(λ) · qᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for r in 0..n {
            for (c, v) in scaled.row_mut(r).iter_mut().enumerate() {
                *v *= self.values[c];
            }
        }
        let mut out = Mat::zeros(n, n);
        gemm(1.0, &scaled, Op::N, &self.vectors, Op::T, 0.0, &mut out)
            .expect("square factors conform");
        out
    }
}

/// Validates squareness and near-symmetry, returning the symmetrized copy `(m + mᵀ)/2`.
fn symmetrized(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::structural(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::numerical("eigendecomposition input has non-finite entries"));
    }
    let scale = m.max_abs();
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::structural(format!(
            "matrix is not symmetric: max |m_ij - m_ji| = {asym:e} (scale {scale:e})"
        )));
    }
    let n = m.rows;
    let mut s = m.clone();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
    Ok(s)
}

/// Reorders eigenpairs (stored as rows of `rows_as_vectors`) by descending value
/// and returns them with eigenvectors as columns.
fn sorted_descending(values: Vec<f64>, rows_as_vectors: Mat) -> SymEig {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut vectors = Mat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let v = rows_as_vectors.row(src);
        for r in 0..n {
            vectors[(r, col)] = v[r];
        }
    }
    SymEig {
        vectors,
        values: order.iter().map(|&i| values[i]).collect(),
    }
}

/// Symmetric eigendecomposition by Householder tridiagonalization followed by
/// implicit QL iterations.
///
/// Input must be square and symmetric to within [`SYMMETRY_TOLERANCE`] of its
/// largest entry; it is symmetrized before factoring.
pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    let a = symmetrized(m)?;
    let n = a.rows;
    if n == 0 {
        return Ok(SymEig {
            vectors: Mat::zeros(0, 0),
            values: Vec::new(),
        });
    }
    // `w` holds the transpose of the accumulated transform, so that every
    // inner loop below walks a contiguous row.
    let mut w = a;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut w, &mut d, &mut e);
    ql_implicit(&mut w, &mut d, &mut e)?;
    Ok(sorted_descending(d, w))
}

fn tridiagonalize(w: &mut Mat, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = w[(j, n - 1)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = w[(j, i - 1)];
                w[(j, i)] = 0.0;
                w[(i, j)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                f = d[j];
                w[(i, j)] = f;
                g = e[j] + w[(j, j)] * f;
                let row_j = w.row(j);
                for k in j + 1..i {
                    g += row_j[k] * d[k];
                    e[k] += row_j[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                let row_j = w.row_mut(j);
                for k in j..i {
                    row_j[k] -= f * e[k] + g * d[k];
                }
                d[j] = row_j[i - 1];
                row_j[i] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate the Householder reflections.
    for i in 0..n - 1 {
        w[(i, n - 1)] = w[(i, i)];
        w[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = w[(i + 1, k)] / h;
            }
            for j in 0..=i {
                let g = dot(&w.row(i + 1)[..=i], &w.row(j)[..=i]);
                let row_j = w.row_mut(j);
                for k in 0..=i {
                    row_j[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            w[(i + 1, k)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = w[(j, n - 1)];
        w[(j, n - 1)] = 0.0;
    }
    w[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(w: &mut Mat, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITERATIONS {
                    return Err(Error::numerical(format!(
                        "QL iteration did not converge for eigenvalue {l}: residual |e| = {:e}",
                        e[l].abs()
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    rotate_rows(w, i, i + 1, c, s);
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Applies a plane rotation to rows `i` and `j` of `w`:
/// `row_j ← s·row_i + c·row_j`, `row_i ← c·row_i − s·row_j`.
fn rotate_rows(w: &mut Mat, i: usize, j: usize, c: f64, s: f64) {
    debug_assert!(i < j);
    let cols = w.cols;
    let (head, tail) = w.data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let h = *b;
        *b = s * *a + c * h;
        *a = c * *a - s * h;
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Slower than [`sym_eig`] but entirely independent of it; stops when the
/// off-diagonal norm is below [`JACOBI_TOLERANCE`] relative to the Frobenius
/// norm, failing after [`JACOBI_MAX_SWEEPS`] sweeps.
pub fn sym_eig_jacobi(m: &Mat) -> Result<SymEig> {
    let mut a = symmetrized(m)?;
    let n = a.rows;
    // Rows of `v` are the eigenvectors (transpose of the accumulated rotation).
    let mut v = Mat::identity(n);
    let total = a.frobenius_norm();
    if total == 0.0 {
        return Ok(sorted_descending(vec![0.0; n], v));
    }
    let off_norm = |a: &Mat| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= JACOBI_TOLERANCE * total {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::numerical(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps: off-diagonal norm {off:e}"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
                // Columns p, q of V are rows p, q here.
                rotate_rows(&mut v, p, q, c, s);
            }
        }
    }
    let values = (0..n).map(|i| a[(i, i)]).collect();
    Ok(sorted_descending(values, v))
}

/// Direction of a two-sided eigenbasis change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// `qbᵀ · g · qa`: parameter coordinates into the Kronecker eigenbasis.
    IntoEigen,
    /// `qb · g · qaᵀ`: back to parameter coordinates.
    FromEigen,
}

/// Changes a layer-shaped matrix `g` (out×in) between parameter coordinates and
/// the eigenbasis spanned by `qb` (out×out) and `qa` (in×in).
pub fn eigenbasis_transform(qb: &Mat, g: &Mat, qa: &Mat, direction: Basis) -> Result<Mat> {
    let (out, inp) = g.shape();
    if qb.shape() != (out, out) || qa.shape() != (inp, inp) {
        return Err(Error::structural(format!(
            "eigenbasis transform: qb {:?}, g {:?}, qa {:?} do not conform",
            qb.shape(),
            g.shape(),
            qa.shape()
        )));
    }
    let (op_b, op_a) = match direction {
        Basis::IntoEigen => (Op::T, Op::N),
        Basis::FromEigen => (Op::N, Op::T),
    };
    let mut left = Mat::zeros(out, inp);
    gemm(1.0, qb, op_b, g, Op::N, 0.0, &mut left)?;
    let mut result = Mat::zeros(out, inp);
    gemm(1.0, &left, Op::N, qa, op_a, 0.0, &mut result)?;
    Ok(result)
}

/// `(1/n)·xᵀx` for an n×d matrix of row samples.
pub fn gram_matrix(x: &Mat) -> Result<Mat> {
    if x.rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut g = Mat::zeros(x.cols, x.cols);
    gemm(1.0 / x.rows as f64, x, Op::T, x, Op::N, 0.0, &mut g)?;
    // Exact symmetry regardless of the kernel's summation order.
    let d = x.cols;
    for i in 0..d {
        for j in i + 1..d {
            let v = g[(i, j)];
            g[(j, i)] = v;
        }
    }
    Ok(g)
}
