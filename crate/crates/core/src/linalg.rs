//! Small dense complex linear algebra.
//!
//! Matrices here are at most a few dozen rows, so everything is plain
//! row-major storage with unblocked O(n³) kernels. The Hermitian eigensolver
//! reduces to real symmetric tridiagonal form with Householder reflections and
//! then runs implicit QL iterations.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tol;

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Dense complex matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.6}{:+.6}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix {
    /// Builds a matrix from row-major entries, rejecting empty shapes and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty matrix shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "expected {} entries for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::domain("matrix has non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix shape");
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(d, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn diag(&self) -> Vec<C64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> C64 {
        self.diag().into_iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `diag(d) * self`, scaling row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.rows);
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[r])
    }

    /// `self * diag(d)`, scaling column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.cols);
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[c])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == ZERO {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Frobenius norm of `self - self^H`.
    pub fn hermitian_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut acc = 0.0;
        for r in 0..n {
            for c in 0..n {
                acc += (self[(r, c)] - self[(c, r)].conj()).norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// `‖self^H self − I‖_F`.
    pub fn unitarity_defect(&self) -> f64 {
        let g = self.adjoint().matmul(self).expect("square gram");
        (&g - &Self::identity(self.cols)).frobenius_norm()
    }

    /// Block-diagonal composition `self ⊕ other`.
    pub fn direct_sum(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows + other.rows, self.cols + other.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(r, c)] = self[(r, c)];
            }
        }
        for r in 0..other.rows {
            for c in 0..other.cols {
                out[(self.rows + r, self.cols + c)] = other[(r, c)];
            }
        }
        out
    }

    pub(crate) fn hermitian_part(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| {
            (self[(r, c)] + self[(c, r)].conj()) * 0.5
        })
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

/// Eigendecomposition `A = U diag(λ) U^H` of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub eigenvectors: ComplexMatrix,
}

impl HermitianEig {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let u = &self.eigenvectors;
        &u.scale_cols(&self.eigenvalues) * &u.adjoint()
    }
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues in descending order.
///
/// The input is symmetrized before factorization; inputs whose anti-Hermitian
/// part exceeds [`tol::HERMITIAN`] (relative to `max(1, ‖A‖_F)`) are rejected.
pub fn hermitian_eig(a: &ComplexMatrix) -> Result<HermitianEig> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let scale = a.frobenius_norm().max(1.0);
    if a.hermitian_defect() > tol::HERMITIAN * scale {
        return Err(Error::domain(format!(
            "matrix is not Hermitian (defect {:.3e})",
            a.hermitian_defect()
        )));
    }
    let n = a.rows;
    let (d, e, q) = tridiagonalize(a.hermitian_part());
    let (vals, z) = tql2(d, e);

    // eigenvectors of A are Q * Z, with Z real
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let eigenvalues = order.iter().map(|&i| vals[i]).collect();
    let mut vecs = ComplexMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            let mut acc = ZERO;
            for k in 0..n {
                acc += q[(r, k)] * z[k * n + src];
            }
            vecs[(r, col)] = acc;
        }
    }
    Ok(HermitianEig {
        eigenvalues,
        eigenvectors: vecs,
    })
}

/// Householder reduction of a Hermitian matrix to real symmetric tridiagonal
/// form. Returns the diagonal, the subdiagonal (`e[0] = 0`, `e[i]` couples
/// `i-1` and `i`) and the unitary `Q` with `A = Q T Q^H`.
fn tridiagonalize(mut a: ComplexMatrix) -> (Vec<f64>, Vec<f64>, ComplexMatrix) {
    let n = a.rows;
    let mut q = ComplexMatrix::identity(n);
    let mut v = vec![ZERO; n];
    for k in 0..n.saturating_sub(2) {
        let alpha = (k + 1..n).map(|i| a[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        v.iter_mut().for_each(|z| *z = ZERO);
        for i in k + 1..n {
            v[i] = a[(i, k)];
        }
        v[k + 1] += phase * alpha;
        let vnorm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // A <- H A,  H = I - beta v v^H
        for c in 0..n {
            let mut s = ZERO;
            for i in k + 1..n {
                s += v[i].conj() * a[(i, c)];
            }
            s *= beta;
            for i in k + 1..n {
                let vi = v[i];
                a[(i, c)] -= vi * s;
            }
        }
        // A <- A H, Q <- Q H
        for m in [&mut a, &mut q] {
            for r in 0..n {
                let mut s = ZERO;
                for i in k + 1..n {
                    s += m[(r, i)] * v[i];
                }
                s *= beta;
                for i in k + 1..n {
                    m[(r, i)] -= s * v[i].conj();
                }
            }
        }
    }

    // rotate the complex subdiagonal onto the positive real axis
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut tau = vec![ONE; n];
    for i in 0..n {
        d[i] = a[(i, i)].re;
        if i + 1 < n {
            let off = a[(i + 1, i)];
            let mag = off.norm();
            e[i + 1] = mag;
            tau[i + 1] = if mag > 0.0 { tau[i] * off / mag } else { tau[i] };
        }
    }
    let q = ComplexMatrix::from_fn(n, n, |r, c| q[(r, c)] * tau[c]);
    (d, e, q)
}

/// Implicit QL on a symmetric tridiagonal matrix (EISPACK tql2 lineage).
/// Returns eigenvalues (unsorted) and row-major eigenvectors.
fn tql2(mut d: Vec<f64>, e_in: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = d.len();
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    if n == 1 {
        return (d, z);
    }
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&e_in[1..n]);

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
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
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
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
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let zk1 = z[k * n + i + 1];
                        let zk = z[k * n + i];
                        z[k * n + i + 1] = s * zk + c * zk1;
                        z[k * n + i] = c * zk - s * zk1;
                    }
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
    (d, z)
}

/// Thin singular value decomposition `M = U diag(σ) V^H` of a matrix with
/// at least as many rows as columns.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: ComplexMatrix,
    /// Sorted descending.
    pub sigma: Vec<f64>,
    pub v: ComplexMatrix,
}

/// One-sided (Hestenes) Jacobi SVD. Accurate to working precision for small
/// singular values as well as large ones.
pub fn svd(m: &ComplexMatrix) -> Result<Svd> {
    let flip = m.rows < m.cols;
    let a0 = if flip { m.adjoint() } else { m.clone() };
    let (rows, n) = (a0.rows, a0.cols);
    // column-major working copies
    let mut a: Vec<Vec<C64>> = (0..n).map(|c| a0.column(c)).collect();
    let mut v: Vec<Vec<C64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { ONE } else { ZERO }).collect())
        .collect();
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = a[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma: C64 = a[p].iter().zip(&a[q]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g <= eps * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let phase = (gamma / g).conj();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let yq = *xq * phase;
                        let yp = *xp;
                        *xp = yp * c - yq * s;
                        *xq = yp * s + yq * c;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut u = ComplexMatrix::zeros(rows, n);
    let mut vm = ComplexMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        for r in 0..rows {
            u[(r, dst)] = if s > 0.0 { a[src][r] / s } else { ZERO };
        }
        for r in 0..n {
            vm[(r, dst)] = v[src][r];
        }
    }
    sigma = order.iter().map(|&i| sigma[i]).collect();
    Ok(if flip {
        Svd {
            u: vm,
            sigma,
            v: u,
        }
    } else {
        Svd { u, sigma, v: vm }
    })
}

/// Singular values in descending order.
pub fn singular_values(m: &ComplexMatrix) -> Vec<f64> {
    svd(m).expect("nonempty matrix").sigma
}

/// Nearest unitary matrix to `m` in Frobenius norm (the unitary polar factor).
///
/// With `m = P Σ Q^H`, returns `P Q^H`. A rank-deficient input is a domain
/// error; optimizers treat it as a signal to shrink the step.
pub fn polar_retract(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "polar retraction needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let d = svd(m)?;
    let smax = d.sigma[0];
    let smin = *d.sigma.last().expect("nonempty");
    if smax == 0.0 || smin <= tol::RANK * smax {
        return Err(Error::domain(format!(
            "rank-deficient matrix in polar retraction (σ_min/σ_max = {:.3e})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    Ok(&d.u * &d.v.adjoint())
}

/// Lower Cholesky factor of a Hermitian positive-definite matrix.
pub fn cholesky(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !a.is_square() {
        return Err(Error::dim("Cholesky needs a square matrix"));
    }
    let n = a.rows;
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut djj = a[(j, j)].re;
        for k in 0..j {
            djj -= l[(j, k)].norm_sqr();
        }
        if !(djj > 0.0) {
            return Err(Error::domain(format!(
                "matrix is not positive definite (pivot {j} = {djj:.3e})"
            )));
        }
        let ljj = djj.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Logarithm base for [`logdet_hpd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    Nats,
    Bits,
}

/// `log det(A)` of a Hermitian positive-definite matrix.
pub fn logdet_hpd(a: &ComplexMatrix, base: LogBase) -> Result<f64> {
    let scale = a.frobenius_norm().max(1.0);
    if a.hermitian_defect() > tol::HERMITIAN * scale {
        return Err(Error::domain("logdet of a non-Hermitian matrix"));
    }
    let l = cholesky(&a.hermitian_part())?;
    let nats: f64 = l.diag().iter().map(|z| 2.0 * z.re.ln()).sum();
    Ok(match base {
        LogBase::Nats => nats,
        LogBase::Bits => nats * std::f64::consts::LOG2_E,
    })
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !a.is_square() {
        return Err(Error::dim("inverse of a non-square matrix"));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut inv = ComplexMatrix::identity(n);
    let scale = a.max_abs();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].norm().total_cmp(&m[(j, col)].norm()))
            .unwrap();
        if m[(piv, col)].norm() <= f64::EPSILON * scale * n as f64 {
            return Err(Error::domain("singular matrix"));
        }
        if piv != col {
            for c in 0..n {
                m.data.swap(piv * n + c, col * n + c);
                inv.data.swap(piv * n + c, col * n + c);
            }
        }
        let p = ONE / m[(col, col)];
        for c in 0..n {
            m[(col, c)] *= p;
            inv[(col, c)] *= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f == ZERO {
                continue;
            }
            for c in 0..n {
                let mc = m[(col, c)];
                let ic = inv[(col, c)];
                m[(r, c)] -= f * mc;
                inv[(r, c)] -= f * ic;
            }
        }
    }
    Ok(inv)
}
