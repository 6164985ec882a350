//! Random sampling and dense linear-algebra kernels shared by the bound and
//! simulation modules.
//!
//! Complex Gaussian entries follow the circularly symmetric convention: an
//! entry of variance `v` has real and imaginary parts each of variance `v/2`,
//! so `|x|^2` of a unit-variance entry is Exp(1).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Tolerance on `|A - A^H|` used to accept a matrix as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Largest Gram-matrix condition number accepted before a column set is
/// declared rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

/// Counter-based random stream. A `(seed, stream)` pair always yields the
/// same sequence; distinct streams of one seed are independent ChaCha
/// keystreams, so Monte-Carlo trials can run in any order.
#[derive(Clone, Debug)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// One circularly symmetric complex Gaussian draw with total variance `variance`.
    pub fn complex_gaussian(&mut self, variance: f64) -> Complex64 {
        let s = (0.5 * variance).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        Complex64::new(s * re, s * im)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `rows x cols` matrix of i.i.d. CN(0, variance) entries, filled column by column.
pub fn sample_complex_gaussian(
    rows: usize,
    cols: usize,
    variance: f64,
    rng: &mut StreamRng,
) -> Result<CMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "variance must be positive and finite, got {variance}"
        )));
    }
    Ok(CMatrix::from_fn(rows, cols, |_, _| rng.complex_gaussian(variance)))
}

pub fn is_hermitian(a: &CMatrix, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    for j in 0..n {
        for i in 0..=j {
            if (a[(i, j)] - a[(j, i)].conj()).norm() > tol {
                return false;
            }
        }
    }
    true
}

fn hermitian_tolerance(a: &CMatrix) -> f64 {
    let scale = a.iter().fold(1.0_f64, |m, z| m.max(z.norm()));
    HERMITIAN_TOL * scale
}

/// Eigendecomposition `A = Q diag(lambda) Q^H` of a Hermitian matrix, with
/// eigenvalues sorted in descending order and `Q` unitary.
pub fn hermitian_eig(a: &CMatrix) -> Result<(CMatrix, DVector<f64>)> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    if !is_hermitian(a, hermitian_tolerance(a)) {
        return Err(Error::InvalidArgument("matrix is not Hermitian".into()));
    }
    let eig = SymmetricEigen::new(a.clone());
    let order = descending_order(eig.eigenvalues.as_slice());
    let n = a.nrows();
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vectors, values))
}

/// Real symmetric eigendecomposition, eigenvalues descending.
pub fn symmetric_eig(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_symmetric(a)?;
    let eig = SymmetricEigen::new(a.clone());
    let order = descending_order(eig.eigenvalues.as_slice());
    let n = a.nrows();
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vectors, values))
}

/// Eigenvalues only of a real symmetric matrix, descending. Skips the
/// eigenvector accumulation, which dominates the cost for large `N`.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_symmetric(a)?;
    let mut values: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(DVector::from_vec(values))
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::InvalidArgument("matrix is not square".into()));
    }
    let scale = a.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            if (a[(i, j)] - a[(j, i)]).abs() > HERMITIAN_TOL * scale {
                return Err(Error::InvalidArgument("matrix is not symmetric".into()));
            }
        }
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    Ok(())
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    idx
}

/// Cholesky factor of the Gram matrix `A^H A`. Column sets are rejected as
/// rank deficient when a squared pivot falls below `1 / MAX_CONDITION` of the
/// largest diagonal entry, a cheap stand-in for a condition-number test.
pub struct GramFactor {
    chol: Cholesky<Complex64, nalgebra::Dyn>,
}

impl GramFactor {
    pub fn new(a: &CMatrix) -> Result<Self> {
        let gram = a.ad_mul(a);
        let scale = gram.diagonal().iter().map(|z| z.re).fold(0.0, f64::max);
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::SingularMatrix("Gram matrix is not positive definite".into()))?;
        let min_pivot = chol.l_dirty().diagonal().iter().map(|z| z.re * z.re).fold(f64::INFINITY, f64::min);
        if !(scale > 0.0) || !(min_pivot > scale / MAX_CONDITION) {
            return Err(Error::SingularMatrix(format!(
                "Gram matrix of {} columns is rank deficient (smallest pivot {min_pivot:e}, scale {scale:e})",
                a.ncols()
            )));
        }
        Ok(Self { chol })
    }

    /// `(A^H A)^{-1} b`
    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        self.chol.solve(b)
    }
}

/// `I - A (A^H A)^{-1} A^H`, the projector onto the orthogonal complement of
/// the column span of `A` (`L x r`). With no columns this is the identity.
pub fn orthogonal_projector(a: &CMatrix) -> Result<CMatrix> {
    let l = a.nrows();
    if a.ncols() == 0 {
        return Ok(CMatrix::identity(l, l));
    }
    if a.ncols() >= l {
        return Err(Error::SingularMatrix(format!(
            "{} columns span all of C^{l}; no orthogonal complement",
            a.ncols()
        )));
    }
    let gram = GramFactor::new(a)?;
    let coeffs = gram.solve(&a.adjoint());
    Ok(CMatrix::identity(l, l) - a * coeffs)
}

/// `||P_A v||^2`, the energy of `v` inside the column span of `A`, without
/// forming the `L x L` projector.
pub fn span_energy(a: &CMatrix, v: &CVector) -> Result<f64> {
    if a.ncols() == 0 {
        return Ok(0.0);
    }
    let gram = GramFactor::new(a)?;
    let rhs = a.adjoint() * v;
    let coeffs = gram.solve(&CMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    // ||P v||^2 = v^H A (A^H A)^{-1} A^H v
    let e: Complex64 = rhs
        .iter()
        .zip(coeffs.iter())
        .map(|(r, c)| r.conj() * c)
        .sum();
    Ok(e.re.max(0.0))
}

/// `P_perp v = v - A (A^H A)^{-1} A^H v`, the part of `v` orthogonal to the
/// columns of `A`.
pub fn complement_component(a: &CMatrix, v: &CVector) -> Result<CVector> {
    if a.ncols() == 0 {
        return Ok(v.clone());
    }
    let gram = GramFactor::new(a)?;
    let rhs = a.adjoint() * v;
    let coeffs = gram.solve(&CMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    Ok(v - a * coeffs.column(0))
}

/// Inverse of a real symmetric positive definite matrix. Fails when the
/// condition number exceeds [`MAX_CONDITION`].
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.symmetric_eigenvalues();
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::SingularMatrix(format!(
            "matrix of order {} is singular or ill-conditioned (eigenvalue range {min:e}..{max:e})",
            a.nrows()
        )));
    }
    Cholesky::new(a.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularMatrix("Cholesky factorisation failed".into()))
}

/// `[A^{-1}]_kk` of a real symmetric positive definite matrix from one
/// Cholesky solve. Rank is judged like [`GramFactor`], on the pivots of the
/// unit-diagonal rescaling of `A`.
pub fn spd_inverse_entry(a: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = a.nrows();
    if k >= n {
        return Err(Error::InvalidArgument(format!("index {k} out of range for order {n}")));
    }
    let d: Vec<f64> = a.diagonal().iter().map(|v| v.sqrt()).collect();
    if !d.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(Error::SingularMatrix("matrix has a non-positive diagonal entry".into()));
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]));
    let chol = Cholesky::new(scaled)
        .ok_or_else(|| Error::SingularMatrix("Cholesky factorisation failed".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1.0 / MAX_CONDITION) {
        return Err(Error::SingularMatrix(format!(
            "matrix of order {n} is numerically singular (smallest scaled pivot {min_pivot:e})"
        )));
    }
    let mut e = DVector::zeros(n);
    e[k] = 1.0;
    Ok(chol.solve(&e)[k] / (d[k] * d[k]))
}

/// Condition number of a symmetric PSD matrix from its eigenvalues.
pub fn spd_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.symmetric_eigenvalues();
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn frobenius(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace_re(a: &CMatrix) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)].re).sum()
}
