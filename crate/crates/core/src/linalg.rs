//! Dense symmetric linear algebra shared by every test family.
//!
//! Eigen-decompositions use the cyclic Jacobi method. All matrices in this
//! crate are small (p is at most a few dozen), and Jacobi keeps eigenvectors
//! orthonormal to machine precision, which the projection identities used by
//! the bootstrap resamplers rely on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Real symmetric matrix. Construction symmetrizes the input as `(A + A')/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a square matrix, symmetrizing it.
    ///
    /// Fails on non-square or non-finite input, and on input whose asymmetry
    /// exceeds roundoff (|a_ij - a_ji| > 1e-10 (1 + |a_ij|) after scaling by the
    /// largest entry).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let scale = m.amax().max(1.0);
        let p = m.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                let (a, b) = (m[(i, j)] / scale, m[(j, i)] / scale);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs()) {
                    return Err(Error::InvalidInput(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes without any tolerance check. Use for matrices that are
    /// symmetric by construction.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(p: usize) -> Self {
        SymMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(DMatrix::zeros(p, p))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// `B' A B` for an arbitrary (possibly rectangular) `B`.
    pub fn congruence(&self, b: &DMatrix<f64>) -> SymMatrix {
        Self::symmetrize(b.transpose() * &self.0 * b)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenvalues in descending order with orthonormal eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Columns `range` of the eigenvector matrix.
    pub fn columns(&self, start: usize, count: usize) -> DMatrix<f64> {
        self.vectors.columns(start, count).into_owned()
    }

    /// `U diag(values) U'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * d * self.vectors.transpose()
    }

    /// Reorders values and vectors by the given permutation of indices.
    pub(crate) fn permuted(&self, order: &[usize]) -> EigenSystem {
        let p = self.dim();
        let mut vectors = DMatrix::zeros(p, p);
        let mut values = Vec::with_capacity(p);
        for (dst, &src) in order.iter().enumerate() {
            values.push(self.values[src]);
            vectors.set_column(dst, &self.vectors.column(src));
        }
        EigenSystem { values, vectors }
    }
}

/// First two eigen-moments and the eigenvalue variance of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriple {
    pub m1: f64,
    pub m2: f64,
    pub s2: f64,
}

/// Moments of the eigenvalues computed from traces: `m1 = tr(A)/p`,
/// `m2 = tr(A^2)/p`, `s2 = tr((A - m1 I)^2)/p`.
///
/// `s2` is accumulated from the centered matrix so that it stays nonnegative
/// and accurate when the eigenvalues are large and nearly equal.
pub fn matrix_moments(a: &SymMatrix) -> MomentTriple {
    let m = a.as_matrix();
    let p = a.dim() as f64;
    let m1 = m.trace() / p;
    let m2 = m.iter().map(|v| v * v).sum::<f64>() / p;
    let mut centered = 0.0;
    for j in 0..a.dim() {
        for i in 0..a.dim() {
            let v = if i == j { m[(i, j)] - m1 } else { m[(i, j)] };
            centered += v * v;
        }
    }
    MomentTriple {
        m1,
        m2,
        s2: centered / p,
    }
}

/// Moments of an explicit list of eigenvalues.
pub fn value_moments(values: &[f64]) -> MomentTriple {
    let p = values.len() as f64;
    let m1 = values.iter().sum::<f64>() / p;
    let m2 = values.iter().map(|v| v * v).sum::<f64>() / p;
    let s2 = values.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / p;
    MomentTriple { m1, m2, s2 }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Values are sorted in descending order. Each eigenvector is signed so that
/// its largest-magnitude component is positive (lowest index wins exact ties).
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenSystem> {
    if !a.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let n = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let frob2: f64 = m.iter().map(|x| x * x).sum();

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for j in 0..n {
            for i in 0..j {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off == 0.0 || off <= (f64::EPSILON * f64::EPSILON) * frob2 * 1e-4 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[(p, p)], m[(q, q)]);
                // Negligible relative to both diagonal entries: drop it.
                if apq.abs() < 1e-300 || apq.abs() <= 1e-3 * f64::EPSILON * app.abs().min(aqq.abs()) {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original index order for exact ties.
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(m[(src, src)]);
        let mut col = v.column(src).into_owned();
        normalize_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(EigenSystem { values, vectors })
}

fn normalize_sign(col: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.neg_mut();
    }
}

/// Exponents supported by [`sym_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exponent {
    Half,
    NegHalf,
    Inverse,
}

impl Exponent {
    fn apply(self, d: f64) -> f64 {
        match self {
            Exponent::Half => d.sqrt(),
            Exponent::NegHalf => 1.0 / d.sqrt(),
            Exponent::Inverse => 1.0 / d,
        }
    }
}

/// Symmetric matrix power `U D^e U'` of a positive definite matrix.
pub fn sym_power(a: &SymMatrix, exponent: Exponent) -> Result<SymMatrix> {
    let eig = sym_eigen(a)?;
    sym_power_from_eigen(&eig, exponent)
}

pub(crate) fn sym_power_from_eigen(eig: &EigenSystem, exponent: Exponent) -> Result<SymMatrix> {
    let largest = eig.values[0];
    let smallest = *eig.values.last().unwrap();
    if !(largest > 0.0) || smallest <= 1e-12 * largest {
        return Err(Error::SingularMatrix);
    }
    let d: Vec<f64> = eig.values.iter().map(|&v| exponent.apply(v)).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(d));
    Ok(SymMatrix::symmetrize(&eig.vectors * d * eig.vectors.transpose()))
}

/// Haar-distributed orthogonal matrix: QR of an iid Gaussian matrix with the
/// columns of Q flipped so that R has a positive diagonal.
pub fn haar_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(dim >= 1, "dimension must be positive");
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Applies an independent Haar rotation to `v`, in place.
///
/// For a single vector, `O v` with Haar `O` is distributed as `|v|` times a
/// uniform direction on the sphere, which is what is drawn here. This avoids
/// a QR factorization per observation in the resamplers.
pub fn haar_rotate<R: Rng + ?Sized>(v: &mut [f64], rng: &mut R) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    loop {
        let mut s = 0.0;
        for x in v.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
            s += *x * *x;
        }
        if s > 0.0 {
            let f = norm / s.sqrt();
            v.iter_mut().for_each(|x| *x *= f);
            return;
        }
    }
}

/// Number of eigenvalues above `tol` times the largest absolute eigenvalue.
pub fn numerical_rank(a: &SymMatrix, tol: f64) -> Result<usize> {
    let eig = sym_eigen(a)?;
    let top = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Ok(0);
    }
    Ok(eig.values.iter().filter(|v| v.abs() > tol * top).count())
}
