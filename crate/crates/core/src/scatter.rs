//! Scatter functionals evaluated at the empirical distribution.
//!
//! All covariance-type matrices use the `1/n` divisor. Mahalanobis radii are
//! computed through the symmetric inverse square root `S^{-1/2}`, factorized
//! once per call.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, sym_power_from_eigen, Exponent, SymMatrix};

const SPATIAL_MEDIAN_MAX_ITER: usize = 500;
const SPATIAL_MEDIAN_TOL: f64 = 1e-10;
const TYLER_MAX_ITER: usize = 200;
const TYLER_TOL: f64 = 1e-8;

/// Which functional produced a [`ScatterEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterKind {
    Cov,
    TylerFull,
    TylerKStep(usize),
}

impl ScatterKind {
    pub fn is_tyler(self) -> bool {
        !matches!(self, ScatterKind::Cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterEstimate {
    pub kind: ScatterKind,
    pub location: DVector<f64>,
    pub matrix: SymMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Column means and the `1/n` covariance matrix.
pub fn mean_cov(x: &DataTable) -> ScatterEstimate {
    let location = column_means(x.matrix());
    let matrix = scatter_about(x.matrix(), &location);
    ScatterEstimate {
        kind: ScatterKind::Cov,
        location,
        matrix,
        iterations: 0,
        converged: true,
    }
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn centered(m: &DMatrix<f64>, location: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= location.transpose();
    }
    c
}

/// `(1/n) sum (x_i - loc)(x_i - loc)'`.
pub(crate) fn scatter_about(m: &DMatrix<f64>, location: &DVector<f64>) -> SymMatrix {
    let c = centered(m, location);
    SymMatrix::symmetrize(c.transpose() * &c / m.nrows() as f64)
}

/// Squared Mahalanobis radii of the rows of `x` about `location` with respect
/// to `scatter`.
pub fn mahalanobis_sq(x: &DataTable, location: &DVector<f64>, scatter: &SymMatrix) -> Result<Vec<f64>> {
    let w = sym_power_from_eigen(&sym_eigen(scatter)?, Exponent::NegHalf)?;
    let z = centered(x.matrix(), location) * w.as_matrix();
    Ok(z.row_iter().map(|r| r.norm_squared()).collect())
}

/// Minimizer of `sum_i |x_i - mu|` by Weiszfeld iteration.
///
/// When an iterate lands on a data point the modified step of Vardi and Zhang
/// is used: either the point satisfies the subgradient optimality condition
/// and is returned, or the iterate is moved off it along the descent
/// direction.
pub fn spatial_median(x: &DataTable) -> Result<DVector<f64>> {
    let m = x.matrix();
    let (n, p) = m.shape();
    let mut y = coordinate_median(m);
    let scale = m.row_iter().map(|r| (r.transpose() - &y).norm()).sum::<f64>() / n as f64;
    if scale == 0.0 {
        return Err(Error::InvalidInput(
            "all observations coincide; spatial median undefined".into(),
        ));
    }
    let coincide_tol = 1e-12 * scale;

    for it in 0..SPATIAL_MEDIAN_MAX_ITER {
        let mut num = DVector::<f64>::zeros(p);
        let mut den = 0.0;
        let mut pull = DVector::<f64>::zeros(p);
        let mut eta = 0usize;
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, row) in m.row_iter().enumerate() {
            let diff = row.transpose() - &y;
            let d = diff.norm();
            if d < nearest.0 {
                nearest = (d, i);
            }
            if d <= coincide_tol {
                eta += 1;
                continue;
            }
            num += row.transpose() / d;
            den += 1.0 / d;
            pull += diff / d;
        }

        let next = if eta == 0 {
            num / den
        } else {
            let r = pull.norm();
            if r <= eta as f64 {
                return Ok(y);
            }
            let t = num / den;
            let w = (eta as f64 / r).min(1.0);
            t * (1.0 - w) + &y * w
        };
        let step = (&next - &y).norm();
        y = next;
        if step <= SPATIAL_MEDIAN_TOL * scale {
            return Ok(y);
        }
        // Slow approach to a data point: test that point directly.
        if it > 20 && nearest.0 <= 1e-6 * scale {
            let cand = m.row(nearest.1).transpose();
            if data_point_is_optimal(m, &cand, coincide_tol) {
                return Ok(cand);
            }
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: SPATIAL_MEDIAN_MAX_ITER,
        last: y.iter().copied().collect(),
    })
}

fn data_point_is_optimal(m: &DMatrix<f64>, cand: &DVector<f64>, tol: f64) -> bool {
    let mut pull = DVector::<f64>::zeros(m.ncols());
    let mut eta = 0usize;
    for row in m.row_iter() {
        let diff = row.transpose() - cand;
        let d = diff.norm();
        if d <= tol {
            eta += 1;
        } else {
            pull += diff / d;
        }
    }
    pull.norm() <= eta as f64
}

fn coordinate_median(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.ncols(),
        m.column_iter().map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let k = v.len();
            if k % 2 == 1 {
                v[k / 2]
            } else {
                0.5 * (v[k / 2 - 1] + v[k / 2])
            }
        }),
    )
}

/// Iteration mode for [`tyler_shape`].
#[derive(Debug, Clone, PartialEq)]
pub enum TylerMode {
    /// Iterate to convergence from the trace-normalized covariance.
    Full,
    /// Exactly `steps` fixed-point updates from `init`.
    KStep { steps: usize, init: SymMatrix },
}

/// Tyler's shape matrix about a fixed location, normalized to trace `p`.
///
/// The update is `V <- (p/n) sum u_i u_i' / (u_i' V^{-1} u_i)` followed by
/// rescaling to trace `p`. Full mode stops when the relative Frobenius change
/// drops to 1e-8 or after 200 updates (reported through `converged`).
pub fn tyler_shape(x: &DataTable, location: &DVector<f64>, mode: TylerMode) -> Result<ScatterEstimate> {
    let u = centered(x.matrix(), location);
    let (n, p) = u.shape();
    let norms: Vec<f64> = u.row_iter().map(|r| r.norm()).collect();
    let scale = norms.iter().sum::<f64>() / n as f64;
    if let Some(i) = norms.iter().position(|&d| d <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateObservation(i));
    }

    let (kind, max_steps, mut v) = match mode {
        TylerMode::Full => (
            ScatterKind::TylerFull,
            TYLER_MAX_ITER,
            trace_normalized(SymMatrix::symmetrize(u.transpose() * &u / n as f64))?,
        ),
        TylerMode::KStep { steps, init } => {
            if init.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    actual: init.dim(),
                });
            }
            (ScatterKind::TylerKStep(steps), steps, trace_normalized(init)?)
        }
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_steps {
        let next = tyler_update(&u, &v)?;
        let change = (next.as_matrix() - v.as_matrix()).norm() / v.as_matrix().norm();
        v = next;
        iterations += 1;
        if change <= TYLER_TOL {
            converged = true;
            if kind == ScatterKind::TylerFull {
                break;
            }
        }
    }
    Ok(ScatterEstimate {
        kind,
        location: location.clone(),
        matrix: v,
        iterations,
        converged,
    })
}

/// One fixed-point update of Tyler's shape matrix (trace normalized to p).
pub fn tyler_update(u: &DMatrix<f64>, v: &SymMatrix) -> Result<SymMatrix> {
    let (n, p) = u.shape();
    let w = sym_power_from_eigen(&sym_eigen(v)?, Exponent::NegHalf)?;
    let z = u * w.as_matrix();
    let mut weighted = u.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        let d = z.row(i).norm_squared();
        if d <= 0.0 {
            return Err(Error::DegenerateObservation(i));
        }
        row /= d.sqrt();
    }
    let next = SymMatrix::symmetrize(weighted.transpose() * &weighted * (p as f64 / n as f64));
    trace_normalized(next)
}

fn trace_normalized(v: SymMatrix) -> Result<SymMatrix> {
    let tr = v.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::SingularMatrix);
    }
    Ok(v.scale(v.dim() as f64 / tr))
}

/// Scatter matrix based on fourth moments,
/// `(1/n) sum r_i^2 (x_i - m)(x_i - m)'` with `r_i` the Mahalanobis radius
/// with respect to `s1` and `m = s1.location`.
pub fn fourth_moment_scatter(x: &DataTable, s1: &ScatterEstimate) -> Result<SymMatrix> {
    let r2 = mahalanobis_sq(x, &s1.location, &s1.matrix)?;
    let mut c = centered(x.matrix(), &s1.location);
    for (mut row, r) in c.row_iter_mut().zip(&r2) {
        row *= r.sqrt();
    }
    Ok(SymMatrix::symmetrize(c.transpose() * &c / x.n() as f64))
}

/// Plug-in estimate of the scatter's asymptotic variance constant,
/// `(1/(p(p+2))) (1/n) sum alpha(r_i)^2`, with `alpha(r) = r^2` for the
/// covariance and `alpha(r) = p + 2` for Tyler's shape matrix.
pub fn sigma1_hat(x: &DataTable, s: &ScatterEstimate) -> Result<f64> {
    let p = x.p() as f64;
    if s.kind.is_tyler() {
        return Ok((p + 2.0) / p);
    }
    let r2 = mahalanobis_sq(x, &s.location, &s.matrix)?;
    let mean_r4 = r2.iter().map(|r| r * r).sum::<f64>() / r2.len() as f64;
    Ok(mean_r4 / (p * (p + 2.0)))
}

/// Partition of the response range into slices.
///
/// Labels are zero-based slice indices. `boundaries[h]` is the closed upper
/// end of slice `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAssignment {
    pub boundaries: Vec<f64>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
}

impl SliceAssignment {
    /// Number of (non-empty) slices.
    pub fn h(&self) -> usize {
        self.counts.len()
    }

    /// Assigns `y` to slices with the given upper boundaries. Empty slices are
    /// merged away so every remaining slice is non-empty.
    pub fn from_boundaries(y: &[f64], boundaries: &[f64]) -> SliceAssignment {
        let label_of = |b: &[f64], v: f64| b.partition_point(|&q| q < v);
        let mut counts = vec![0usize; boundaries.len() + 1];
        for &v in y {
            counts[label_of(boundaries, v)] += 1;
        }
        let last_nonempty = counts.iter().rposition(|&c| c > 0).unwrap_or(0);
        let kept: Vec<f64> = boundaries
            .iter()
            .enumerate()
            .filter(|&(h, _)| counts[h] > 0 && h < last_nonempty)
            .map(|(_, &b)| b)
            .collect();
        let labels: Vec<usize> = y.iter().map(|&v| label_of(&kept, v)).collect();
        let mut counts = vec![0usize; kept.len() + 1];
        for &l in &labels {
            counts[l] += 1;
        }
        SliceAssignment {
            boundaries: kept,
            labels,
            counts,
        }
    }
}

/// Slices at the sample `i/H` quantiles of `y` (linear interpolation between
/// order statistics, R's default), ties at a boundary going to the lower
/// slice.
pub fn make_slices(y: &[f64], h: usize) -> Result<SliceAssignment> {
    if h < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 slices, got {h}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite response value".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < h {
        return Err(Error::InsufficientVariation {
            distinct: distinct.len(),
            required: h,
        });
    }
    let boundaries: Vec<f64> = (1..h).map(|i| quantile_linear(&sorted, i as f64 / h as f64)).collect();
    Ok(SliceAssignment::from_boundaries(y, &boundaries))
}

fn quantile_linear(sorted: &[f64], prob: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * prob;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Between-slice scatter `(1/n) sum_h n_h (xbar_h - xbar)(xbar_h - xbar)'`.
pub fn sir_between_scatter(x: &DataTable, slices: &SliceAssignment) -> Result<SymMatrix> {
    if slices.labels.len() != x.n() {
        return Err(Error::DimensionMismatch {
            expected: x.n(),
            actual: slices.labels.len(),
        });
    }
    let p = x.p();
    let mean = column_means(x.matrix());
    let mut sums = vec![DVector::<f64>::zeros(p); slices.h()];
    for (row, &l) in x.matrix().row_iter().zip(&slices.labels) {
        sums[l] += row.transpose();
    }
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    for (sum, &count) in sums.iter().zip(&slices.counts) {
        let d = sum / count as f64 - &mean;
        s2 += &d * d.transpose() * count as f64;
    }
    Ok(SymMatrix::symmetrize(s2 / x.n() as f64))
}
