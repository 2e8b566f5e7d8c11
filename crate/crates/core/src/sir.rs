//! Tests for the dimension of the sliced-inverse-regression subspace.
//!
//! `R = S1^{-1/2} S2 S1^{-1/2}` with `S2` the between-slice scatter of the
//! inverse-regression means; `H_0k` says exactly `k` eigenvalues are nonzero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_pvalue, BootstrapConfig, Stream};
use crate::data::DataTable;
use crate::distributions::chisq_sf;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, sym_power_from_eigen, EigenSystem, Exponent, SymMatrix};
use crate::pca::add_rows;
use crate::result::{Family, Mode, ReferenceLaw, TestResult, NOTE_DIVISOR};
use crate::scatter::{centered, make_slices, mean_cov, sir_between_scatter, SliceAssignment};

pub const DEFAULT_SLICES: usize = 10;

/// How bootstrap replicates slice the resampled response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    /// Fresh quantile slices on every resampled response.
    Recompute,
    /// Reuse the boundaries found on the original response.
    Freeze,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirFit {
    pub mean: DVector<f64>,
    pub s1: SymMatrix,
    pub s2: SymMatrix,
    pub r: SymMatrix,
    pub eigen: EigenSystem,
    /// Unmixing matrix `U' S1^{-1/2}`.
    pub w: DMatrix<f64>,
    pub slices: SliceAssignment,
    /// Slice count asked for; `slices.h()` can be smaller after merging.
    pub requested_h: usize,
    s1_half: SymMatrix,
}

/// Slices `y` into `h` quantile slices and fits the SIR pair.
pub fn sir_fit(x: &DataTable, y: &[f64], h: usize) -> Result<SirFit> {
    check_response(x, y)?;
    let slices = make_slices(y, h)?;
    sir_fit_with_slices(x, slices, h)
}

fn check_response(x: &DataTable, y: &[f64]) -> Result<()> {
    if y.len() != x.n() {
        return Err(Error::DimensionMismatch {
            expected: x.n(),
            actual: y.len(),
        });
    }
    Ok(())
}

pub fn sir_fit_with_slices(x: &DataTable, slices: SliceAssignment, requested_h: usize) -> Result<SirFit> {
    let s1 = mean_cov(x);
    let eig1 = sym_eigen(&s1.matrix)?;
    let neg_half = sym_power_from_eigen(&eig1, Exponent::NegHalf)?;
    let s1_half = sym_power_from_eigen(&eig1, Exponent::Half)?;
    let s2 = sir_between_scatter(x, &slices)?;
    let r = s2.congruence(neg_half.as_matrix());
    let eigen = sym_eigen(&r)?;
    let w = eigen.vectors.transpose() * neg_half.as_matrix();
    Ok(SirFit {
        mean: s1.location,
        s1: s1.matrix,
        s2,
        r,
        eigen,
        w,
        slices,
        requested_h,
        s1_half,
    })
}

impl SirFit {
    pub fn p(&self) -> usize {
        self.eigen.dim()
    }

    /// Effective number of slices.
    pub fn h(&self) -> usize {
        self.slices.h()
    }

    fn check_k(&self, k: usize, max: usize) -> Result<()> {
        if k > max {
            return Err(Error::InvalidK { k, min: 0, max });
        }
        Ok(())
    }

    /// Mean of the `p - k` smallest eigenvalues, negative roundoff clamped to 0.
    pub fn tk(&self, k: usize) -> Result<f64> {
        self.check_k(k, self.p() - 1)?;
        let tail = &self.eigen.values[k..];
        Ok(tail.iter().map(|v| v.max(0.0)).sum::<f64>() / tail.len() as f64)
    }

    pub fn components(&self, x: &DataTable) -> DMatrix<f64> {
        centered(x.matrix(), &self.mean) * self.w.transpose()
    }

    fn mixing_t(&self) -> DMatrix<f64> {
        self.eigen.vectors.transpose() * self.s1_half.as_matrix()
    }
}

fn base_result(x: &DataTable, fit: &SirFit, k: usize, statistic: f64) -> TestResult {
    let mut warnings = Vec::new();
    if fit.h() < fit.requested_h {
        warnings.push(format!(
            "{} of {} slices were empty after tie handling and merged",
            fit.requested_h - fit.h(),
            fit.requested_h
        ));
    }
    TestResult {
        family: Family::Sir,
        k,
        statistic,
        p_value: 1.0,
        mode: Mode::Asymptotic,
        df_or_mixture: ReferenceLaw::Degenerate,
        scatter: "cov+between_slices".into(),
        n: x.n(),
        p: x.p(),
        h: Some(fit.h()),
        m: None,
        seed: None,
        d_hat: None,
        sigma1_hat: None,
        warnings,
        notes: vec![NOTE_DIVISOR.to_string()],
    }
}

/// Asymptotic test of `H_0k`: `n (p-k) T_k` against chi-square with
/// `(p-k)(H-k-1)` degrees of freedom. Needs `H >= k + 2`.
pub fn sir_asymptotic(x: &DataTable, fit: &SirFit, k: usize) -> Result<TestResult> {
    let p = fit.p();
    let statistic = fit.tk(k)?;
    let h = fit.h();
    if h < k + 2 {
        return Err(Error::InvalidSlices { slices: h, k });
    }
    let df = (p - k) * (h - k - 1);
    let scaled = (x.n() * (p - k)) as f64 * statistic;
    let mut r = base_result(x, fit, k, statistic);
    r.p_value = chisq_sf(scaled, df);
    r.df_or_mixture = ReferenceLaw::ChiSquared {
        df,
        scaled_statistic: scaled,
    };
    Ok(r)
}

pub fn sir_asymp_pvalue(x: &DataTable, y: &[f64], k: usize, h: usize) -> Result<TestResult> {
    let fit = sir_fit(x, y, h)?;
    sir_asymptotic(x, &fit, k)
}

/// Sample from the null for `H_0k` in which `(y, z_1)` is independent of the
/// noise coordinates `z_2`: the response and the first `k` components come
/// from one resampled row, the remaining components from an independently
/// resampled row.
pub fn sir_resample(
    x: &DataTable,
    y: &[f64],
    k: usize,
    fit: &SirFit,
    rng: &mut Stream,
) -> Result<(Vec<f64>, DataTable)> {
    check_response(x, y)?;
    let (n, p) = (x.n(), x.p());
    fit.check_k(k, p)?;
    let z = fit.components(x);
    let mut zs = DMatrix::<f64>::zeros(n, p);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        ys.push(y[a]);
        for j in 0..p {
            zs[(i, j)] = if j < k { z[(a, j)] } else { z[(b, j)] };
        }
    }
    let mut out = zs * fit.mixing_t();
    add_rows(&mut out, &fit.mean);
    Ok((ys, x.with_values(out)))
}

/// Bootstrap test of `H_0k` with the raw statistic `T_k`.
pub fn sir_bootstrap(
    x: &DataTable,
    y: &[f64],
    fit: &SirFit,
    k: usize,
    slicing: SliceMode,
    config: &BootstrapConfig,
) -> Result<TestResult> {
    let t_obs = fit.tk(k)?;
    let outcome = bootstrap_pvalue(t_obs, config, |rng| {
        let (ys, xs) = sir_resample(x, y, k, fit, rng)?;
        let slices = match slicing {
            SliceMode::Recompute => make_slices(&ys, fit.requested_h)?,
            SliceMode::Freeze => SliceAssignment::from_boundaries(&ys, &fit.slices.boundaries),
        };
        sir_fit_with_slices(&xs, slices, fit.requested_h)?.tk(k)
    })?;
    let mut r = base_result(x, fit, k, t_obs);
    r.p_value = outcome.p_value;
    r.mode = Mode::Boot;
    r.df_or_mixture = ReferenceLaw::Bootstrap {
        exceedances: outcome.exceedances,
        variance: outcome.variance,
    };
    r.m = Some(config.m);
    r.seed = Some(config.master_seed);
    r.notes.push(match slicing {
        SliceMode::Recompute => "replicates are re-sliced at their own quantiles".into(),
        SliceMode::Freeze => "replicates reuse the original slice boundaries".into(),
    });
    if !outcome.retried.is_empty() {
        r.warnings
            .push(format!("{} replicate(s) needed a retry", outcome.retried.len()));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bootstrap::stream;
    use crate::linalg::{haar_orthogonal, value_moments};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn model(n: usize, p: usize, seed: u64) -> (DataTable, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::<f64>::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = (0..n)
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                z[(i, 0)] * (z[(i, 0)] + z[(i, 1)] + 1.0) + 0.5 * e
            })
            .collect();
        (DataTable::from_matrix(z).unwrap(), y)
    }

    /// Pillai's trace `tr(B (B + W)^{-1})` from a one-way MANOVA on the slice
    /// labels, with an LU inverse.
    fn pillai_trace(x: &DataTable, labels: &[usize], groups: usize) -> f64 {
        let p = x.p();
        let grand = DVector::from_iterator(p, x.matrix().column_iter().map(|c| c.mean()));
        let mut means = vec![DVector::<f64>::zeros(p); groups];
        let mut counts = vec![0usize; groups];
        for (i, &g) in labels.iter().enumerate() {
            means[g] += x.row(i);
            counts[g] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            *m /= c as f64;
        }
        let mut b = DMatrix::<f64>::zeros(p, p);
        for (m, &c) in means.iter().zip(&counts) {
            let d = m - &grand;
            b += &d * d.transpose() * c as f64;
        }
        let mut w = DMatrix::<f64>::zeros(p, p);
        for (i, &g) in labels.iter().enumerate() {
            let d = x.row(i) - &means[g];
            w += &d * d.transpose();
        }
        let t_inv = (&b + &w).lu().try_inverse().unwrap();
        (b * t_inv).trace()
    }

    #[test]
    fn pillai_identity() {
        let (x, y) = model(300, 5, 1);
        let fit = sir_fit(&x, &y, 7).unwrap();
        let lhs = fit.r.trace();
        let rhs = pillai_trace(&x, &fit.slices.labels, fit.h());
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn eigenvalue_range_and_rank() {
        let (x, y) = model(200, 6, 2);
        let fit = sir_fit(&x, &y, 3).unwrap();
        assert!(fit.eigen.values.iter().all(|&v| (-1e-10..=1.0 + 1e-8).contains(&v)));
        assert!(fit.eigen.values.iter().filter(|&&v| v > 1e-10).count() <= 2);
        for k in 2..6 {
            assert!(fit.tk(k).unwrap() < 1e-10);
        }
    }

    #[test]
    fn symmetric_design_has_zero_statistic() {
        let x = DataTable::from_rows(&[
            vec![1.0, 2.0],
            vec![-1.0, -2.0],
            vec![3.0, 1.0],
            vec![-3.0, -1.0],
            vec![0.5, -1.0],
            vec![-0.5, 1.0],
        ])
        .unwrap();
        let slices = SliceAssignment::from_boundaries(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0], &[0.5, 1.5]);
        let fit = sir_fit_with_slices(&x, slices, 3).unwrap();
        for k in 0..2 {
            assert!(fit.tk(k).unwrap() < 1e-15);
        }
    }

    #[test]
    fn affine_invariance() {
        let (x, y) = model(250, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = haar_orthogonal(4, &mut rng) * DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.2, 5.0]));
        let xa = x.affine(&a, &DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let f = sir_fit(&x, &y, 10).unwrap();
        let g = sir_fit(&xa, &y, 10).unwrap();
        for (u, v) in f.eigen.values.iter().zip(&g.eigen.values) {
            assert!((u - v).abs() < 1e-7);
        }
    }

    #[test]
    fn asymptotic_df_and_slice_check() {
        let (x, y) = model(300, 6, 5);
        let r = sir_asymp_pvalue(&x, &y, 2, 10).unwrap();
        assert!(matches!(r.df_or_mixture, ReferenceLaw::ChiSquared { df: 28, .. }));
        assert_eq!(r.h, Some(10));
        assert_eq!(
            sir_asymp_pvalue(&x, &y, 2, 3).unwrap_err(),
            Error::InvalidSlices { slices: 3, k: 2 }
        );
    }

    #[test]
    fn tk_below_reference_block_mean() {
        // T_k is the mean of the smallest eigenvalues, never above the mean of
        // the trailing diagonal block of R in any other orthonormal basis.
        let (x, y) = model(400, 6, 6);
        let fit = sir_fit(&x, &y, 10).unwrap();
        for k in 0..6 {
            let block: Vec<f64> = (k..6).map(|i| fit.r[(i, i)]).collect();
            assert!(fit.tk(k).unwrap() <= value_moments(&block).m1 + 1e-12);
        }
    }

    #[test]
    fn resample_edge_cases() {
        let (x, y) = model(60, 3, 7);
        let fit = sir_fit(&x, &y, 4).unwrap();
        for (k, seed) in [(3usize, 0u64), (0, 1)] {
            let mut rng = stream(1, seed);
            let (ys, xs) = sir_resample(&x, &y, k, &fit, &mut rng.clone()).unwrap();
            for i in 0..60 {
                let a = rng.random_range(0..60);
                let b = rng.random_range(0..60);
                assert_eq!(ys[i], y[a]);
                // k = p: paired draw of row a; k = 0: every coordinate from row b
                let src = if k == 3 { a } else { b };
                assert!((xs.row(i) - x.row(src)).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn resampled_response_independent_of_noise() {
        let (x, y) = model(200, 4, 8);
        let fit = sir_fit(&x, &y, 10).unwrap();
        let k = 2;
        let mut ys = Vec::new();
        let mut noise = Vec::new();
        for r in 0..10 {
            let (yr, xr) = sir_resample(&x, &y, k, &fit, &mut stream(9, r)).unwrap();
            let z = fit.components(&xr);
            ys.extend(yr);
            noise.push(z);
        }
        let total = ys.len() as f64;
        for j in k..4 {
            let col: Vec<f64> = noise
                .iter()
                .flat_map(|z| z.column(j).iter().copied().collect::<Vec<_>>())
                .collect();
            let my = ys.iter().sum::<f64>() / total;
            let mc = col.iter().sum::<f64>() / total;
            let cov: f64 = ys.iter().zip(&col).map(|(a, b)| (a - my) * (b - mc)).sum::<f64>() / total;
            let sy = (ys.iter().map(|a| (a - my).powi(2)).sum::<f64>() / total).sqrt();
            let sc = (col.iter().map(|b| (b - mc).powi(2)).sum::<f64>() / total).sqrt();
            assert!((cov / (sy * sc)).abs() < 3.0 / total.sqrt(), "column {j}");
        }
    }

    #[test]
    fn resampler_is_deterministic() {
        let (x, y) = model(40, 3, 9);
        let fit = sir_fit(&x, &y, 4).unwrap();
        assert_eq!(
            sir_resample(&x, &y, 1, &fit, &mut stream(5, 5)).unwrap(),
            sir_resample(&x, &y, 1, &fit, &mut stream(5, 5)).unwrap()
        );
    }
}
