//! Subsphericity tests for principal component analysis.
//!
//! `H_0k`: the `p - k` smallest eigenvalues of the scatter matrix are equal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_pvalue, BootstrapConfig, Stream};
use crate::data::DataTable;
use crate::distributions::chisq_sf;
use crate::error::{Error, Result};
use crate::linalg::{haar_rotate, sym_eigen, value_moments, EigenSystem, SymMatrix};
use crate::result::{Family, Mode, ReferenceLaw, TestResult, NOTE_DIVISOR};
use crate::scatter::{centered, mean_cov, sigma1_hat, spatial_median, tyler_shape, ScatterEstimate, TylerMode};

/// Fixed-point steps used for Tyler's shape in `Tyler3` bootstrap replicates.
pub const TYLER_BOOT_STEPS: usize = 3;

/// Scatter functional behind a PCA fit.
///
/// `Tyler` and `Tyler3` fit the same estimate to the data; they differ in
/// bootstrap replicates, where `Tyler` iterates to convergence and `Tyler3`
/// takes three fixed-point steps from the original-sample estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScatter {
    Cov,
    Tyler,
    Tyler3,
}

impl PcaScatter {
    pub fn label(self) -> &'static str {
        match self {
            PcaScatter::Cov => "cov",
            PcaScatter::Tyler => "tyler",
            PcaScatter::Tyler3 => "tyler3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PcaStatistic {
    /// Variance of the tail eigenvalues.
    T,
    /// Log of arithmetic over geometric mean of the tail eigenvalues.
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PcaBootstrap {
    /// Elliptical subspherical null.
    I,
    /// Subspherical null.
    II,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub kind: PcaScatter,
    pub scatter: ScatterEstimate,
    pub eigen: EigenSystem,
}

/// Scatter estimate and its eigen-decomposition (cov about the mean; Tyler's
/// shape about the spatial median).
pub fn pca_fit(x: &DataTable, kind: PcaScatter) -> Result<PcaFit> {
    let scatter = match kind {
        PcaScatter::Cov => mean_cov(x),
        PcaScatter::Tyler | PcaScatter::Tyler3 => {
            let loc = spatial_median(x)?;
            tyler_shape(x, &loc, TylerMode::Full)?
        }
    };
    PcaFit::from_scatter(kind, scatter)
}

impl PcaFit {
    pub fn from_scatter(kind: PcaScatter, scatter: ScatterEstimate) -> Result<PcaFit> {
        let eigen = sym_eigen(&scatter.matrix)?;
        let top = eigen.values[0];
        if !(top > 0.0) || *eigen.values.last().unwrap() <= 1e-12 * top {
            return Err(Error::SingularMatrix);
        }
        Ok(PcaFit { kind, scatter, eigen })
    }

    pub fn p(&self) -> usize {
        self.eigen.dim()
    }

    fn check_k(&self, k: usize, max: usize) -> Result<()> {
        if k > max {
            return Err(Error::InvalidK { k, min: 0, max });
        }
        Ok(())
    }

    fn tail(&self, k: usize) -> &[f64] {
        &self.eigen.values[k..]
    }

    /// Variance of the `p - k` smallest eigenvalues.
    pub fn tk(&self, k: usize) -> Result<f64> {
        self.check_k(k, self.p() - 1)?;
        Ok(value_moments(self.tail(k)).s2.max(0.0))
    }

    /// Smallest variance of any `p - k` eigenvalues, with the start index of
    /// the minimizing window in the descending spectrum.
    pub fn vk(&self, k: usize) -> Result<(f64, usize)> {
        self.check_k(k, self.p() - 1)?;
        let len = self.p() - k;
        let mut best = (f64::INFINITY, 0);
        for start in 0..=k {
            let v = value_moments(&self.eigen.values[start..start + len]).s2.max(0.0);
            // later windows win ties so an equal tail is reported as the tail
            if v <= best.0 {
                best = (v, start);
            }
        }
        Ok(best)
    }

    /// `log(arithmetic mean / geometric mean)` of the `p - k` smallest
    /// eigenvalues.
    pub fn lk(&self, k: usize) -> Result<f64> {
        self.check_k(k, self.p() - 1)?;
        log_am_gm(self.tail(k))
    }

    /// Mean of the `p - k` smallest eigenvalues.
    pub fn d_hat(&self, k: usize) -> Result<f64> {
        self.check_k(k, self.p() - 1)?;
        Ok(value_moments(self.tail(k)).m1)
    }

    /// Projections `(P_k, Q_k)` onto the span of the `p - k` trailing
    /// eigenvectors and onto its complement.
    pub fn projections(&self, k: usize) -> Result<(SymMatrix, SymMatrix)> {
        self.check_k(k, self.p())?;
        let u = self.eigen.columns(k, self.p() - k);
        let pk = SymMatrix::symmetrize(&u * u.transpose());
        let qk = SymMatrix::symmetrize(DMatrix::identity(self.p(), self.p()) - pk.as_matrix());
        Ok((pk, qk))
    }

    fn statistic(&self, k: usize, stat: PcaStatistic) -> Result<f64> {
        match stat {
            PcaStatistic::T => self.tk(k),
            PcaStatistic::L => self.lk(k),
        }
    }

    /// Refit on a bootstrap sample with the same scatter functional.
    pub fn refit(&self, xstar: &DataTable) -> Result<PcaFit> {
        let scatter = match self.kind {
            PcaScatter::Cov => mean_cov(xstar),
            PcaScatter::Tyler => tyler_shape(xstar, &spatial_median(xstar)?, TylerMode::Full)?,
            PcaScatter::Tyler3 => tyler_shape(
                xstar,
                &spatial_median(xstar)?,
                TylerMode::KStep {
                    steps: TYLER_BOOT_STEPS,
                    init: self.scatter.matrix.clone(),
                },
            )?,
        };
        PcaFit::from_scatter(self.kind, scatter)
    }
}

fn log_am_gm(values: &[f64]) -> Result<f64> {
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidSpectrum(format!("nonpositive eigenvalue {v}")));
    }
    let len = values.len() as f64;
    let am = values.iter().sum::<f64>() / len;
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / len;
    Ok((am.ln() - mean_log).max(0.0))
}

fn base_result(x: &DataTable, fit: &PcaFit, k: usize, statistic: f64) -> TestResult {
    let mut warnings = Vec::new();
    if !fit.scatter.converged {
        warnings.push(format!(
            "Tyler iteration stopped after {} steps without meeting tolerance",
            fit.scatter.iterations
        ));
    }
    let mut notes = vec![NOTE_DIVISOR.to_string()];
    if fit.kind != PcaScatter::Cov {
        notes.push("shape matrix normalized to trace p; location is the spatial median".into());
    }
    TestResult {
        family: Family::Pca,
        k,
        statistic,
        p_value: 1.0,
        mode: Mode::Asymptotic,
        df_or_mixture: ReferenceLaw::Degenerate,
        scatter: fit.kind.label().into(),
        n: x.n(),
        p: x.p(),
        h: None,
        m: None,
        seed: None,
        d_hat: None,
        sigma1_hat: None,
        warnings,
        notes,
    }
}

/// Asymptotic test of `H_0k` from an existing fit.
///
/// `T`: `n (p-k) T_k / (2 d^2 sigma1)`; `L`: `n (p-k) L_k / sigma1`; both
/// against chi-square with `(p-k-1)(p-k+2)/2` degrees of freedom. For
/// `k = p - 1` there is nothing to test and the p-value is 1.
pub fn pca_asymptotic(x: &DataTable, fit: &PcaFit, k: usize, stat: PcaStatistic) -> Result<TestResult> {
    let p = fit.p();
    let statistic = fit.statistic(k, stat)?;
    let d = fit.d_hat(k)?;
    let sigma1 = sigma1_hat(x, &fit.scatter)?;
    let mut r = base_result(x, fit, k, statistic);
    r.d_hat = Some(d);
    r.sigma1_hat = Some(sigma1);
    if fit.kind != PcaScatter::Cov {
        r.notes
            .push("asymptotic law for the shape matrix assumes an elliptical model".into());
    }
    let df = (p - k - 1) * (p - k + 2) / 2;
    if df == 0 {
        r.notes
            .push("single tail eigenvalue: p-value is 1 by definition".into());
        return Ok(r);
    }
    let scale = (x.n() * (p - k)) as f64;
    let scaled = match stat {
        PcaStatistic::T => scale * statistic / (2.0 * d * d * sigma1),
        PcaStatistic::L => scale * statistic / sigma1,
    };
    r.p_value = chisq_sf(scaled, df);
    r.df_or_mixture = ReferenceLaw::ChiSquared {
        df,
        scaled_statistic: scaled,
    };
    Ok(r)
}

/// Fits `kind` to `x` and runs [`pca_asymptotic`].
pub fn pca_asymp_pvalue(x: &DataTable, k: usize, kind: PcaScatter, stat: PcaStatistic) -> Result<TestResult> {
    let fit = pca_fit(x, kind)?;
    pca_asymptotic(x, &fit, k, stat)
}

/// Draws a sample from the elliptical subspherical null for `H_0k`.
///
/// Rows of the standardized principal components are resampled, each is
/// rotated by an independent Haar matrix, and the result is mapped back with
/// the `p - k` smallest eigenvalues replaced by their mean. `k = p` keeps the
/// full spectrum.
pub fn pca_resample_i(x: &DataTable, k: usize, fit: &PcaFit, rng: &mut Stream) -> Result<DataTable> {
    let (n, p) = (x.n(), x.p());
    fit.check_k(k, p)?;
    let values = &fit.eigen.values;
    if values.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::SingularMatrix);
    }
    let u = &fit.eigen.vectors;
    let mu = &fit.scatter.location;
    let mut z = centered(x.matrix(), mu) * u;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col /= values[j].sqrt();
    }
    let mut dk = values.clone();
    if k < p {
        let avg = value_moments(&values[k..]).m1;
        dk[k..].iter_mut().for_each(|d| *d = avg);
    }
    let root: Vec<f64> = dk.iter().map(|d| d.sqrt()).collect();

    let mut zs = DMatrix::<f64>::zeros(n, p);
    let mut buf = vec![0.0; p];
    for i in 0..n {
        let src = rng.random_range(0..n);
        buf.iter_mut().zip(z.row(src).iter()).for_each(|(b, v)| *b = *v);
        haar_rotate(&mut buf, rng);
        for j in 0..p {
            zs[(i, j)] = buf[j] * root[j];
        }
    }
    let mut out = zs * u.transpose();
    add_rows(&mut out, mu);
    Ok(x.with_values(out))
}

/// Draws a sample from the subspherical null for `H_0k`: resampled rows keep
/// their component in the signal space and get an independent Haar rotation
/// inside the noise space.
pub fn pca_resample_ii(x: &DataTable, k: usize, fit: &PcaFit, rng: &mut Stream) -> Result<DataTable> {
    let (n, p) = (x.n(), x.p());
    fit.check_k(k, p)?;
    let uk = fit.eigen.columns(k, p - k);
    let mu = &fit.scatter.location;
    let c = centered(x.matrix(), mu);
    let noise = &c * &uk;
    let signal = &c - &noise * uk.transpose();

    let mut rotated = DMatrix::<f64>::zeros(n, p - k);
    let mut src_rows = Vec::with_capacity(n);
    let mut buf = vec![0.0; p - k];
    for i in 0..n {
        let src = rng.random_range(0..n);
        src_rows.push(src);
        buf.iter_mut().zip(noise.row(src).iter()).for_each(|(b, v)| *b = *v);
        if !buf.is_empty() {
            haar_rotate(&mut buf, rng);
        }
        for (j, v) in buf.iter().enumerate() {
            rotated[(i, j)] = *v;
        }
    }
    let mut out = signal.select_rows(&src_rows) + rotated * uk.transpose();
    add_rows(&mut out, mu);
    Ok(x.with_values(out))
}

pub(crate) fn add_rows(m: &mut DMatrix<f64>, v: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += v.transpose();
    }
}

/// Bootstrap test of `H_0k`: the observed statistic is compared with its
/// values on `config.m` samples drawn from the chosen null.
pub fn pca_bootstrap(
    x: &DataTable,
    fit: &PcaFit,
    k: usize,
    stat: PcaStatistic,
    strategy: PcaBootstrap,
    config: &BootstrapConfig,
) -> Result<TestResult> {
    let t_obs = fit.statistic(k, stat)?;
    let outcome = bootstrap_pvalue(t_obs, config, |rng| {
        let xs = match strategy {
            PcaBootstrap::I => pca_resample_i(x, k, fit, rng)?,
            PcaBootstrap::II => pca_resample_ii(x, k, fit, rng)?,
        };
        fit.refit(&xs)?.statistic(k, stat)
    })?;
    let mut r = base_result(x, fit, k, t_obs);
    r.p_value = outcome.p_value;
    r.mode = match strategy {
        PcaBootstrap::I => Mode::BootI,
        PcaBootstrap::II => Mode::BootII,
    };
    r.df_or_mixture = ReferenceLaw::Bootstrap {
        exceedances: outcome.exceedances,
        variance: outcome.variance,
    };
    r.m = Some(config.m);
    r.seed = Some(config.master_seed);
    r.d_hat = Some(fit.d_hat(k)?);
    if fit.kind == PcaScatter::Tyler3 {
        r.notes.push(format!(
            "replicates use {TYLER_BOOT_STEPS} fixed-point steps from the original estimate"
        ));
    }
    if !outcome.retried.is_empty() {
        r.warnings
            .push(format!("{} replicate(s) needed a retry", outcome.retried.len()));
    }
    Ok(r)
}
