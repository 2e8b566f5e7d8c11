//! Tests for the number of non-Gaussian components based on FOBI, the pair
//! (covariance, fourth-moment scatter).
//!
//! Gaussian directions have eigenvalue `p + 2` in `R = S1^{-1/2} S2 S1^{-1/2}`;
//! `H_0k` says exactly `p - k` eigenvalues equal `p + 2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_pvalue, BootstrapConfig, Stream};
use crate::data::DataTable;
use crate::distributions::weighted_chisq_mix_sf;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, sym_power_from_eigen, EigenSystem, Exponent, SymMatrix};
use crate::pca::add_rows;
use crate::result::{Family, Mode, ReferenceLaw, TestResult, NOTE_DIVISOR};
use crate::scatter::{centered, fourth_moment_scatter, mean_cov};

const SIGMA1_FLOOR: f64 = 1e-6;
/// Asymptotic covariance constant of the diagonal of the Gaussian block.
const SIGMA2: f64 = 4.0;

/// Estimator of the variance constant in the asymptotic law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma1Variant {
    /// Sum of componentwise fourth moments; valid in the IC model.
    Ica,
    /// Fourth moment of the norm; valid in the NGCA model.
    Ngca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FobiBootstrap {
    /// Componentwise resampling of the signal, fresh Gaussian noise.
    I,
    /// Resampled rows with the noise part replaced by Gaussian noise.
    II,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FobiFit {
    pub mean: DVector<f64>,
    pub s1: SymMatrix,
    pub s2: SymMatrix,
    pub r: SymMatrix,
    /// Eigen-decomposition of `r`, ordered by `(d - (p+2))^2` descending,
    /// larger `d` first on ties.
    pub eigen: EigenSystem,
    /// Unmixing matrix `U' S1^{-1/2}`.
    pub w: DMatrix<f64>,
    s1_half: SymMatrix,
}

pub fn fobi_fit(x: &DataTable) -> Result<FobiFit> {
    let s1 = mean_cov(x);
    let eig1 = sym_eigen(&s1.matrix)?;
    let neg_half = sym_power_from_eigen(&eig1, Exponent::NegHalf)?;
    let s1_half = sym_power_from_eigen(&eig1, Exponent::Half)?;
    let s2 = fourth_moment_scatter(x, &s1)?;
    let r = s2.congruence(neg_half.as_matrix());
    let raw = sym_eigen(&r)?;

    let target = x.p() as f64 + 2.0;
    let dev: Vec<f64> = raw.values.iter().map(|d| (d - target).powi(2)).collect();
    let mut order: Vec<usize> = (0..x.p()).collect();
    order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(raw.values[b].total_cmp(&raw.values[a])));
    let eigen = raw.permuted(&order);
    let w = eigen.vectors.transpose() * neg_half.as_matrix();
    Ok(FobiFit {
        mean: s1.location,
        s1: s1.matrix,
        s2,
        r,
        eigen,
        w,
        s1_half,
    })
}

impl FobiFit {
    pub fn p(&self) -> usize {
        self.eigen.dim()
    }

    fn target(&self) -> f64 {
        self.p() as f64 + 2.0
    }

    fn check_k(&self, k: usize, max: usize) -> Result<()> {
        if k > max {
            return Err(Error::InvalidK { k, min: 0, max });
        }
        Ok(())
    }

    /// Mean of `(d - (p+2))^2` over the `p - k` eigenvalues closest to `p + 2`.
    pub fn tk(&self, k: usize) -> Result<f64> {
        self.check_k(k, self.p() - 1)?;
        let c = self.target();
        let tail = &self.eigen.values[k..];
        Ok(tail.iter().map(|d| (d - c).powi(2)).sum::<f64>() / tail.len() as f64)
    }

    /// Estimated components `W (x_i - xbar)`, one row per observation.
    pub fn components(&self, x: &DataTable) -> DMatrix<f64> {
        centered(x.matrix(), &self.mean) * self.w.transpose()
    }

    /// `(W')^{-1} = U' S1^{1/2}`.
    fn mixing_t(&self) -> DMatrix<f64> {
        self.eigen.vectors.transpose() * self.s1_half.as_matrix()
    }
}

/// Plug-in estimate of the variance constant, clipped below at 1e-6. The
/// second value is a warning when clipping happened.
pub fn fobi_sigma1(x: &DataTable, fit: &FobiFit, variant: Sigma1Variant) -> (f64, Option<String>) {
    let z = fit.components(x);
    let n = x.n() as f64;
    let p = x.p() as f64;
    let raw = match variant {
        Sigma1Variant::Ica => z.iter().map(|v| v.powi(4)).sum::<f64>() / n - p + 8.0,
        Sigma1Variant::Ngca => z.row_iter().map(|r| r.norm_squared().powi(2)).sum::<f64>() / n - p * p + 8.0,
    };
    if raw < SIGMA1_FLOOR {
        (
            SIGMA1_FLOOR,
            Some(format!("sigma1 estimate {raw:.3e} clipped to {SIGMA1_FLOOR:e}")),
        )
    } else {
        (raw, None)
    }
}

fn base_result(x: &DataTable, k: usize, statistic: f64) -> TestResult {
    TestResult {
        family: Family::Fobi,
        k,
        statistic,
        p_value: 1.0,
        mode: Mode::Asymptotic,
        df_or_mixture: ReferenceLaw::Degenerate,
        scatter: "cov+fourth_moment".into(),
        n: x.n(),
        p: x.p(),
        h: None,
        m: None,
        seed: None,
        d_hat: None,
        sigma1_hat: None,
        warnings: Vec::new(),
        notes: vec![NOTE_DIVISOR.to_string()],
    }
}

/// Asymptotic test of `H_0k`: `n (p-k) T_k` against
/// `2 sigma1 chi2_{(p-k-1)(p-k+2)/2} + (2 sigma1 + 4 (p-k)) chi2_1`.
pub fn fobi_asymptotic(x: &DataTable, fit: &FobiFit, k: usize, variant: Sigma1Variant) -> Result<TestResult> {
    let p = fit.p();
    let statistic = fit.tk(k)?;
    let (sigma1, warning) = fobi_sigma1(x, fit, variant);
    let df_a = (p - k - 1) * (p - k + 2) / 2;
    let a = 2.0 * sigma1;
    let b = 2.0 * sigma1 + SIGMA2 * (p - k) as f64;
    let scaled = (x.n() * (p - k)) as f64 * statistic;

    let mut r = base_result(x, k, statistic);
    r.p_value = weighted_chisq_mix_sf(scaled, a, df_a, b);
    r.df_or_mixture = ReferenceLaw::Mixture {
        a,
        df_a,
        b,
        scaled_statistic: scaled,
    };
    r.sigma1_hat = Some(sigma1);
    r.warnings.extend(warning);
    r.notes.push(format!(
        "sigma1 from the {} estimator; the limit law assumes finite eighth moments",
        match variant {
            Sigma1Variant::Ica => "componentwise (IC model)",
            Sigma1Variant::Ngca => "norm-based (NGCA model)",
        }
    ));
    Ok(r)
}

pub fn fobi_asymp_pvalue(x: &DataTable, k: usize, variant: Sigma1Variant) -> Result<TestResult> {
    let fit = fobi_fit(x)?;
    fobi_asymptotic(x, &fit, k, variant)
}

/// Sample from the IC-model null for `H_0k`: each of the first `k` estimated
/// components is resampled independently, the remaining `p - k` are replaced
/// by standard normal draws, and the result is mixed back.
pub fn fobi_resample_i(x: &DataTable, k: usize, fit: &FobiFit, rng: &mut Stream) -> Result<DataTable> {
    let (n, p) = (x.n(), x.p());
    fit.check_k(k, p)?;
    let z = fit.components(x);
    let mut zs = DMatrix::<f64>::zeros(n, p);
    for j in 0..k {
        for i in 0..n {
            zs[(i, j)] = z[(rng.random_range(0..n), j)];
        }
    }
    for j in k..p {
        for i in 0..n {
            zs[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let mut out = zs * fit.mixing_t();
    add_rows(&mut out, &fit.mean);
    Ok(x.with_values(out))
}

/// Sample from the NGCA null for `H_0k`: resampled rows keep their signal
/// part `Q_k (x - xbar)` and receive Gaussian noise `S1^{1/2} U_k o`.
pub fn fobi_resample_ii(x: &DataTable, k: usize, fit: &FobiFit, rng: &mut Stream) -> Result<DataTable> {
    let (n, p) = (x.n(), x.p());
    fit.check_k(k, p)?;
    let uk = fit.eigen.columns(k, p - k);
    let w2 = fit.w.rows(k, p - k).into_owned();
    let back = fit.s1_half.as_matrix() * &uk;
    // Q_k c = c - S1^{1/2} U_k U_k' S1^{-1/2} c
    let c = centered(x.matrix(), &fit.mean);
    let signal = &c - (&c * w2.transpose()) * back.transpose();

    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(rng.random_range(0..n));
    }
    let o = DMatrix::<f64>::from_fn(n, p - k, |_, _| rng.sample(StandardNormal));
    let mut out = signal.select_rows(&rows) + o * back.transpose();
    add_rows(&mut out, &fit.mean);
    Ok(x.with_values(out))
}

/// Bootstrap test of `H_0k` with the raw statistic `T_k`.
pub fn fobi_bootstrap(
    x: &DataTable,
    fit: &FobiFit,
    k: usize,
    strategy: FobiBootstrap,
    config: &BootstrapConfig,
) -> Result<TestResult> {
    let t_obs = fit.tk(k)?;
    let outcome = bootstrap_pvalue(t_obs, config, |rng| {
        let xs = match strategy {
            FobiBootstrap::I => fobi_resample_i(x, k, fit, rng)?,
            FobiBootstrap::II => fobi_resample_ii(x, k, fit, rng)?,
        };
        fobi_fit(&xs)?.tk(k)
    })?;
    let mut r = base_result(x, k, t_obs);
    r.p_value = outcome.p_value;
    r.mode = match strategy {
        FobiBootstrap::I => Mode::BootI,
        FobiBootstrap::II => Mode::BootII,
    };
    r.df_or_mixture = ReferenceLaw::Bootstrap {
        exceedances: outcome.exceedances,
        variance: outcome.variance,
    };
    r.m = Some(config.m);
    r.seed = Some(config.master_seed);
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
    use crate::linalg::value_moments;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, p: usize, seed: u64) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataTable::from_matrix(DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    /// Two skewed (exponential) columns followed by Gaussian columns.
    fn ic_sample(n: usize, p: usize, seed: u64) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataTable::from_matrix(DMatrix::from_fn(n, p, |_, j| {
            if j < 2 {
                rng.sample::<f64, _>(rand_distr::Exp1) - 1.0
            } else {
                rng.sample(StandardNormal)
            }
        }))
        .unwrap()
    }

    #[test]
    fn unmixing_identities() {
        let x = ic_sample(500, 4, 1);
        let f = fobi_fit(&x).unwrap();
        let wsw = &f.w * f.s1.as_matrix() * f.w.transpose();
        assert!((wsw - DMatrix::identity(4, 4)).amax() < 1e-8);
        let d = &f.w * f.s2.as_matrix() * f.w.transpose();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(d[(i, j)].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gaussian_population_value() {
        let x = gaussian(100_000, 4, 3);
        let f = fobi_fit(&x).unwrap();
        assert!(f.eigen.values.iter().all(|d| (d - 6.0).abs() < 0.1));
    }

    #[test]
    fn ordering_by_squared_deviation() {
        let x = ic_sample(400, 5, 8);
        let f = fobi_fit(&x).unwrap();
        let dev: Vec<f64> = f.eigen.values.iter().map(|d| (d - 7.0).powi(2)).collect();
        assert!(dev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tk_hand_examples() {
        // p = 2, so p + 2 = 4
        let fit = FobiFit {
            mean: DVector::zeros(2),
            s1: SymMatrix::identity(2),
            s2: SymMatrix::from_diagonal(&[10.0, 4.0]),
            r: SymMatrix::from_diagonal(&[10.0, 4.0]),
            eigen: EigenSystem {
                values: vec![10.0, 4.0],
                vectors: DMatrix::identity(2, 2),
            },
            w: DMatrix::identity(2, 2),
            s1_half: SymMatrix::identity(2),
        };
        assert_eq!(fit.tk(1).unwrap(), 0.0);
        assert_eq!(fit.tk(0).unwrap(), 18.0);
        assert!(matches!(fit.tk(2), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn tk_decomposition_and_minimality() {
        let x = ic_sample(300, 6, 4);
        let f = fobi_fit(&x).unwrap();
        let c = 8.0;
        for k in 0..6 {
            let tail = &f.eigen.values[k..];
            let m = value_moments(tail);
            let t = f.tk(k).unwrap();
            assert!((m.s2 + (m.m1 - c).powi(2) - t).abs() < 1e-12);
            // every other subset of the same size has at least this mean
            let size = 6 - k;
            for mask in 0u32..64 {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let sub: Vec<f64> = (0..6)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| (f.eigen.values[i] - c).powi(2))
                    .collect();
                assert!(t <= sub.iter().sum::<f64>() / size as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn sigma1_identities() {
        let x = gaussian(100_000, 6, 5);
        let f = fobi_fit(&x).unwrap();
        let (a, wa) = fobi_sigma1(&x, &f, Sigma1Variant::Ica);
        let (b, _) = fobi_sigma1(&x, &f, Sigma1Variant::Ngca);
        assert!(wa.is_none());
        assert!((a - 20.0).abs() < 0.5, "{a}");
        assert!((b - 20.0).abs() < 0.5, "{b}");

        let z = f.components(&x);
        let mean_sq = z.row_iter().map(|r| r.norm_squared()).sum::<f64>() / x.n() as f64;
        assert!((mean_sq - 6.0).abs() < 1e-9);

        let y = gaussian(50, 1, 6);
        let g = fobi_fit(&y).unwrap();
        let (ya, _) = fobi_sigma1(&y, &g, Sigma1Variant::Ica);
        let (yb, _) = fobi_sigma1(&y, &g, Sigma1Variant::Ngca);
        assert!((ya - yb).abs() < 1e-12);
    }

    #[test]
    fn asymptotic_parameters() {
        let x = ic_sample(300, 6, 9);
        let r = fobi_asymp_pvalue(&x, 3, Sigma1Variant::Ica).unwrap();
        let s = r.sigma1_hat.unwrap();
        match r.df_or_mixture {
            ReferenceLaw::Mixture { a, df_a, b, .. } => {
                assert_eq!(df_a, 5);
                assert_eq!(a, 2.0 * s);
                assert_eq!(b, 2.0 * s + 12.0);
            }
            ref other => panic!("{other:?}"),
        }
        let last = fobi_asymp_pvalue(&x, 5, Sigma1Variant::Ica).unwrap();
        assert!(matches!(last.df_or_mixture, ReferenceLaw::Mixture { df_a: 0, .. }));
        assert!((0.0..=1.0).contains(&last.p_value));
    }

    #[test]
    fn resample_i_support_and_k0() {
        let x = ic_sample(50, 4, 10);
        let f = fobi_fit(&x).unwrap();
        let xs = fobi_resample_i(&x, 2, &f, &mut stream(1, 1)).unwrap();
        let z = f.components(&x);
        let zs = f.components(&xs);
        for j in 0..2 {
            for v in zs.column(j).iter() {
                assert!(z.column(j).iter().any(|u| (u - v).abs() < 1e-9));
            }
        }
        // k = 0: no resampled column survives
        let x0 = fobi_resample_i(&x, 0, &f, &mut stream(1, 2)).unwrap();
        let z0 = f.components(&x0);
        assert!(!z0
            .column(0)
            .iter()
            .any(|v| z.column(0).iter().any(|u| (u - v).abs() < 1e-12)));
    }

    #[test]
    fn resample_ii_projection_identities() {
        let x = ic_sample(40, 5, 11);
        let f = fobi_fit(&x).unwrap();
        let k = 2;
        let mut rng = stream(4, 0);
        let xs = fobi_resample_ii(&x, k, &f, &mut rng.clone()).unwrap();
        let src: Vec<usize> = (0..40).map(|_| rng.random_range(0..40)).collect();
        let o = DMatrix::<f64>::from_fn(40, 3, |_, _| rng.sample(StandardNormal));
        let neg_half = crate::linalg::sym_power(&f.s1, Exponent::NegHalf).unwrap();
        let uk = f.eigen.columns(k, 3);
        let back = f.s1_half.as_matrix() * &uk;
        let q = DMatrix::identity(5, 5) - &back * uk.transpose() * neg_half.as_matrix();
        for i in 0..40 {
            let new = xs.row(i) - &f.mean;
            let orig = x.row(src[i]) - &f.mean;
            let proj = uk.transpose() * neg_half.as_matrix() * &new;
            assert!((proj - o.row(i).transpose()).amax() < 1e-9);
            assert!((&q * &new - &q * &orig).amax() < 1e-9);
        }
    }

    #[test]
    fn resamplers_are_deterministic() {
        let x = ic_sample(30, 4, 12);
        let f = fobi_fit(&x).unwrap();
        for k in [0, 2, 4] {
            assert_eq!(
                fobi_resample_i(&x, k, &f, &mut stream(2, 3)).unwrap(),
                fobi_resample_i(&x, k, &f, &mut stream(2, 3)).unwrap()
            );
            assert_eq!(
                fobi_resample_ii(&x, k, &f, &mut stream(2, 3)).unwrap(),
                fobi_resample_ii(&x, k, &f, &mut stream(2, 3)).unwrap()
            );
        }
    }
}
