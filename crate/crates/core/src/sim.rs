//! Simulation models and rejection-rate estimation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{derive_seed, stream, BootstrapConfig, Stream};
use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::fobi::{fobi_asymptotic, fobi_bootstrap, fobi_fit, FobiBootstrap, Sigma1Variant};
use crate::linalg::haar_orthogonal;
use crate::pca::{pca_asymptotic, pca_bootstrap, pca_fit, PcaBootstrap, PcaScatter, PcaStatistic};
use crate::result::Family;
use crate::sir::{sir_asymptotic, sir_bootstrap, sir_fit, SliceMode, DEFAULT_SLICES};

const TAG_DATA: u64 = 0xDA7A;
const TAG_MIX: u64 = 0x313;
const TAG_BOOT: u64 = 0xB007;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    /// Gaussian factor model.
    #[serde(rename = "pca-m1")]
    PcaM1,
    /// Noisy ICA model with exponential, chi2_1 and t5 signals.
    #[serde(rename = "pca-m2")]
    PcaM2,
    /// Elliptical t5.
    #[serde(rename = "pca-m3")]
    PcaM3,
    /// Exponential, chi2_2, uniform and Gaussian components.
    #[serde(rename = "ica-m1")]
    IcaM1,
    /// Exponential, chi2_2, t5 and Gaussian components.
    #[serde(rename = "ica-m2")]
    IcaM2,
    /// `y = z1 (z1 + z2 + 1) + e`.
    #[serde(rename = "sir-m1")]
    SirM1,
    /// `y = z1 / (0.5 + (z2 + 1.5)^2) + e`.
    #[serde(rename = "sir-m2")]
    SirM2,
}

impl Model {
    pub const ALL: [Model; 7] = [
        Model::PcaM1,
        Model::PcaM2,
        Model::PcaM3,
        Model::IcaM1,
        Model::IcaM2,
        Model::SirM1,
        Model::SirM2,
    ];

    pub fn family(self) -> Family {
        match self {
            Model::PcaM1 | Model::PcaM2 | Model::PcaM3 => Family::Pca,
            Model::IcaM1 | Model::IcaM2 => Family::Fobi,
            Model::SirM1 | Model::SirM2 => Family::Sir,
        }
    }

    /// True signal dimension.
    pub fn q(self) -> usize {
        match self.family() {
            Family::Sir => 2,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::PcaM1 => "pca-m1",
            Model::PcaM2 => "pca-m2",
            Model::PcaM3 => "pca-m3",
            Model::IcaM1 => "ica-m1",
            Model::IcaM2 => "ica-m2",
            Model::SirM1 => "sir-m1",
            Model::SirM2 => "sir-m2",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Model> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Model::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model {s:?}")))
    }
}

/// A test procedure applied in a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PcaAsymp(PcaScatter),
    PcaBoot(PcaScatter, PcaBootstrap),
    FobiAsymp(Sigma1Variant),
    FobiBoot(FobiBootstrap),
    SirAsymp,
    SirBoot,
}

impl Method {
    /// Parses a method name for `family`.
    ///
    /// PCA: `[cov-|tyler-|tyler3-](asymp|boot1|boot2)`, covariance by
    /// default. FOBI: `asy1|asy2|boot1|boot2`. SIR: `asymp|boot`.
    pub fn parse(family: Family, s: &str) -> Result<Method> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::InvalidInput(format!("unknown {family:?} method {s:?}"));
        match family {
            Family::Pca => {
                let (scatter, test) = match s.split_once('-') {
                    Some(("cov", t)) => (PcaScatter::Cov, t),
                    Some(("tyler", t)) => (PcaScatter::Tyler, t),
                    Some(("tyler3", t)) => (PcaScatter::Tyler3, t),
                    Some(_) => return Err(bad()),
                    None => (PcaScatter::Cov, s.as_str()),
                };
                match test {
                    "asymp" => Ok(Method::PcaAsymp(scatter)),
                    "boot1" => Ok(Method::PcaBoot(scatter, PcaBootstrap::I)),
                    "boot2" => Ok(Method::PcaBoot(scatter, PcaBootstrap::II)),
                    _ => Err(bad()),
                }
            }
            Family::Fobi => match s.as_str() {
                "asy1" | "asymp" => Ok(Method::FobiAsymp(Sigma1Variant::Ica)),
                "asy2" => Ok(Method::FobiAsymp(Sigma1Variant::Ngca)),
                "boot1" => Ok(Method::FobiBoot(FobiBootstrap::I)),
                "boot2" => Ok(Method::FobiBoot(FobiBootstrap::II)),
                _ => Err(bad()),
            },
            Family::Sir => match s.as_str() {
                "asymp" => Ok(Method::SirAsymp),
                "boot" => Ok(Method::SirBoot),
                _ => Err(bad()),
            },
        }
    }

    pub fn label(self) -> String {
        let boot = |b: PcaBootstrap| match b {
            PcaBootstrap::I => "boot1",
            PcaBootstrap::II => "boot2",
        };
        match self {
            Method::PcaAsymp(s) => format!("{}-asymp", s.label()),
            Method::PcaBoot(s, b) => format!("{}-{}", s.label(), boot(b)),
            Method::FobiAsymp(Sigma1Variant::Ica) => "asy1".into(),
            Method::FobiAsymp(Sigma1Variant::Ngca) => "asy2".into(),
            Method::FobiBoot(FobiBootstrap::I) => "boot1".into(),
            Method::FobiBoot(FobiBootstrap::II) => "boot2".into(),
            Method::SirAsymp => "asymp".into(),
            Method::SirBoot => "boot".into(),
        }
    }

    pub fn is_bootstrap(self) -> bool {
        matches!(self, Method::PcaBoot(..) | Method::FobiBoot(_) | Method::SirBoot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub model: Model,
    pub p: usize,
    pub n: usize,
    /// Number of simulated data sets.
    pub reps: usize,
    /// Bootstrap replicates per test.
    pub m: usize,
    pub methods: Vec<Method>,
    /// Hypotheses `H_0k` to test; defaults to the true dimension.
    pub ks: Vec<usize>,
    pub alpha: f64,
    pub master_seed: u64,
    /// Slice count for SIR models.
    pub slices: usize,
    /// Mix the data with a random affine map drawn once per specification.
    pub mix: bool,
    pub strict_sequential: bool,
}

impl SimulationSpec {
    pub fn new(model: Model, p: usize, n: usize, reps: usize) -> SimulationSpec {
        SimulationSpec {
            model,
            p,
            n,
            reps,
            m: 200,
            methods: Vec::new(),
            ks: vec![model.q()],
            alpha: 0.05,
            master_seed: 0,
            slices: DEFAULT_SLICES,
            mix: false,
            strict_sequential: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.model.q();
        if self.p < q + 1 {
            return Err(Error::InvalidInput(format!("{} needs p >= {}", self.model, q + 1)));
        }
        if self.n < self.p + 2 {
            return Err(Error::InvalidInput(format!("need n >= p + 2 = {}", self.p + 2)));
        }
        if self.reps == 0 || self.m == 0 {
            return Err(Error::InvalidInput("reps and M must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k >= self.p) {
            return Err(Error::InvalidK {
                k,
                min: 0,
                max: self.p - 1,
            });
        }
        let family = self.model.family();
        for m in &self.methods {
            let ok = matches!(
                (family, m),
                (Family::Pca, Method::PcaAsymp(_) | Method::PcaBoot(..))
                    | (Family::Fobi, Method::FobiAsymp(_) | Method::FobiBoot(_))
                    | (Family::Sir, Method::SirAsymp | Method::SirBoot)
            );
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "method {} does not apply to {}",
                    m.label(),
                    self.model
                )));
            }
        }
        Ok(())
    }
}

fn exp_std(rng: &mut Stream) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e - 1.0
}

fn chisq_std(rng: &mut Stream, df: f64) -> f64 {
    (ChiSquared::new(df).unwrap().sample(rng) - df) / (2.0 * df).sqrt()
}

fn t5_std(rng: &mut Stream) -> f64 {
    StudentT::new(5.0).unwrap().sample(rng) * (3.0f64 / 5.0).sqrt()
}

fn uniform_std(rng: &mut Stream) -> f64 {
    (rng.random::<f64>() - 0.5) * 12f64.sqrt()
}

fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws data set `rep` of `spec`; the response is present for SIR models.
pub fn simulate_model(spec: &SimulationSpec, rep: usize) -> Result<(DataTable, Option<Vec<f64>>)> {
    let (n, p) = (spec.n, spec.p);
    let rng = &mut stream(derive_seed(spec.master_seed, TAG_DATA, 0), rep as u64);
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = None;
    match spec.model {
        Model::PcaM1 | Model::PcaM2 => {
            let loadings = [2f64.sqrt(), 1.0, 1.0];
            for i in 0..n {
                let z = if spec.model == Model::PcaM1 {
                    [normal(rng), normal(rng), normal(rng)]
                } else {
                    [exp_std(rng), chisq_std(rng, 1.0), t5_std(rng)]
                };
                for j in 0..p {
                    let signal = if j < 3 { loadings[j] * z[j] } else { 0.0 };
                    x[(i, j)] = signal + normal(rng);
                }
            }
        }
        Model::PcaM3 => {
            let chi = ChiSquared::new(5.0).unwrap();
            for i in 0..n {
                let w = (chi.sample(rng) / 5.0f64).sqrt();
                for j in 0..p {
                    let var = match j {
                        0 => 3.0,
                        1 | 2 => 2.0,
                        _ => 1.0,
                    };
                    x[(i, j)] = (0.6f64 * var).sqrt() * normal(rng) / w;
                }
            }
        }
        Model::IcaM1 | Model::IcaM2 => {
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = match j {
                        0 => exp_std(rng),
                        1 => chisq_std(rng, 2.0),
                        2 if spec.model == Model::IcaM1 => uniform_std(rng),
                        2 => t5_std(rng),
                        _ => normal(rng),
                    };
                }
            }
        }
        Model::SirM1 | Model::SirM2 => {
            let mut resp = Vec::with_capacity(n);
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = normal(rng);
                }
                let (z1, z2) = (x[(i, 0)], x[(i, 1)]);
                let e = 0.5 * normal(rng);
                resp.push(if spec.model == Model::SirM1 {
                    z1 * (z1 + z2 + 1.0) + e
                } else {
                    z1 / (0.5 + (z2 + 1.5).powi(2)) + e
                });
            }
            y = Some(resp);
        }
    }
    let mut table = DataTable::from_matrix(x)?;
    if spec.mix {
        let (a, b) = mixing(spec.master_seed, p);
        table = table.affine(&a, &b);
    }
    Ok((table, y))
}

/// Random nonsingular `A = O diag(s)` and shift `b`, fixed by the seed.
fn mixing(seed: u64, p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rng = &mut stream(derive_seed(seed, TAG_MIX, 0), 0);
    let o = haar_orthogonal(p, rng);
    let scales = DVector::from_fn(p, |_, _| (0.5 * normal(rng)).exp());
    let b = DVector::from_fn(p, |_, _| normal(rng));
    (o * DMatrix::from_diagonal(&scales), b)
}

/// p-value of `method` for `H_0k` on one data set.
pub fn method_pvalue(
    method: Method,
    x: &DataTable,
    y: Option<&[f64]>,
    k: usize,
    slices: usize,
    config: &BootstrapConfig,
) -> Result<f64> {
    let need_y = || y.ok_or_else(|| Error::InvalidInput("SIR needs a response".into()));
    let r = match method {
        Method::PcaAsymp(s) => pca_asymptotic(x, &pca_fit(x, s)?, k, PcaStatistic::T)?,
        Method::PcaBoot(s, b) => pca_bootstrap(x, &pca_fit(x, s)?, k, PcaStatistic::T, b, config)?,
        Method::FobiAsymp(v) => fobi_asymptotic(x, &fobi_fit(x)?, k, v)?,
        Method::FobiBoot(b) => fobi_bootstrap(x, &fobi_fit(x)?, k, b, config)?,
        Method::SirAsymp => sir_asymptotic(x, &sir_fit(x, need_y()?, slices)?, k)?,
        Method::SirBoot => {
            let y = need_y()?;
            sir_bootstrap(x, y, &sir_fit(x, y, slices)?, k, SliceMode::Recompute, config)?
        }
    };
    Ok(r.p_value)
}

/// One row of a rejection-rate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub model: String,
    pub method: String,
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub alpha: f64,
    pub completed: usize,
    pub failed: usize,
    pub rejections: usize,
    pub rate: f64,
    /// Upper bound `1/(2 sqrt(N))` on the Monte Carlo standard error.
    pub se_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionReport {
    pub rows: Vec<RejectionRow>,
}

impl RejectionReport {
    pub fn row(&self, method: &str, k: usize) -> Option<&RejectionRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }
}

/// Rejection rates `(1/N) #{p <= alpha}` for every method and hypothesis in
/// `spec`. Failed tests are counted and excluded from the rate.
pub fn rejection_rate(spec: &SimulationSpec) -> Result<RejectionReport> {
    spec.validate()?;
    let cells: Vec<(usize, Method, usize)> = spec
        .methods
        .iter()
        .enumerate()
        .flat_map(|(mi, &m)| spec.ks.iter().map(move |&k| (mi, m, k)))
        .collect();

    let one_rep = |rep: usize| -> Vec<Option<f64>> {
        let data = simulate_model(spec, rep);
        cells
            .iter()
            .map(|&(mi, method, k)| {
                let (x, y) = data.as_ref().ok()?;
                let seed = derive_seed(derive_seed(spec.master_seed, TAG_BOOT, rep as u64), mi as u64, k as u64);
                let mut cfg = BootstrapConfig::new(spec.m, seed).ok()?;
                if spec.strict_sequential {
                    cfg = cfg.sequential();
                }
                method_pvalue(method, x, y.as_deref(), k, spec.slices, &cfg).ok()
            })
            .collect()
    };
    let per_rep: Vec<Vec<Option<f64>>> = if spec.strict_sequential {
        (0..spec.reps).map(one_rep).collect()
    } else {
        (0..spec.reps).into_par_iter().map(one_rep).collect()
    };

    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(_, method, k))| {
            let pvals: Vec<f64> = per_rep.iter().filter_map(|r| r[c]).collect();
            let rejections = pvals.iter().filter(|&&pv| pv <= spec.alpha).count();
            let completed = pvals.len();
            RejectionRow {
                model: spec.model.name().into(),
                method: method.label(),
                k,
                n: spec.n,
                p: spec.p,
                alpha: spec.alpha,
                completed,
                failed: spec.reps - completed,
                rejections,
                rate: if completed == 0 {
                    f64::NAN
                } else {
                    rejections as f64 / completed as f64
                },
                se_bound: 0.5 / (spec.reps as f64).sqrt(),
            }
        })
        .collect();
    Ok(RejectionReport { rows })
}
