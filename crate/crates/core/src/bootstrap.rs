//! Bootstrap p-values, significance-level schedules and sequential dimension
//! estimation.
//!
//! Every replicate draws from its own stream, keyed by the master seed and
//! the replicate index, so the outcome does not depend on how replicates are
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream type handed to resamplers.
pub type Stream = ChaCha8Rng;

const TAG_RETRY: u64 = 0x5245_5452_59;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub m: usize,
    pub master_seed: u64,
    /// Run replicates on the rayon pool.
    pub parallel: bool,
    /// Force in-order execution on the calling thread.
    pub strict_sequential: bool,
}

impl BootstrapConfig {
    pub fn new(m: usize, master_seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidInput("bootstrap needs M >= 1".into()));
        }
        Ok(BootstrapConfig {
            m,
            master_seed,
            parallel: true,
            strict_sequential: false,
        })
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self.strict_sequential = true;
        self
    }

    pub(crate) fn runs_parallel(&self) -> bool {
        self.parallel && !self.strict_sequential
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(tag, index)` under `master`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

/// Independent stream number `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub p_value: f64,
    /// Number of replicate scores at or above the observed statistic.
    pub exceedances: usize,
    pub scores: Vec<f64>,
    /// `p(1 - p)/M`, the resampling variance of `p_value`.
    pub variance: f64,
    /// Replicates that succeeded only on their retry stream.
    pub retried: Vec<usize>,
}

/// `(#{T* >= T} + 1)/(M + 1)` and the exceedance count.
pub fn pvalue_from_scores(t_obs: f64, scores: &[f64]) -> (f64, usize) {
    let exceed = scores.iter().filter(|&&s| s >= t_obs).count();
    ((exceed + 1) as f64 / (scores.len() + 1) as f64, exceed)
}

/// Runs `config.m` replicates of `replicate` and compares their scores with
/// `t_obs`.
///
/// A replicate that fails (or returns a non-finite score) is retried once on
/// a separate stream; a second failure aborts with
/// [`Error::ReplicateFailure`].
pub fn bootstrap_pvalue<F>(t_obs: f64, config: &BootstrapConfig, replicate: F) -> Result<BootstrapOutcome>
where
    F: Fn(&mut Stream) -> Result<f64> + Sync,
{
    if config.m == 0 {
        return Err(Error::InvalidInput("bootstrap needs M >= 1".into()));
    }
    let retry_seed = derive_seed(config.master_seed, TAG_RETRY, 0);
    let run = |i: usize| -> Result<(f64, bool)> {
        let attempt = |seed: u64| match replicate(&mut stream(seed, i as u64)) {
            Ok(s) if s.is_finite() => Ok(s),
            Ok(s) => Err(format!("non-finite statistic {s}")),
            Err(e) => Err(e.to_string()),
        };
        match attempt(config.master_seed) {
            Ok(s) => Ok((s, false)),
            Err(_) => attempt(retry_seed)
                .map(|s| (s, true))
                .map_err(|reason| Error::ReplicateFailure { index: i, reason }),
        }
    };
    let results: Vec<Result<(f64, bool)>> = if config.runs_parallel() {
        (0..config.m).into_par_iter().map(run).collect()
    } else {
        (0..config.m).map(run).collect()
    };

    let mut scores = Vec::with_capacity(config.m);
    let mut retried = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (s, again) = r?;
        if again {
            retried.push(i);
        }
        scores.push(s);
    }
    let (p_value, exceedances) = pvalue_from_scores(t_obs, &scores);
    Ok(BootstrapOutcome {
        p_value,
        exceedances,
        variance: p_value * (1.0 - p_value) / config.m as f64,
        scores,
        retried,
    })
}

/// Level `(n0/n) alpha0` for `n >= n0`, and `alpha0` below `n0`.
pub fn alpha_schedule(n: usize, n0: usize, alpha0: f64) -> Result<f64> {
    if n0 == 0 || !(alpha0 > 0.0 && alpha0 < 1.0) {
        return Err(Error::InvalidInput(format!(
            "schedule needs n0 > 0 and 0 < alpha0 < 1, got n0 = {n0}, alpha0 = {alpha0}"
        )));
    }
    if n < n0 {
        return Ok(alpha0);
    }
    Ok(alpha0 * n0 as f64 / n as f64)
}

/// Significance level used for each test in a sequential estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSource {
    Fixed(f64),
    Schedule { n0: usize, alpha0: f64 },
}

impl LevelSource {
    pub fn level(&self, n: usize) -> Result<f64> {
        match *self {
            LevelSource::Fixed(a) if a > 0.0 && a < 1.0 => Ok(a),
            LevelSource::Fixed(a) => Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {a}"))),
            LevelSource::Schedule { n0, alpha0 } => alpha_schedule(n, n0, alpha0),
        }
    }

    pub fn describe(&self, n: usize) -> String {
        match *self {
            LevelSource::Fixed(a) => format!("fixed alpha = {a}"),
            LevelSource::Schedule { n0, alpha0 } => {
                format!("alpha = (n0/n) alpha0 with n0 = {n0}, alpha0 = {alpha0}, n = {n}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BottomUp,
    TopDown,
    DivideConquer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub k: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub level: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub q_hat: usize,
    pub strategy: Strategy,
    /// Tests in the order they were run; each `k` appears at most once.
    pub decisions: Vec<Decision>,
    pub alpha_schedule: String,
    /// Every tested hypothesis up to `p_max - 1` was rejected.
    pub saturated: bool,
    pub warnings: Vec<String>,
}

/// Sequential estimate of the signal dimension from tests of `H_0k`,
/// `k = 0..p_max-1`. `test(k)` returns the statistic and its p-value.
///
/// * bottom-up: the first accepted `k` in ascending order;
/// * top-down: from `p_max - 1` downwards, one above the first rejection;
/// * divide-and-conquer: binary search for the smallest accepted `k`, plus
///   one probe just above it. If the tested hypotheses show a rejection above
///   an acceptance, the search falls back to bottom-up and records a warning.
///
/// With every hypothesis rejected the estimate is `p_max` and `saturated` is
/// set.
pub fn estimate_dimension<F>(
    mut test: F,
    p_max: usize,
    strategy: Strategy,
    level: LevelSource,
    n: usize,
) -> Result<DimensionEstimate>
where
    F: FnMut(usize) -> Result<(f64, f64)>,
{
    if p_max == 0 {
        return Err(Error::InvalidInput("need at least one hypothesis".into()));
    }
    let alpha = level.level(n)?;
    let mut decisions: Vec<Decision> = Vec::new();
    let mut run = |k: usize, decisions: &mut Vec<Decision>| -> Result<bool> {
        if let Some(d) = decisions.iter().find(|d| d.k == k) {
            return Ok(d.accepted);
        }
        let (statistic, p_value) = test(k)?;
        let accepted = p_value >= alpha;
        decisions.push(Decision {
            k,
            statistic,
            p_value,
            level: alpha,
            accepted,
        });
        Ok(accepted)
    };

    let mut warnings = Vec::new();
    let q_hat = match strategy {
        Strategy::BottomUp => bottom_up(&mut run, &mut decisions, p_max)?,
        Strategy::TopDown => {
            let mut q = 0;
            for k in (0..p_max).rev() {
                if !run(k, &mut decisions)? {
                    q = k + 1;
                    break;
                }
            }
            q
        }
        Strategy::DivideConquer => {
            let (mut lo, mut hi) = (0, p_max);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if run(mid, &mut decisions)? {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            // The search alone never sees a rejection above an acceptance;
            // probing one step above the boundary does.
            if lo + 1 < p_max {
                run(lo + 1, &mut decisions)?;
            }
            let highest_reject = decisions.iter().filter(|d| !d.accepted).map(|d| d.k).max();
            let lowest_accept = decisions.iter().filter(|d| d.accepted).map(|d| d.k).min();
            match (highest_reject, lowest_accept) {
                (Some(r), Some(a)) if r > a => {
                    warnings.push(format!(
                        "non-monotone acceptance (k = {a} accepted, k = {r} rejected); fell back to bottom-up"
                    ));
                    bottom_up(&mut run, &mut decisions, p_max)?
                }
                _ => lo,
            }
        }
    };
    let saturated = q_hat == p_max;
    if saturated {
        warnings.push(format!("all hypotheses up to k = {} rejected", p_max - 1));
    }
    Ok(DimensionEstimate {
        q_hat,
        strategy,
        decisions,
        alpha_schedule: level.describe(n),
        saturated,
        warnings,
    })
}

fn bottom_up<R>(run: &mut R, decisions: &mut Vec<Decision>, p_max: usize) -> Result<usize>
where
    R: FnMut(usize, &mut Vec<Decision>) -> Result<bool>,
{
    for k in 0..p_max {
        if run(k, decisions)? {
            return Ok(k);
        }
    }
    Ok(p_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pvalue_formula() {
        let mut scores = vec![0.0; 190];
        scores.extend(vec![2.0; 10]);
        let (p, e) = pvalue_from_scores(1.0, &scores);
        assert_eq!(e, 10);
        assert!((p - 11.0 / 201.0).abs() < 1e-15);
        assert_eq!(pvalue_from_scores(-1.0, &scores).0, 1.0);
        assert_eq!(pvalue_from_scores(5.0, &scores).0, 1.0 / 201.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = BootstrapConfig::new(300, 99).unwrap();
        let f = |rng: &mut Stream| Ok(rng.random::<f64>());
        let par = bootstrap_pvalue(0.5, &cfg, f).unwrap();
        let seq = bootstrap_pvalue(0.5, &cfg.sequential(), f).unwrap();
        assert_eq!(par, seq);
        assert!(par.scores.iter().all(|s| (0.0..1.0).contains(s)));
    }

    #[test]
    fn retry_then_abort() {
        let cfg = BootstrapConfig::new(20, 1).unwrap().sequential();
        // fails on the primary stream for one replicate only
        let flaky = |rng: &mut Stream| {
            if rng.get_stream() == 7 && rng.get_seed() == stream(1, 0).get_seed() {
                Err(Error::SingularMatrix)
            } else {
                Ok(1.0)
            }
        };
        let out = bootstrap_pvalue(0.0, &cfg, flaky).unwrap();
        assert_eq!(out.retried, vec![7]);
        assert_eq!(out.p_value, 1.0);

        let broken = |rng: &mut Stream| {
            if rng.get_stream() == 3 {
                Err(Error::SingularMatrix)
            } else {
                Ok(1.0)
            }
        };
        assert!(matches!(
            bootstrap_pvalue(0.0, &cfg, broken),
            Err(Error::ReplicateFailure { index: 3, .. })
        ));
    }

    #[test]
    fn streams_are_distinct() {
        let a: u64 = stream(5, 0).random();
        let b: u64 = stream(5, 1).random();
        let c: u64 = stream(6, 0).random();
        assert!(a != b && a != c && b != c);
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(alpha_schedule(100, 100, 0.05).unwrap(), 0.05);
        assert!((alpha_schedule(1000, 100, 0.05).unwrap() - 0.005).abs() < 1e-15);
        assert_eq!(alpha_schedule(50, 100, 0.05).unwrap(), 0.05);
        let mut prev = 1.0;
        for n in 1..5000 {
            let a = alpha_schedule(n, 200, 0.1).unwrap();
            assert!(a <= prev && a > 0.0);
            prev = a;
        }
    }

    fn pattern(accept: &'static [bool]) -> impl FnMut(usize) -> Result<(f64, f64)> {
        move |k| Ok((k as f64, if accept[k] { 0.5 } else { 0.001 }))
    }

    fn estimate(accept: &'static [bool], s: Strategy) -> DimensionEstimate {
        estimate_dimension(pattern(accept), accept.len(), s, LevelSource::Fixed(0.05), 100).unwrap()
    }

    #[test]
    fn all_accepted_gives_zero() {
        let e = estimate(&[true; 6], Strategy::BottomUp);
        assert_eq!(e.q_hat, 0);
        assert_eq!(e.decisions.len(), 1);
    }

    #[test]
    fn monotone_pattern_agrees() {
        const P: &[bool] = &[false, false, false, true, true, true];
        for s in [Strategy::BottomUp, Strategy::TopDown, Strategy::DivideConquer] {
            let e = estimate(P, s);
            assert_eq!(e.q_hat, 3, "{s:?}");
            assert!(!e.saturated);
            let mut ks: Vec<usize> = e.decisions.iter().map(|d| d.k).collect();
            ks.sort();
            ks.dedup();
            assert_eq!(ks.len(), e.decisions.len());
        }
    }

    #[test]
    fn non_monotone_pattern() {
        const P: &[bool] = &[false, true, false, true];
        assert_eq!(estimate(P, Strategy::BottomUp).q_hat, 1);
        let td = estimate(P, Strategy::TopDown);
        assert_eq!(td.q_hat, 3);
        assert_eq!(td.decisions.iter().map(|d| d.k).collect::<Vec<_>>(), vec![3, 2]);

        const Q: &[bool] = &[false, false, false, true, false, true];
        let dc = estimate(Q, Strategy::DivideConquer);
        assert_eq!(dc.q_hat, 3);
        assert_eq!(dc.warnings.len(), 1);
        assert!(dc.decisions.iter().any(|d| d.k == 0));
    }

    #[test]
    fn saturation() {
        for s in [Strategy::BottomUp, Strategy::TopDown, Strategy::DivideConquer] {
            let e = estimate(&[false; 4], s);
            assert_eq!(e.q_hat, 4);
            assert!(e.saturated);
        }
    }
}
