//! Command-line front end: argument parsing, dispatch and output formatting.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use subdim_core::bootstrap::derive_seed;
use subdim_core::fobi::{fobi_asymptotic, fobi_bootstrap, fobi_fit};
use subdim_core::pca::{pca_asymptotic, pca_bootstrap, pca_fit};
use subdim_core::sim::rejection_rate;
use subdim_core::sir::{sir_asymptotic, sir_bootstrap, sir_fit};
use subdim_core::{
    estimate_dimension, load_table, BootstrapConfig, DataTable, DimensionEstimate, Error, FobiBootstrap, LevelSource,
    Method, Model, PcaBootstrap, PcaScatter, PcaStatistic, RejectionReport, Sigma1Variant, SimulationSpec, SliceMode,
    Strategy, TestResult,
};

const TAG_ESTIMATE: u64 = 0xE57;

#[derive(Debug, Parser)]
#[command(
    name = "subdim",
    version,
    about = "Tests and estimates for the dimension of a signal subspace"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master seed for bootstrap and simulation streams.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Worker threads: a positive count or `auto`.
    #[arg(long, global = true, default_value = "auto")]
    threads: String,

    /// Run on one thread in a fixed order.
    #[arg(long, global = true)]
    strict_sequential: bool,

    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format; JSON for tests and estimates, CSV for simulations by default.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test H0k with principal component eigenvalues.
    Pca(PcaArgs),
    /// Test H0k in the non-Gaussian component model.
    Fobi(FobiArgs),
    /// Test H0k in the sliced inverse regression model.
    Sir(SirArgs),
    /// Estimate the signal dimension by sequential testing.
    Estimate(EstimateArgs),
    /// Estimate rejection rates on simulated data.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScatterArg {
    Cov,
    Tyler,
    Tyler3,
}

impl From<ScatterArg> for PcaScatter {
    fn from(s: ScatterArg) -> PcaScatter {
        match s {
            ScatterArg::Cov => PcaScatter::Cov,
            ScatterArg::Tyler => PcaScatter::Tyler,
            ScatterArg::Tyler3 => PcaScatter::Tyler3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BootMethod {
    Asymp,
    Boot1,
    Boot2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SirMethod {
    Asymp,
    Boot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatisticArg {
    #[value(name = "T")]
    T,
    #[value(name = "L")]
    L,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Ica,
    Ngca,
}

impl From<VariantArg> for Sigma1Variant {
    fn from(v: VariantArg) -> Sigma1Variant {
        match v {
            VariantArg::Ica => Sigma1Variant::Ica,
            VariantArg::Ngca => Sigma1Variant::Ngca,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Pca,
    Fobi,
    Sir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    BottomUp,
    TopDown,
    DivideConquer,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::BottomUp => Strategy::BottomUp,
            StrategyArg::TopDown => Strategy::TopDown,
            StrategyArg::DivideConquer => Strategy::DivideConquer,
        }
    }
}

#[derive(Debug, Args)]
struct PcaOptions {
    #[arg(long, value_enum, default_value = "cov")]
    scatter: ScatterArg,
    #[arg(long, value_enum, default_value = "asymp")]
    method: BootMethod,
    /// Bootstrap replicates.
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
    #[arg(long, value_enum, default_value = "T")]
    statistic: StatisticArg,
}

#[derive(Debug, Args)]
struct PcaArgs {
    /// Hypothesized signal dimension.
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    opts: PcaOptions,
    data: PathBuf,
}

#[derive(Debug, Args)]
struct FobiOptions {
    #[arg(long, value_enum, default_value = "ica")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "asymp")]
    method: BootMethod,
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
}

#[derive(Debug, Args)]
struct FobiArgs {
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    opts: FobiOptions,
    data: PathBuf,
}

#[derive(Debug, Args)]
struct SirOptions {
    /// Name of the response column.
    #[arg(long)]
    response: String,
    #[arg(long, default_value_t = 10)]
    slices: usize,
    #[arg(long, value_enum, default_value = "asymp")]
    method: SirMethod,
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
    /// Reuse the original slice boundaries inside bootstrap replicates.
    #[arg(long)]
    freeze_slices: bool,
}

#[derive(Debug, Args)]
struct SirArgs {
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    opts: SirOptions,
    data: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, value_enum, default_value = "bottom-up")]
    strategy: StrategyArg,
    /// Fixed level for every test.
    #[arg(long, conflicts_with = "alpha_schedule")]
    alpha: Option<f64>,
    /// Level `(n0/n) alpha0`, given as `n0,alpha0`.
    #[arg(long)]
    alpha_schedule: Option<String>,
    #[arg(long, value_enum, default_value = "cov")]
    scatter: ScatterArg,
    /// `asymp`, `boot1` or `boot2` (`boot` for SIR).
    #[arg(long, default_value = "asymp")]
    method: String,
    #[arg(long, value_enum, default_value = "ica")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "T")]
    statistic: StatisticArg,
    #[arg(long)]
    response: Option<String>,
    #[arg(long, default_value_t = 10)]
    slices: usize,
    #[arg(long = "M", default_value_t = 500)]
    m: usize,
    #[arg(long)]
    freeze_slices: bool,
    data: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// pca-m1, pca-m2, pca-m3, ica-m1, ica-m2, sir-m1 or sir-m2.
    #[arg(long)]
    model: String,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long = "M", default_value_t = 200)]
    m: usize,
    /// Comma-separated method names for the model's family.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Hypotheses to test; the model's true dimension by default.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    slices: usize,
    /// Apply a random affine map to every simulated data set.
    #[arg(long)]
    mix: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> CliError {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::InvalidK { .. } | Error::InvalidSlices { .. }) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Context {
    seed: u64,
    strict: bool,
}

impl Context {
    fn config(&self, m: usize, seed: u64) -> subdim_core::Result<BootstrapConfig> {
        let cfg = BootstrapConfig::new(m, seed)?;
        Ok(if self.strict { cfg.sequential() } else { cfg })
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn thread_count(spec: &str, strict: bool) -> CliResult<usize> {
    if strict {
        return Ok(1);
    }
    if spec.eq_ignore_ascii_case("auto") {
        return Ok(0);
    }
    match spec.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(CliError::Usage(format!(
            "--threads expects a positive integer or `auto`, got {spec:?}"
        ))),
    }
}

fn bootstrap_size(command: &Command) -> usize {
    match command {
        Command::Pca(a) => a.opts.m,
        Command::Fobi(a) => a.opts.m,
        Command::Sir(a) => a.opts.m,
        Command::Estimate(a) => a.m,
        Command::Simulate(a) => a.m,
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if bootstrap_size(&cli.command) == 0 {
        return Err(CliError::Usage("--M must be positive".into()));
    }
    let threads = thread_count(&cli.threads, cli.strict_sequential)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    let ctx = Context {
        seed: cli.seed,
        strict: cli.strict_sequential,
    };
    let text = pool.install(|| -> CliResult<String> {
        match &cli.command {
            Command::Pca(a) => {
                let (x, _) = load_table(&a.data, None)?;
                let r = run_pca(&ctx, &x, a.k, &a.opts, ctx.seed)?;
                render_result(&r, cli.format.unwrap_or(Format::Json))
            }
            Command::Fobi(a) => {
                let (x, _) = load_table(&a.data, None)?;
                let r = run_fobi(&ctx, &x, a.k, &a.opts, ctx.seed)?;
                render_result(&r, cli.format.unwrap_or(Format::Json))
            }
            Command::Sir(a) => {
                let (x, y) = load_table(&a.data, Some(&a.opts.response))?;
                let y = y.expect("response column requested");
                let r = run_sir(&ctx, &x, &y, a.k, &a.opts, ctx.seed)?;
                render_result(&r, cli.format.unwrap_or(Format::Json))
            }
            Command::Estimate(a) => {
                let est = run_estimate(&ctx, a)?;
                render_estimate(&est, cli.format.unwrap_or(Format::Json))
            }
            Command::Simulate(a) => {
                let report = run_simulate(&ctx, a)?;
                render_report(&report, cli.format.unwrap_or(Format::Csv))
            }
        }
    })?;
    match &cli.out {
        Some(path) => File::create(path)?.write_all(text.as_bytes())?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn statistic(s: StatisticArg) -> PcaStatistic {
    match s {
        StatisticArg::T => PcaStatistic::T,
        StatisticArg::L => PcaStatistic::L,
    }
}

fn run_pca(ctx: &Context, x: &DataTable, k: usize, o: &PcaOptions, seed: u64) -> CliResult<TestResult> {
    let fit = pca_fit(x, o.scatter.into())?;
    let stat = statistic(o.statistic);
    let mut r = match o.method {
        BootMethod::Asymp => pca_asymptotic(x, &fit, k, stat)?,
        BootMethod::Boot1 => pca_bootstrap(x, &fit, k, stat, PcaBootstrap::I, &ctx.config(o.m, seed)?)?,
        BootMethod::Boot2 => pca_bootstrap(x, &fit, k, stat, PcaBootstrap::II, &ctx.config(o.m, seed)?)?,
    };
    r.seed = Some(seed);
    Ok(r)
}

fn run_fobi(ctx: &Context, x: &DataTable, k: usize, o: &FobiOptions, seed: u64) -> CliResult<TestResult> {
    let fit = fobi_fit(x)?;
    let mut r = match o.method {
        BootMethod::Asymp => fobi_asymptotic(x, &fit, k, o.variant.into())?,
        BootMethod::Boot1 => fobi_bootstrap(x, &fit, k, FobiBootstrap::I, &ctx.config(o.m, seed)?)?,
        BootMethod::Boot2 => fobi_bootstrap(x, &fit, k, FobiBootstrap::II, &ctx.config(o.m, seed)?)?,
    };
    r.seed = Some(seed);
    Ok(r)
}

fn run_sir(ctx: &Context, x: &DataTable, y: &[f64], k: usize, o: &SirOptions, seed: u64) -> CliResult<TestResult> {
    let fit = sir_fit(x, y, o.slices)?;
    let mut r = match o.method {
        SirMethod::Asymp => sir_asymptotic(x, &fit, k)?,
        SirMethod::Boot => {
            let mode = if o.freeze_slices {
                SliceMode::Freeze
            } else {
                SliceMode::Recompute
            };
            sir_bootstrap(x, y, &fit, k, mode, &ctx.config(o.m, seed)?)?
        }
    };
    r.seed = Some(seed);
    Ok(r)
}

fn level_source(a: &EstimateArgs) -> CliResult<LevelSource> {
    let level = match &a.alpha_schedule {
        Some(s) => {
            let parsed = s
                .split_once(',')
                .and_then(|(n0, a0)| Some((n0.trim().parse().ok()?, a0.trim().parse().ok()?)));
            let (n0, alpha0) =
                parsed.ok_or_else(|| CliError::Usage(format!("--alpha-schedule expects `n0,alpha0`, got {s:?}")))?;
            LevelSource::Schedule { n0, alpha0 }
        }
        None => LevelSource::Fixed(a.alpha.unwrap_or(0.05)),
    };
    // validate once so a bad level is reported as a usage error
    level.level(1).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(level)
}

fn boot_method(s: &str) -> CliResult<BootMethod> {
    BootMethod::from_str(s, true).map_err(|_| CliError::Usage(format!("unknown method {s:?}")))
}

fn run_estimate(ctx: &Context, a: &EstimateArgs) -> CliResult<DimensionEstimate> {
    let level = level_source(a)?;
    let strategy: Strategy = a.strategy.into();
    let seed_for = |k: usize| derive_seed(ctx.seed, TAG_ESTIMATE, k as u64);
    let as_pair = |r: TestResult| (r.statistic, r.p_value);
    let est = match a.family {
        FamilyArg::Pca => {
            let (x, _) = load_table(&a.data, None)?;
            let opts = PcaOptions {
                scatter: a.scatter,
                method: boot_method(&a.method)?,
                m: a.m,
                statistic: a.statistic,
            };
            let fit = pca_fit(&x, opts.scatter.into())?;
            let stat = statistic(opts.statistic);
            let test = |k: usize| {
                let r = match opts.method {
                    BootMethod::Asymp => pca_asymptotic(&x, &fit, k, stat)?,
                    BootMethod::Boot1 => {
                        pca_bootstrap(&x, &fit, k, stat, PcaBootstrap::I, &ctx.config(a.m, seed_for(k))?)?
                    }
                    BootMethod::Boot2 => {
                        pca_bootstrap(&x, &fit, k, stat, PcaBootstrap::II, &ctx.config(a.m, seed_for(k))?)?
                    }
                };
                Ok(as_pair(r))
            };
            estimate_dimension(test, x.p(), strategy, level, x.n())?
        }
        FamilyArg::Fobi => {
            let (x, _) = load_table(&a.data, None)?;
            let method = boot_method(&a.method)?;
            let fit = fobi_fit(&x)?;
            let test = |k: usize| {
                let r = match method {
                    BootMethod::Asymp => fobi_asymptotic(&x, &fit, k, a.variant.into())?,
                    BootMethod::Boot1 => fobi_bootstrap(&x, &fit, k, FobiBootstrap::I, &ctx.config(a.m, seed_for(k))?)?,
                    BootMethod::Boot2 => {
                        fobi_bootstrap(&x, &fit, k, FobiBootstrap::II, &ctx.config(a.m, seed_for(k))?)?
                    }
                };
                Ok(as_pair(r))
            };
            estimate_dimension(test, x.p(), strategy, level, x.n())?
        }
        FamilyArg::Sir => {
            let response = a
                .response
                .as_deref()
                .ok_or_else(|| CliError::Usage("--family sir needs --response".into()))?;
            let (x, y) = load_table(&a.data, Some(response))?;
            let y = y.expect("response column requested");
            let method = match a.method.to_ascii_lowercase().as_str() {
                "asymp" => SirMethod::Asymp,
                "boot" => SirMethod::Boot,
                other => return Err(CliError::Usage(format!("unknown SIR method {other:?}"))),
            };
            let fit = sir_fit(&x, &y, a.slices)?;
            let mode = if a.freeze_slices {
                SliceMode::Freeze
            } else {
                SliceMode::Recompute
            };
            let test = |k: usize| {
                let r = match method {
                    SirMethod::Asymp => sir_asymptotic(&x, &fit, k)?,
                    SirMethod::Boot => sir_bootstrap(&x, &y, &fit, k, mode, &ctx.config(a.m, seed_for(k))?)?,
                };
                Ok(as_pair(r))
            };
            // H0k is testable for k <= H - 2
            let p_max = x.p().min(fit.h().saturating_sub(1)).max(1);
            estimate_dimension(test, p_max, strategy, level, x.n())?
        }
    };
    Ok(est)
}

fn run_simulate(ctx: &Context, a: &SimulateArgs) -> CliResult<RejectionReport> {
    let usage = |e: Error| CliError::Usage(e.to_string());
    let model: Model = a.model.parse().map_err(usage)?;
    let mut spec = SimulationSpec::new(model, a.p, a.n, a.reps);
    spec.m = a.m;
    spec.alpha = a.alpha;
    spec.master_seed = ctx.seed;
    spec.slices = a.slices;
    spec.mix = a.mix;
    spec.strict_sequential = ctx.strict;
    if !a.k.is_empty() {
        spec.ks = a.k.clone();
    }
    spec.methods = a
        .methods
        .iter()
        .map(|m| Method::parse(model.family(), m))
        .collect::<subdim_core::Result<_>>()
        .map_err(usage)?;
    spec.validate().map_err(usage)?;
    Ok(rejection_rate(&spec)?)
}

fn json_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("value serializes") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn csv_text<F>(write: F) -> CliResult<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| CliError::Core(Error::Io(e.to_string())))?;
    let bytes = w.into_inner().map_err(|e| CliError::Core(Error::Io(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn render_result(r: &TestResult, format: Format) -> CliResult<String> {
    match format {
        Format::Json => Ok(r.to_json() + "\n"),
        Format::Csv => csv_text(|w| {
            w.write_record([
                "family",
                "k",
                "statistic",
                "p_value",
                "mode",
                "reference",
                "scatter",
                "n",
                "p",
                "H",
                "M",
                "seed",
                "warnings",
            ])?;
            w.write_record([
                json_str(&r.family),
                r.k.to_string(),
                r.statistic.to_string(),
                r.p_value.to_string(),
                json_str(&r.mode),
                serde_json::to_string(&r.df_or_mixture).expect("law serializes"),
                r.scatter.clone(),
                r.n.to_string(),
                r.p.to_string(),
                opt(r.h),
                opt(r.m),
                opt(r.seed),
                r.warnings.join("; "),
            ])
        }),
    }
}

fn render_estimate(e: &DimensionEstimate, format: Format) -> CliResult<String> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(e).expect("estimate serializes") + "\n"),
        Format::Csv => csv_text(|w| {
            w.write_record(["q_hat", "strategy", "k", "statistic", "p_value", "level", "accepted"])?;
            for d in &e.decisions {
                w.write_record([
                    e.q_hat.to_string(),
                    json_str(&e.strategy),
                    d.k.to_string(),
                    d.statistic.to_string(),
                    d.p_value.to_string(),
                    d.level.to_string(),
                    d.accepted.to_string(),
                ])?;
            }
            Ok(())
        }),
    }
}

fn render_report(r: &RejectionReport, format: Format) -> CliResult<String> {
    match format {
        Format::Csv => Ok(r.to_csv_string()),
        Format::Json => Ok(serde_json::to_string_pretty(&r.rows).expect("report serializes") + "\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn estimate_args(extra: &[&str]) -> EstimateArgs {
        let argv = ["subdim", "estimate", "--family", "pca", "data.csv"]
            .iter()
            .chain(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Estimate(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn thread_spec() {
        assert_eq!(thread_count("auto", false).unwrap(), 0);
        assert_eq!(thread_count("AUTO", true).unwrap(), 1);
        assert_eq!(thread_count("6", false).unwrap(), 6);
        assert!(thread_count("0", false).is_err());
        assert!(thread_count("-2", false).is_err());
    }

    #[test]
    fn levels() {
        assert_eq!(level_source(&estimate_args(&[])).unwrap(), LevelSource::Fixed(0.05));
        assert_eq!(
            level_source(&estimate_args(&["--alpha-schedule", "500, 0.1"])).unwrap(),
            LevelSource::Schedule { n0: 500, alpha0: 0.1 }
        );
        assert!(level_source(&estimate_args(&["--alpha-schedule", "500"])).is_err());
        assert!(level_source(&estimate_args(&["--alpha", "0"])).is_err());
        assert!(Cli::try_parse_from([
            "subdim",
            "estimate",
            "--family",
            "pca",
            "--alpha",
            "0.1",
            "--alpha-schedule",
            "1,0.1",
            "d"
        ])
        .is_err());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Core(Error::InvalidSlices { slices: 3, k: 2 }).exit_code(), 1);
        assert_eq!(CliError::Core(Error::ColumnNotFound("y".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::SingularMatrix).exit_code(), 3);
    }
}
