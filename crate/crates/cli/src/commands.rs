use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use accmv::analysis::AnalysisConfig;
use accmv::data::{build_strata, load_csv, CsvSchema, Dataset};
use accmv::estimators::{fitted_odds, Method, WeightDiagnostics};
use accmv::exec::Execution;
use accmv::glm::{fit_all_odds, FitOptions, ModelSummary};
use accmv::inference::{bootstrap, normal_ci, BootstrapOptions, CiMethod, CiReport};
use accmv::mpm::{check_method, solve_weighted_ee, MpmOptions, ScoreSpec};
use accmv::sensitivity::{sweep, write_curve_csv, SensitivityCurve, TiltSpec};
use accmv::simgen::{generate, DesignKind, OracleReport, SimDesign};
use accmv::study::{run_table, RowSummary, TableConfig};
use accmv::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{parse_family, parse_functional, resolve};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Auxiliary (X) columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    /// Primary (L) columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub l: Vec<String>,
    /// Cell values read as missing.
    #[arg(long, value_delimiter = ',', default_values_t = vec![String::new(), "NA".to_string()])]
    pub missing: Vec<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--data is required".into()))?;
        if self.l.is_empty() {
            return Err(Error::Config("--l must name at least one primary column".into()));
        }
        let schema = CsvSchema {
            x: self.x.clone(),
            l: self.l.clone(),
            missing: self.missing.clone(),
        };
        load_csv(path, &schema)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Odds model basis: affine, quadratic, intercept, restricted[-quadratic]:COLS.
    #[arg(long, default_value = "affine")]
    pub odds_basis: String,
    /// Outcome regression basis, same grammar.
    #[arg(long, default_value = "affine")]
    pub outcome_basis: String,
    /// Per-stratum odds basis, `R,A=basis` (repeatable).
    #[arg(long)]
    pub odds_override: Vec<String>,
    /// Per-stratum outcome basis, `R,A=basis` (repeatable).
    #[arg(long)]
    pub outcome_override: Vec<String>,
    /// Smallest stratum and pool size a model may be fitted on.
    #[arg(long, default_value_t = 10)]
    pub n_min: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Regress the product target directly instead of its unobserved factors.
    #[arg(long)]
    pub no_factorize: bool,
}

impl ModelArgs {
    fn fit_options(&self) -> Result<FitOptions> {
        if self.n_min == 0 || self.max_iter == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config("n_min, max_iter and tol must be positive".into()));
        }
        Ok(FitOptions {
            n_min: self.n_min,
            tol: self.tol,
            max_iter: self.max_iter,
            factorize_products: !self.no_factorize,
            ..FitOptions::default()
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BootArgs {
    /// Bootstrap resamples (0 to skip).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Run replicates on one thread.
    #[arg(long)]
    pub sequential: bool,
}

impl BootArgs {
    fn options(&self) -> Result<BootstrapOptions> {
        check_level(self.level)?;
        let seed = self
            .seed
            .ok_or_else(|| Error::Config("--seed is required when bootstrapping".into()))?;
        Ok(BootstrapOptions {
            replicates: self.bootstrap,
            seed,
            level: self.level,
            execution: execution(self.sequential),
            ..BootstrapOptions::default()
        })
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("level must lie in (0, 1), got {level}")))
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Writes the machine-readable artifact to `path` (or stdout) and the human
/// summary to whichever stream the artifact did not take.
fn emit(path: Option<&Path>, summary: &str, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write(&mut w)?;
            w.flush()?;
            print!("{summary}");
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn write_json(w: &mut dyn Write, v: &Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, v).map_err(io::Error::from)?;
    writeln!(w)?;
    Ok(())
}

fn write_json_file(path: &Path, v: &Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_json(&mut w, v)?;
    w.flush()?;
    Ok(())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Target: COL, mean:COLS, product:COLS or threshold:COL<=V,...
    #[arg(long)]
    pub functional: Option<String>,
    /// ipw, ra, mr or cc.
    #[arg(long, default_value = "mr")]
    pub method: String,
    /// Divide IPW sums by the total weight instead of n.
    #[arg(long)]
    pub self_normalize: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub boot: BootArgs,
    /// JSON report path (stdout if absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct StratumRow {
    pair: String,
    n: usize,
    n_pool: Option<usize>,
    contribution: f64,
}

#[derive(Serialize)]
struct FitReport {
    command: &'static str,
    config: Value,
    method: Method,
    functional: String,
    n: usize,
    estimate: f64,
    complete_term: f64,
    strata: Vec<StratumRow>,
    intervals: Vec<CiReport>,
    weights: Option<WeightDiagnostics>,
    models: Vec<ModelSummary>,
    warnings: Vec<String>,
}

pub fn fit(args: FitArgs, file: Option<&Path>) -> Result<bool> {
    let (args, resolved) = resolve(args, file, "fit")?;
    let method: Method = args.method.parse()?;
    let opts = args.models.fit_options()?;
    check_level(args.boot.level)?;
    let boot = if args.boot.bootstrap > 0 {
        Some(args.boot.options()?)
    } else {
        None
    };
    let ds = args.data.load()?;
    let f = parse_functional(args.functional.as_deref(), &ds)?;
    let mut cfg = AnalysisConfig::new(method, f.clone());
    cfg.odds_family = parse_family(&args.models.odds_basis, &args.models.odds_override, &ds)?;
    cfg.outcome_family = parse_family(&args.models.outcome_basis, &args.models.outcome_override, &ds)?;
    cfg.fit = opts.clone();
    cfg.self_normalize = args.self_normalize;
    let res = cfg.run(&ds)?;
    let theta = res.estimate.theta;

    let mut intervals = vec![normal_ci(theta, res.se, args.boot.level, CiMethod::Influence)];
    if let Some(b) = &boot {
        let out = bootstrap(&ds, b, |d| cfg.estimate(d).map(|t| vec![t]))?;
        let (mut normal, mut pct) = out.intervals(0, theta, b.level);
        for ci in [&mut normal, &mut pct] {
            ci.replicates = Some(out.total);
            ci.failed = Some(out.failures.len());
            ci.seed = Some(out.seed);
        }
        intervals.push(normal);
        intervals.push(pct);
    }

    let mut warnings = Vec::new();
    let mut strata = Vec::new();
    for (pair, idx) in res.strata.strata() {
        let n_pool = pair.is_incomplete().then(|| res.strata.pool(&pair.r).len());
        if let Some(pool) = n_pool {
            if idx.len() < 2 * opts.n_min || pool < 2 * opts.n_min {
                warnings.push(format!(
                    "stratum {pair} is small ({} records, pool {pool}); its models rest on little data",
                    idx.len()
                ));
            }
        }
        strata.push(StratumRow {
            pair: pair.to_string(),
            n: idx.len(),
            n_pool,
            contribution: res.estimate.strata.get(pair).copied().unwrap_or(0.0),
        });
    }
    let report = FitReport {
        command: "fit",
        config: resolved,
        method,
        functional: format!("{f:?}"),
        n: ds.n(),
        estimate: theta,
        complete_term: res.estimate.complete_term,
        strata,
        intervals,
        weights: res.estimate.weights,
        models: res.models,
        warnings,
    };
    let mut summary = format!("{method} estimate of {f:?}: {theta:.6} (n = {})\n", ds.n());
    for ci in &report.intervals {
        summary += &format!(
            "  {:?}: se {:.6}, {:.0}% CI [{:.6}, {:.6}]\n",
            ci.method,
            ci.se,
            100.0 * ci.level,
            ci.lower,
            ci.upper
        );
    }
    for w in &report.warnings {
        summary += &format!("  warning: {w}\n");
    }
    let value = serde_json::to_value(&report).map_err(io::Error::from)?;
    emit(args.output.as_deref(), &summary, |w| write_json(w, &value))?;
    Ok(true)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RegressArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Response column of a linear marginal model.
    #[arg(long)]
    pub response: Option<String>,
    /// Regressor columns (L) of the linear model.
    #[arg(long, value_delimiter = ',')]
    pub regressors: Vec<String>,
    /// Fit a Gaussian mean and covariance to these L columns instead.
    #[arg(long, value_delimiter = ',')]
    pub gaussian: Vec<String>,
    /// ipw or cc; ra and mr are rejected.
    #[arg(long, default_value = "ipw")]
    pub method: String,
    /// Ignore odds estimation in the sandwich.
    #[arg(long)]
    pub naive_sandwich: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct CoefRow {
    name: String,
    estimate: f64,
    se: f64,
    lower: f64,
    upper: f64,
}

fn score_spec(args: &RegressArgs, ds: &Dataset) -> Result<ScoreSpec> {
    let idx = |name: &str| {
        ds.l_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("`{name}` is not a primary (L) column")))
    };
    match (&args.response, args.gaussian.is_empty()) {
        (Some(resp), true) => Ok(ScoreSpec::Linear {
            response: idx(resp)?,
            regressors: args.regressors.iter().map(|r| idx(r)).collect::<Result<_>>()?,
        }),
        (None, false) => Ok(ScoreSpec::Gaussian {
            coords: args.gaussian.iter().map(|r| idx(r)).collect::<Result<_>>()?,
        }),
        _ => Err(Error::Config(
            "give either --response (with --regressors) or --gaussian".into(),
        )),
    }
}

pub fn regress(args: RegressArgs, file: Option<&Path>) -> Result<bool> {
    let (args, resolved) = resolve(args, file, "regress")?;
    let method: Method = args.method.parse()?;
    check_method(method)?;
    check_level(args.level)?;
    let opts = args.models.fit_options()?;
    let ds = args.data.load()?;
    ds.check_estimator_dimensions()?;
    let spec = score_spec(&args, &ds)?;
    let strata = build_strata(&ds);
    let mut models = Vec::new();
    let odds = if method == Method::Ipw {
        let family = parse_family(&args.models.odds_basis, &args.models.odds_override, &ds)?;
        let fitted = fit_all_odds(&ds, &strata, &family, &opts)?;
        models = fitted.values().map(|m| m.summary(&ds)).collect();
        Some(fitted_odds(fitted))
    } else {
        None
    };
    let mpm = MpmOptions {
        naive_sandwich: args.naive_sandwich,
        ..MpmOptions::default()
    };
    let est = solve_weighted_ee(&ds, &strata, odds.as_ref(), &spec, &mpm)?;
    let z = accmv::inference::z_value(args.level);
    let rows: Vec<CoefRow> = est
        .names
        .iter()
        .zip(est.theta.iter().zip(est.se()))
        .map(|(name, (&b, se))| CoefRow {
            name: name.clone(),
            estimate: b,
            se,
            lower: b - z * se,
            upper: b + z * se,
        })
        .collect();
    let mut summary = format!(
        "{method} marginal model (n = {}, {} iterations)\n",
        ds.n(),
        est.iterations
    );
    summary += &format!(
        "  {:<16} {:>12} {:>10} {:>12} {:>12}\n",
        "term", "estimate", "se", "lower", "upper"
    );
    for r in &rows {
        summary += &format!(
            "  {:<16} {:>12.6} {:>10.6} {:>12.6} {:>12.6}\n",
            r.name, r.estimate, r.se, r.lower, r.upper
        );
    }
    let value = json!({
        "command": "regress",
        "config": resolved,
        "method": method,
        "spec": spec,
        "n": ds.n(),
        "level": args.level,
        "coefficients": rows,
        "iterations": est.iterations,
        "residual": est.residual,
        "weights": est.weights,
        "models": models,
    });
    emit(args.output.as_deref(), &summary, |w| write_json(w, &value))?;
    Ok(true)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub functional: Option<String>,
    /// Tilt direction, one entry per L column.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Vec<f64>,
    /// Tilt center, one entry per L column (complete-case means if absent).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Vec<f64>,
    /// Multipliers of `delta` to evaluate.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    /// Curve CSV path (stdout if absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Optional JSON report with the resolved configuration.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn complete_case_means(ds: &Dataset) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = ds.records().iter().filter_map(|r| r.l_complete()).collect();
    let m = rows.len().max(1) as f64;
    (0..ds.d())
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m)
        .collect()
}

pub fn sensitivity(args: SensitivityArgs, file: Option<&Path>) -> Result<bool> {
    let (args, resolved) = resolve(args, file, "sensitivity")?;
    let opts = args.models.fit_options()?;
    let boot = BootArgs {
        bootstrap: args.bootstrap,
        seed: args.seed,
        level: args.level,
        sequential: args.sequential,
    }
    .options()?;
    let ds = args.data.load()?;
    ds.check_estimator_dimensions()?;
    let f = parse_functional(args.functional.as_deref(), &ds)?;
    let family = parse_family(&args.models.odds_basis, &args.models.odds_override, &ds)?;
    if args.delta.len() != ds.d() {
        return Err(Error::Config(format!(
            "--delta needs {} entries (one per L column)",
            ds.d()
        )));
    }
    let center = if args.center.is_empty() {
        complete_case_means(&ds)
    } else {
        args.center.clone()
    };
    let grid = if args.grid.is_empty() {
        (0..=10).map(|k| -1.0 + 0.2 * k as f64).collect()
    } else {
        args.grid.clone()
    };
    let spec = TiltSpec {
        delta: args.delta.clone(),
        center,
        grid,
    };
    let curve: SensitivityCurve = sweep(&ds, &family, &opts, &f, &spec, &boot)?;
    let mut summary = format!(
        "tilted IPW curve for {:?}: {} points, {} bootstrap replicates ({} failed)\n",
        f,
        curve.points.len(),
        curve.replicates,
        curve.failed
    );
    for p in &curve.points {
        summary += &format!(
            "  {:>8.3}  {:.6}  [{:.6}, {:.6}]\n",
            p.delta, p.estimate, p.ci_lo, p.ci_hi
        );
    }
    if let Some(path) = &args.report {
        let value = json!({
            "command": "sensitivity",
            "config": resolved,
            "tilt": spec,
            "curve": curve,
        });
        write_json_file(path, &value)?;
    }
    emit(args.output.as_deref(), &summary, |w| write_curve_csv(&curve.points, w))?;
    Ok(true)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// single, multiple or mpm.
    #[arg(long, default_value = "single")]
    pub design: String,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator stream (replicate index).
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    /// CSV path (stdout if absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn simulate(args: SimulateArgs, file: Option<&Path>) -> Result<bool> {
    let (args, _) = resolve(args, file, "simulate")?;
    let seed = args
        .seed
        .ok_or_else(|| Error::Config("--seed is required for simulate".into()))?;
    if args.n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let kind: DesignKind = args.design.parse()?;
    let ds = generate(&SimDesign::new(kind, args.n, seed).with_stream(args.stream));
    let summary = format!(
        "{kind} design: {} records, X = {:?}, L = {:?}, seed {seed}, stream {}\n",
        ds.n(),
        ds.x_names(),
        ds.l_names(),
        args.stream
    );
    emit(args.output.as_deref(), &summary, |w| ds.write_csv(w))?;
    Ok(true)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TableArgs {
    /// 1, 2 or 3.
    #[arg(long, default_value_t = 1)]
    pub table: u8,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub self_normalize: bool,
    #[arg(long)]
    pub sequential: bool,
    /// Summary CSV path (stdout if absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Replicate-level CSV.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// JSON report with the resolved configuration.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn table_summary(rows: &[RowSummary]) -> String {
    let mut s = format!(
        "  {:<22} {:>9} {:>9} {:>9} {:>9} {:>7}\n",
        "row", "bias", "sample SE", "mean SE", "coverage", "failed"
    );
    for r in rows {
        s += &format!(
            "  {:<22} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>7}\n",
            r.row, r.bias, r.sample_se, r.mean_theoretical_se, r.coverage, r.failed
        );
    }
    s
}

pub fn table(args: TableArgs, file: Option<&Path>) -> Result<bool> {
    let (args, resolved) = resolve(args, file, "table")?;
    let seed = args
        .seed
        .ok_or_else(|| Error::Config("--seed is required for table".into()))?;
    let cfg = TableConfig {
        table: args.table,
        replicates: args.replicates,
        n: args.n,
        seed,
        level: args.level,
        self_normalize: args.self_normalize,
        execution: execution(args.sequential),
    };
    let res = run_table(&cfg)?;
    let summary = format!(
        "table {} ({} replicates, n = {}, seed {seed})\n{}",
        cfg.table,
        cfg.replicates,
        cfg.n,
        table_summary(&res.rows)
    );
    if let Some(path) = &args.dump {
        let mut w = BufWriter::new(File::create(path)?);
        res.write_replicates_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.report {
        let value = json!({
            "command": "table",
            "config": resolved,
            "rows": res.rows,
        });
        write_json_file(path, &value)?;
    }
    emit(args.output.as_deref(), &summary, |w| res.write_summary_csv(w))?;
    Ok(true)
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// single, multiple, mpm or all.
    #[arg(long, default_value = "all")]
    pub design: String,
    #[arg(long, default_value_t = 1_000_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path (stdout if absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn verify_oracles(args: VerifyArgs, file: Option<&Path>) -> Result<bool> {
    let (args, resolved) = resolve(args, file, "verify-oracles")?;
    let kinds = if args.design == "all" {
        vec![DesignKind::Single, DesignKind::Multiple, DesignKind::Mpm]
    } else {
        vec![args.design.parse()?]
    };
    let reports: Vec<OracleReport> = kinds
        .iter()
        .map(|&k| accmv::simgen::verify_oracles(k, args.n, args.seed))
        .collect::<Result<_>>()?;
    let mut summary = String::new();
    for r in &reports {
        let max_z = r.checks.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
        summary += &format!(
            "{}: {} checks, max |z| {:.2}, {}\n",
            r.design,
            r.checks.len(),
            max_z,
            if r.passed() { "all within threshold" } else { "FAILED" }
        );
        for c in r.failures() {
            summary += &format!("  {} (z = {:.2})\n", c.name, c.z);
        }
    }
    let passed = reports.iter().all(OracleReport::passed);
    let value = json!({
        "command": "verify-oracles",
        "config": resolved,
        "passed": passed,
        "reports": reports,
    });
    emit(args.output.as_deref(), &summary, |w| write_json(w, &value))?;
    Ok(passed)
}
