//! Monte Carlo harness for the three simulation tables: replicate datasets,
//! every estimator × misspecification row, and bias / SE / coverage summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::{estimate_with, influence_with, AnalysisConfig};
use crate::data::{build_strata, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{fitted_odds, fitted_outcomes, Method, OddsSet, OutcomeSet};
use crate::exec::Execution;
use crate::glm::{fit_all_odds, fit_all_outcomes, FitOptions};
use crate::inference::z_value;
use crate::mpm::{solve_weighted_ee, MpmOptions};
use crate::simgen::{generate, oracle_value, DesignKind, SimDesign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    pub table: u8,
    pub replicates: usize,
    pub n: usize,
    pub seed: u64,
    pub level: f64,
    /// Divide IPW sums by `Σw` instead of `n`.
    pub self_normalize: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            table: 1,
            replicates: 1000,
            n: 2000,
            seed: 0,
            level: 0.95,
            self_normalize: false,
            execution: Execution::default(),
        }
    }
}

impl TableConfig {
    pub fn design(&self) -> Result<DesignKind> {
        match self.table {
            1 => Ok(DesignKind::Single),
            2 => Ok(DesignKind::Multiple),
            3 => Ok(DesignKind::Mpm),
            t => Err(Error::Config(format!("table must be 1, 2 or 3, got {t}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        self.design()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

pub const MEAN_ROWS: [&str; 9] = [
    "IPW",
    "IPW (incorrect)",
    "RA",
    "RA (incorrect)",
    "MR (correct)",
    "MR (IPW incorrect)",
    "MR (RA incorrect)",
    "MR (Both incorrect)",
    "Complete Case",
];

pub const MPM_ROWS: [&str; 4] = ["IPW beta0", "IPW beta1", "Complete Case beta0", "Complete Case beta1"];

pub fn row_names(kind: DesignKind) -> &'static [&'static str] {
    match kind {
        DesignKind::Mpm => &MPM_ROWS,
        _ => &MEAN_ROWS,
    }
}

/// `(estimate, theoretical SE)` of one row in one replicate.
pub type RowOutcome = std::result::Result<(f64, f64), String>;

fn mean_rows(ds: &Dataset, kind: DesignKind, self_normalize: bool) -> Vec<RowOutcome> {
    let strata = build_strata(ds);
    let f = kind.functional();
    let opts = FitOptions::default();
    let (odds_ok, outcome_ok) = kind.families(false, false);
    let (odds_bad, outcome_bad) = kind.families(true, true);
    let odds = |wrong: bool| {
        let fam = if wrong { &odds_bad } else { &odds_ok };
        fit_all_odds(ds, &strata, fam, &opts)
            .map(fitted_odds)
            .map_err(|e| e.to_string())
    };
    let outcomes = |wrong: bool| {
        let fam = if wrong { &outcome_bad } else { &outcome_ok };
        fit_all_outcomes(ds, &strata, &f, fam, &opts)
            .map(fitted_outcomes)
            .map_err(|e| e.to_string())
    };
    let fits = [odds(false), odds(true)];
    let regs = [outcomes(false), outcomes(true)];
    // (method, odds misspecified, outcome misspecified)
    let rows = [
        (Method::Ipw, false, false),
        (Method::Ipw, true, false),
        (Method::Ra, false, false),
        (Method::Ra, false, true),
        (Method::Mr, false, false),
        (Method::Mr, true, false),
        (Method::Mr, false, true),
        (Method::Mr, true, true),
        (Method::CompleteCase, false, false),
    ];
    let (empty_odds, empty_outcomes) = (OddsSet::new(), OutcomeSet::new());
    rows.iter()
        .map(|&(method, ow, rw)| {
            let mut cfg = AnalysisConfig::new(method, f.clone());
            cfg.self_normalize = self_normalize;
            let o = match method {
                Method::Ipw | Method::Mr => fits[ow as usize].as_ref().map_err(Clone::clone)?,
                _ => &empty_odds,
            };
            let m = match method {
                Method::Ra | Method::Mr => regs[rw as usize].as_ref().map_err(Clone::clone)?,
                _ => &empty_outcomes,
            };
            let run = || -> Result<(f64, f64)> {
                let est = estimate_with(&cfg, ds, &strata, o, m)?;
                let (se, _) = influence_with(&cfg, ds, &strata, o, m, &est)?;
                Ok((est.theta, se))
            };
            run().map_err(|e| e.to_string())
        })
        .collect()
}

fn mpm_rows(ds: &Dataset, kind: DesignKind) -> Vec<RowOutcome> {
    let strata = build_strata(ds);
    let spec = kind.score_spec();
    let opts = MpmOptions::default();
    let (family, _) = kind.families(false, false);
    let ipw = fit_all_odds(ds, &strata, &family, &FitOptions::default())
        .map(fitted_odds)
        .and_then(|odds| solve_weighted_ee(ds, &strata, Some(&odds), &spec, &opts));
    let cc = solve_weighted_ee(ds, &strata, None, &spec, &opts);
    let mut out = Vec::with_capacity(4);
    for res in [ipw, cc] {
        for j in 0..2 {
            out.push(match &res {
                Ok(est) => Ok((est.theta[j], est.se()[j])),
                Err(e) => Err(e.to_string()),
            });
        }
    }
    out
}

/// Every row of one replicate, in `row_names` order.
pub fn run_replicate(cfg: &TableConfig, replicate: usize) -> Result<Vec<RowOutcome>> {
    let kind = cfg.design()?;
    let ds = generate(&SimDesign::new(kind, cfg.n, cfg.seed).with_stream(replicate as u64));
    Ok(match kind {
        DesignKind::Mpm => mpm_rows(&ds, kind),
        _ => mean_rows(&ds, kind, cfg.self_normalize),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: String,
    pub truth: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub sample_se: f64,
    pub mean_theoretical_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub row: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableResult {
    pub config: TableConfig,
    pub rows: Vec<RowSummary>,
    pub replicates: Vec<ReplicateRow>,
}

fn summarize(row: &str, truth: f64, results: &[&RowOutcome], z: f64) -> RowSummary {
    let ok: Vec<(f64, f64)> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let m = ok.len() as f64;
    let mean = ok.iter().map(|r| r.0).sum::<f64>() / m;
    let sample_se = if ok.len() > 1 {
        (ok.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let covered = ok.iter().filter(|(e, s)| (e - truth).abs() <= z * s).count();
    RowSummary {
        row: row.to_string(),
        truth,
        succeeded: ok.len(),
        failed: results.len() - ok.len(),
        bias: mean - truth,
        sample_se,
        mean_theoretical_se: ok.iter().map(|r| r.1).sum::<f64>() / m,
        coverage: covered as f64 / m,
    }
}

pub fn run_table(cfg: &TableConfig) -> Result<TableResult> {
    cfg.validate()?;
    let kind = cfg.design()?;
    let truth = oracle_value(kind).theta;
    let names = row_names(kind);
    let per_rep: Vec<Vec<RowOutcome>> = cfg
        .execution
        .map(cfg.replicates, |b| run_replicate(cfg, b))
        .into_iter()
        .collect::<Result<_>>()?;
    let z = z_value(cfg.level);
    let truth_of = |k: usize| match kind {
        DesignKind::Mpm => truth[k % 2],
        _ => truth[0],
    };
    let rows = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let col: Vec<&RowOutcome> = per_rep.iter().map(|r| &r[k]).collect();
            summarize(name, truth_of(k), &col, z)
        })
        .collect();
    let replicates = per_rep
        .iter()
        .enumerate()
        .flat_map(|(b, rows)| {
            rows.iter().enumerate().map(move |(k, r)| match r {
                Ok((e, s)) => ReplicateRow {
                    replicate: b,
                    row: names[k].to_string(),
                    estimate: Some(*e),
                    se: Some(*s),
                    covered: Some((e - truth_of(k)).abs() <= z * s),
                    error: None,
                },
                Err(msg) => ReplicateRow {
                    replicate: b,
                    row: names[k].to_string(),
                    estimate: None,
                    se: None,
                    covered: None,
                    error: Some(msg.clone()),
                },
            })
        })
        .collect();
    Ok(TableResult {
        config: cfg.clone(),
        rows,
        replicates,
    })
}

impl TableResult {
    pub fn row(&self, name: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.replicates {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
