//! The three simulation designs, their closed-form truths, and a Monte Carlo
//! re-derivation of those truths from large samples.
//!
//! * `Single`: `X = (Y1, Y2)`, `L = Y3`; eight equally likely `(A, R)` cells.
//! * `Multiple`: `X = (Y1, Y2)`, `L = (Y3, Y4)`; sixteen equally likely cells.
//! * `Mpm`: `X = Y1`, `L = (Y2, Y3)` jointly Gaussian, cells drawn given the
//!   full data; target is the regression of `Y3` on `Y2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{build_strata, Dataset, Functional, Record};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ipw, estimate_mr, estimate_ra, Odds, OddsSet, Outcome, OutcomeSet};
use crate::glm::{Basis, ModelFamily};
use crate::inference::{if_variance_ipw, if_variance_mr, if_variance_ra};
use crate::mpm::{solve_weighted_ee, MpmOptions, ScoreSpec};
use crate::pattern::{all_patterns, Pattern, PatternPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Single,
    Multiple,
    Mpm,
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::Single => "single",
            DesignKind::Multiple => "multiple",
            DesignKind::Mpm => "mpm",
        })
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "1" => Ok(DesignKind::Single),
            "multiple" | "2" => Ok(DesignKind::Multiple),
            "mpm" | "3" => Ok(DesignKind::Mpm),
            other => Err(Error::Config(format!(
                "unknown design `{other}` (expected single, multiple or mpm)"
            ))),
        }
    }
}

impl DesignKind {
    pub fn p(self) -> usize {
        match self {
            DesignKind::Single | DesignKind::Multiple => 2,
            DesignKind::Mpm => 1,
        }
    }

    pub fn d(self) -> usize {
        match self {
            DesignKind::Single => 1,
            DesignKind::Multiple | DesignKind::Mpm => 2,
        }
    }

    pub fn x_names(self) -> Vec<String> {
        match self {
            DesignKind::Single | DesignKind::Multiple => vec!["Y1".into(), "Y2".into()],
            DesignKind::Mpm => vec!["Y1".into()],
        }
    }

    pub fn l_names(self) -> Vec<String> {
        match self {
            DesignKind::Single => vec!["Y3".into()],
            DesignKind::Multiple => vec!["Y3".into(), "Y4".into()],
            DesignKind::Mpm => vec!["Y2".into(), "Y3".into()],
        }
    }

    /// Target functional of the mean designs (`E[Y3]`, `E[Y3 Y4]`).
    pub fn functional(self) -> Functional {
        match self {
            DesignKind::Single => Functional::Coordinate(0),
            DesignKind::Multiple => Functional::Product(vec![0, 1]),
            DesignKind::Mpm => Functional::Coordinate(1),
        }
    }

    /// Regression of `Y3` on `Y2` for the marginal-model design.
    pub fn score_spec(self) -> ScoreSpec {
        ScoreSpec::Linear {
            response: 1,
            regressors: vec![0],
        }
    }

    /// Analyst model families; the flags apply the deliberate misspecifications.
    pub fn families(self, odds_wrong: bool, outcome_wrong: bool) -> (ModelFamily, ModelFamily) {
        let pair = |s: &str| PatternPair::parse(s).expect("valid literal");
        match self {
            DesignKind::Single => {
                let mut odds = ModelFamily::new(Basis::Affine);
                let mut outcome = ModelFamily::new(Basis::Affine);
                if odds_wrong {
                    odds = odds.with_override(pair("11,0"), Basis::InterceptOnly);
                }
                if outcome_wrong {
                    outcome = outcome.with_override(
                        pair("11,0"),
                        Basis::Restricted {
                            x: vec![0],
                            l: vec![],
                            quadratic: false,
                        },
                    );
                }
                (odds, outcome)
            }
            DesignKind::Multiple => {
                let mut odds = ModelFamily::new(Basis::Affine);
                let mut outcome = ModelFamily::new(Basis::Affine);
                for r in ["00", "01", "10", "11"] {
                    outcome = outcome.with_override(pair(&format!("{r},00")), Basis::Quadratic);
                }
                for p in ["00,01", "00,10"] {
                    if odds_wrong {
                        odds = odds.with_override(pair(p), Basis::InterceptOnly);
                    }
                    if outcome_wrong {
                        outcome = outcome.with_override(pair(p), Basis::InterceptOnly);
                    }
                }
                (odds, outcome)
            }
            DesignKind::Mpm => (ModelFamily::new(Basis::Affine), ModelFamily::new(Basis::Affine)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimDesign {
    pub kind: DesignKind,
    pub n: usize,
    pub seed: u64,
    /// Independent stream of the seeded generator (one per replicate).
    #[serde(default)]
    pub stream: u64,
}

impl SimDesign {
    pub fn new(kind: DesignKind, n: usize, seed: u64) -> Self {
        SimDesign {
            kind,
            n,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// `N(mean, ½I + ½11ᵀ)` via its lower Cholesky factor.
#[derive(Debug, Clone)]
struct Mvn {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

fn equicorrelated(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.5 })
}

impl Mvn {
    fn new(mean: &[f64]) -> Self {
        let k = mean.len();
        let factor = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            equicorrelated(k).cholesky().expect("positive definite").l()
        };
        Mvn {
            mean: DVector::from_column_slice(mean),
            factor,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.mean.len();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.factor * z).iter().copied().collect()
    }
}

/// Places `values` (observed coordinates first for `L`, then `X`) into a record.
fn record_from(r: Pattern, a: Pattern, l_vals: &[f64], x_vals: &[f64]) -> Record {
    let mut l = vec![None; a.len()];
    for (j, v) in a.observed().zip(l_vals) {
        l[j] = Some(*v);
    }
    let mut x = vec![None; r.len()];
    for (j, v) in r.observed().zip(x_vals) {
        x[j] = Some(*v);
    }
    Record::new(x, l).expect("generated records are valid")
}

/// A fully observed draw of the marginal-model design, before masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub x: f64,
    pub l: [f64; 2],
    pub r: Pattern,
    pub a: Pattern,
}

fn single_mvns() -> Vec<Mvn> {
    vec![
        Mvn::new(&[]),
        Mvn::new(&[1.0]),
        Mvn::new(&[1.0, -1.0]),
        Mvn::new(&[0.0, -1.0, -1.0]),
    ]
}

fn multiple_mvns() -> (Vec<Mvn>, Vec<Mvn>) {
    let partial = vec![
        Mvn::new(&[]),
        Mvn::new(&[0.5]),
        Mvn::new(&[1.0, 1.0]),
        Mvn::new(&[1.0, 1.0, 1.0]),
    ];
    let complete = (2..=4).map(|k| Mvn::new(&vec![1.0; k])).collect();
    (partial, complete)
}

pub fn generate(design: &SimDesign) -> Dataset {
    generate_with_latent(design).0
}

/// The dataset, plus the unmasked draws for the marginal-model design.
pub fn generate_with_latent(design: &SimDesign) -> (Dataset, Option<Vec<Latent>>) {
    let mut rng = design.rng();
    let kind = design.kind;
    let p_pats = all_patterns(kind.p()).expect("small p");
    let d_pats = all_patterns(kind.d()).expect("small d");
    let mut latent = None;
    let records: Vec<Record> = match kind {
        DesignKind::Single => {
            let mvns = single_mvns();
            (0..design.n)
                .map(|_| {
                    let cell = rng.random_range(0..8usize);
                    let (a, r) = (d_pats[cell / 4], p_pats[cell % 4]);
                    let k = r.count_ones();
                    if a.is_complete() {
                        let v = mvns[k + 1].sample(&mut rng);
                        record_from(r, a, &v[..1], &v[1..])
                    } else {
                        let v = mvns[k].sample(&mut rng);
                        record_from(r, a, &[], &v)
                    }
                })
                .collect()
        }
        DesignKind::Multiple => {
            let (partial, complete) = multiple_mvns();
            (0..design.n)
                .map(|_| {
                    let cell = rng.random_range(0..16usize);
                    let (a, r) = (d_pats[cell / 4], p_pats[cell % 4]);
                    let k = r.count_ones();
                    let na = a.count_ones();
                    let v = match na {
                        2 => complete[k].sample(&mut rng),
                        1 => partial[k + 1].sample(&mut rng),
                        _ => partial[k].sample(&mut rng),
                    };
                    record_from(r, a, &v[..na], &v[na..])
                })
                .collect()
        }
        DesignKind::Mpm => {
            let joint = Mvn::new(&[1.0, 0.0, -1.0]);
            let mut draws = Vec::with_capacity(design.n);
            let recs = (0..design.n)
                .map(|_| {
                    let v = joint.sample(&mut rng);
                    let e = (0.5 * v[0]).exp();
                    // cells: (R=0, a) for a = 00..11, then (R=1, a) for a = 00..11
                    let weights = [1.0, 1.0, 1.0, 1.0, e, e, e, 1.0];
                    let cell = WeightedIndex::new(weights).expect("positive weights").sample(&mut rng);
                    let (r, a) = (p_pats[cell / 4], d_pats[cell % 4]);
                    draws.push(Latent {
                        x: v[0],
                        l: [v[1], v[2]],
                        r,
                        a,
                    });
                    let l_obs: Vec<f64> = a.observed().map(|j| v[1 + j]).collect();
                    let x_obs: Vec<f64> = r.observed().map(|_| v[0]).collect();
                    record_from(r, a, &l_obs, &x_obs)
                })
                .collect();
            latent = Some(draws);
            recs
        }
    };
    let ds = Dataset::new(records, kind.x_names(), kind.l_names()).expect("n >= 1");
    (ds, latent)
}

/// Closed-form truth and oracle nuisances of a design.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub kind: DesignKind,
    /// `θ` for the mean designs; `(β0, β1)` for the marginal-model design.
    pub theta: Vec<f64>,
    pub odds: OddsSet,
    /// Empty for the marginal-model design.
    pub outcomes: OutcomeSet,
}

fn pp(s: &str) -> PatternPair {
    PatternPair::parse(s).expect("valid literal")
}

pub fn oracle_value(kind: DesignKind) -> GroundTruth {
    let mut odds = OddsSet::new();
    let mut outcomes = OutcomeSet::new();
    let mut put_odds = |s: &str, f: fn(&[f64], &[f64]) -> f64| {
        odds.insert(pp(s), Odds::oracle(pp(s), f));
    };
    let theta = match kind {
        DesignKind::Single => {
            put_odds("00,0", |_, _| 0.25);
            put_odds("10,0", |x, _| 0.5 * (2.0 * x[0]).exp());
            put_odds("01,0", |x, _| 0.5 * (2.0 * x[0]).exp());
            put_odds("11,0", |x, _| (8.0 / 3.0 * x[0] - 4.0 / 3.0 * x[1] - 4.0 / 3.0).exp());
            let mut put = |s: &str, f: fn(&[f64], &[f64]) -> f64| {
                outcomes.insert(pp(s), Outcome::oracle(pp(s), f));
            };
            put("00,0", |_, _| 0.75);
            put("10,0", |x, _| x[0] / 2.0 + 1.0);
            put("01,0", |x, _| x[0] / 2.0 + 1.0);
            put("11,0", |x, _| (x[0] + x[1]) / 3.0 + 2.0 / 3.0);
            vec![89.0 / 96.0]
        }
        DesignKind::Multiple => {
            put_odds("00,00", |_, _| 0.25);
            put_odds("01,00", |x, _| 0.5 * (0.375 - 0.5 * x[0]).exp());
            put_odds("10,00", |x, _| 0.5 * (0.375 - 0.5 * x[0]).exp());
            put_odds("11,00", |_, _| 1.0);
            for a in ["01", "10"] {
                put_odds(&format!("00,{a}"), |_, l| 0.25 * (0.375 - 0.5 * l[0]).exp());
                put_odds(&format!("01,{a}"), |_, _| 0.5);
                put_odds(&format!("10,{a}"), |_, _| 0.5);
                put_odds(&format!("11,{a}"), |_, _| 1.0);
            }
            let mut put = |s: &str, f: fn(&[f64], &[f64]) -> f64| {
                outcomes.insert(pp(s), Outcome::oracle(pp(s), f));
            };
            put("00,00", |_, _| 1.5);
            put("01,00", |x, _| 0.25 + (x[0] / 2.0 + 0.5).powi(2));
            put("10,00", |x, _| 0.25 + (x[0] / 2.0 + 0.5).powi(2));
            put("11,00", |x, _| 1.0 / 6.0 + (x[0] + x[1] + 1.0).powi(2) / 9.0);
            // one primary coordinate observed: m = ℓ_a · E[other | x_r, ℓ_a]
            for a in ["01", "10"] {
                put(&format!("00,{a}"), |_, l| 0.5 * l[0] * (l[0] + 1.0));
                put(&format!("01,{a}"), |x, l| l[0] * (x[0] + l[0] + 1.0) / 3.0);
                put(&format!("10,{a}"), |x, l| l[0] * (x[0] + l[0] + 1.0) / 3.0);
                put(&format!("11,{a}"), |x, l| l[0] * (x[0] + x[1] + l[0] + 1.0) / 4.0);
            }
            vec![175.0 / 128.0]
        }
        DesignKind::Mpm => {
            for a in ["00", "01", "10"] {
                put_odds(&format!("0,{a}"), |_, _| 0.5);
                put_odds(&format!("1,{a}"), |x, _| (0.5 * x[0]).exp());
            }
            vec![-1.0, 0.5]
        }
    };
    GroundTruth {
        kind,
        theta,
        odds,
        outcomes,
    }
}

/// Probability of each `(R, A)` cell, where it does not depend on the data.
pub fn cell_probability(kind: DesignKind) -> Option<f64> {
    match kind {
        DesignKind::Single => Some(1.0 / 8.0),
        DesignKind::Multiple => Some(1.0 / 16.0),
        DesignKind::Mpm => None,
    }
}

/// One Monte Carlo moment: `value` should be zero up to `se`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub se: f64,
    pub z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub design: DesignKind,
    pub n: usize,
    pub seed: u64,
    pub z_threshold: f64,
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&OracleCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub const ORACLE_Z_THRESHOLD: f64 = 4.0;

fn check(name: String, value: f64, se: f64) -> OracleCheck {
    let z = if se > 0.0 {
        value / se
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    OracleCheck {
        name,
        value,
        se,
        z,
        passed: z.abs() <= ORACLE_Z_THRESHOLD,
    }
}

/// Mean of `v` (zero-padded to `n` entries) and its standard error.
fn mean_se(values: &[f64], n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() + (n - values.len()) as f64 * mean * mean;
    (mean, (ss / nf / nf).sqrt())
}

type TestFn = (String, Box<dyn Fn(&[f64]) -> f64>);

/// Constant, each covariate and its square, quartile bins, local windows.
fn test_functions(names: &[String], sample: &[Vec<f64>]) -> Vec<TestFn> {
    let mut out: Vec<TestFn> = vec![("1".into(), Box::new(|_| 1.0))];
    for (j, name) in names.iter().enumerate() {
        out.push((name.clone(), Box::new(move |c| c[j])));
        out.push((format!("{name}^2"), Box::new(move |c| c[j] * c[j])));
        let mut col: Vec<f64> = sample.iter().map(|c| c[j]).collect();
        col.sort_by(f64::total_cmp);
        let q = |p: f64| col[((col.len() - 1) as f64 * p) as usize];
        let cuts = [f64::NEG_INFINITY, q(0.25), q(0.5), q(0.75), f64::INFINITY];
        for b in 0..4 {
            let (lo, hi) = (cuts[b], cuts[b + 1]);
            out.push((
                format!("{name} in quartile {}", b + 1),
                Box::new(move |c| if c[j] > lo && c[j] <= hi { 1.0 } else { 0.0 }),
            ));
        }
        for t in [-1.0, 0.0, 1.0, 2.0] {
            out.push((
                format!("|{name} - {t}| < 0.25"),
                Box::new(move |c| if (c[j] - t).abs() < 0.25 { 1.0 } else { 0.0 }),
            ));
        }
    }
    out
}

fn covariates(rec: &Record, pair: &PatternPair) -> Vec<f64> {
    pair.r
        .observed()
        .map(|j| rec.x()[j].expect("observed"))
        .chain(pair.a.observed().map(|j| rec.l()[j].expect("observed")))
        .collect()
}

fn covariate_names(ds: &Dataset, pair: &PatternPair) -> Vec<String> {
    pair.r
        .observed()
        .map(|j| ds.x_names()[j].clone())
        .chain(pair.a.observed().map(|j| ds.l_names()[j].clone()))
        .collect()
}

/// Moment checks on observed data for every oracle odds and regression.
fn nuisance_checks(ds: &Dataset, truth: &GroundTruth, f: &Functional, out: &mut Vec<OracleCheck>) -> Result<()> {
    let strata = build_strata(ds);
    let n = ds.n();
    for (pair, odds) in &truth.odds {
        // E[I(case) g] = E[I(pool) O g]
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for &i in strata.stratum(pair) {
            rows.push((covariates(&ds.records()[i], pair), 1.0));
        }
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            rows.push((covariates(rec, pair), -odds.evaluate(rec)?));
        }
        let sample: Vec<Vec<f64>> = rows.iter().map(|(c, _)| c.clone()).collect();
        for (name, g) in test_functions(&covariate_names(ds, pair), &sample) {
            let vals: Vec<f64> = rows.iter().map(|(c, w)| w * g(c)).collect();
            let (m, se) = mean_se(&vals, n);
            out.push(check(format!("odds {pair}: g = {name}"), m, se));
        }
    }
    for (pair, outcome) in &truth.outcomes {
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            rows.push((covariates(rec, pair), f.evaluate_record(rec)? - outcome.predict(rec)?));
        }
        let sample: Vec<Vec<f64>> = rows.iter().map(|(c, _)| c.clone()).collect();
        for (name, g) in test_functions(&covariate_names(ds, pair), &sample) {
            let vals: Vec<f64> = rows.iter().map(|(c, r)| r * g(c)).collect();
            let (m, se) = mean_se(&vals, n);
            out.push(check(format!("regression {pair}: g = {name}"), m, se));
        }
    }
    Ok(())
}

fn cell_checks(ds: &Dataset, prob: f64, out: &mut Vec<OracleCheck>) {
    let strata = build_strata(ds);
    let n = ds.n() as f64;
    let se = (prob * (1.0 - prob) / n).sqrt();
    for r in all_patterns(ds.p()).expect("small p") {
        for a in all_patterns(ds.d()).expect("small d") {
            let pair = PatternPair::new(r, a);
            let freq = strata.stratum(&pair).len() as f64 / n;
            out.push(check(format!("P{pair} = {prob}"), freq - prob, se));
        }
    }
}

/// Mean `1` and covariance `½I + ½11ᵀ` of the draws in one fully observed cell.
fn gaussian_cell_checks(ds: &Dataset, pair: &PatternPair, mean: &[f64], out: &mut Vec<OracleCheck>) {
    let strata = build_strata(ds);
    let rows: Vec<Vec<f64>> = strata
        .stratum(pair)
        .iter()
        .map(|&i| {
            let rec = &ds.records()[i];
            rec.l()
                .iter()
                .chain(rec.x())
                .map(|v| v.expect("complete cell"))
                .collect()
        })
        .collect();
    let k = mean.len();
    let m = rows.len();
    for a in 0..k {
        let vals: Vec<f64> = rows.iter().map(|v| v[a] - mean[a]).collect();
        let (mu, se) = mean_se(&vals, m);
        out.push(check(format!("cell {pair}: mean of coordinate {}", a + 1), mu, se));
        for b in a..k {
            let target = if a == b { 1.0 } else { 0.5 };
            let vals: Vec<f64> = rows
                .iter()
                .map(|v| (v[a] - mean[a]) * (v[b] - mean[b]) - target)
                .collect();
            let (mu, se) = mean_se(&vals, m);
            out.push(check(format!("cell {pair}: cov({}, {})", a + 1, b + 1), mu, se));
        }
    }
}

/// Re-derives every closed form of `kind` on a sample of size `n_big`.
pub fn verify_oracles(kind: DesignKind, n_big: usize, seed: u64) -> Result<OracleReport> {
    if n_big < 100_000 {
        return Err(Error::Config(format!(
            "verify_oracles needs n_big >= 100000, got {n_big}"
        )));
    }
    let (ds, latent) = generate_with_latent(&SimDesign::new(kind, n_big, seed));
    let truth = oracle_value(kind);
    let mut checks = Vec::new();
    let f = kind.functional();
    nuisance_checks(&ds, &truth, &f, &mut checks)?;
    if let Some(prob) = cell_probability(kind) {
        cell_checks(&ds, prob, &mut checks);
    }
    let strata = build_strata(&ds);
    match kind {
        DesignKind::Single | DesignKind::Multiple => {
            let cell = match kind {
                DesignKind::Single => ("11,1", vec![0.0, -1.0, -1.0]),
                _ => ("11,11", vec![1.0; 4]),
            };
            gaussian_cell_checks(&ds, &pp(cell.0), &cell.1, &mut checks);
            let target = truth.theta[0];
            let ra = estimate_ra(&ds, &strata, &truth.outcomes, &f)?;
            let (se, _) = if_variance_ra(&ds, &strata, &truth.outcomes, &ra)?;
            checks.push(check(
                "theta via RA with oracle regressions".into(),
                ra.theta - target,
                se,
            ));
            let ipw = estimate_ipw(&ds, &strata, &truth.odds, &f, false)?;
            let (se, _) = if_variance_ipw(&ds, &strata, &truth.odds, &f, &ipw)?;
            checks.push(check("theta via IPW with oracle odds".into(), ipw.theta - target, se));
            let mr = estimate_mr(&ds, &strata, &truth.odds, &truth.outcomes, &f)?;
            let (se, _) = if_variance_mr(&ds, &strata, &truth.odds, &truth.outcomes, &f, &mr)?;
            checks.push(check(
                "theta via MR with oracle nuisances".into(),
                mr.theta - target,
                se,
            ));
        }
        DesignKind::Mpm => {
            let latent = latent.expect("marginal design keeps latent draws");
            latent_checks(&latent, &mut checks);
            let spec = kind.score_spec();
            let est = solve_weighted_ee(&ds, &strata, Some(&truth.odds), &spec, &MpmOptions::default())?;
            let se = est.se();
            for (j, name) in ["beta0", "beta1"].iter().enumerate() {
                checks.push(check(
                    format!("{name} via weighted EE with oracle odds"),
                    est.theta[j] - truth.theta[j],
                    se[j],
                ));
            }
        }
    }
    Ok(OracleReport {
        design: kind,
        n: n_big,
        seed,
        z_threshold: ORACLE_Z_THRESHOLD,
        checks,
    })
}

/// Uses the unmasked draws: the odds may depend on `x` but not on the
/// unobserved part of `L`, and the full-data regression is `-1 + Y2/2`.
fn latent_checks(latent: &[Latent], out: &mut Vec<OracleCheck>) {
    let n = latent.len();
    let names = ["Y1".to_string(), "Y2".to_string(), "Y3".to_string()];
    let full: Vec<Vec<f64>> = latent.iter().map(|d| vec![d.x, d.l[0], d.l[1]]).collect();
    let mut tests = test_functions(&names, &full);
    tests.push(("Y2*Y3".into(), Box::new(|c| c[1] * c[2])));
    let r1 = Pattern::ones(1).expect("len 1");
    for r in [Pattern::zeros(1).expect("len 1"), r1] {
        for a_val in 0..3u16 {
            let a = Pattern::from_value(a_val, 2).expect("len 2");
            let w: Vec<f64> = latent
                .iter()
                .map(|d| {
                    let case = if d.r == r && d.a == a { 1.0 } else { 0.0 };
                    let pool = if d.a.is_complete() && d.r.dominates(&r) {
                        1.0
                    } else {
                        0.0
                    };
                    let odds = if r == r1 { (0.5 * d.x).exp() } else { 0.5 };
                    case - odds * pool
                })
                .collect();
            for (name, g) in &tests {
                let vals: Vec<f64> = w.iter().zip(&full).map(|(w, c)| w * g(c)).collect();
                let (m, se) = mean_se(&vals, n);
                out.push(check(format!("full-data odds (R={r}, A={a}): g = {name}"), m, se));
            }
        }
    }
    // E[(Y3 + 1 - Y2/2) (1, Y2)] = 0
    for (name, g) in [("1", 0usize), ("Y2", 1)] {
        let vals: Vec<f64> = latent
            .iter()
            .map(|d| {
                let e = d.l[1] + 1.0 - 0.5 * d.l[0];
                if g == 0 {
                    e
                } else {
                    e * d.l[0]
                }
            })
            .collect();
        let (m, se) = mean_se(&vals, n);
        out.push(check(format!("full-data regression residual: g = {name}"), m, se));
    }
}
