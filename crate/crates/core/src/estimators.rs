//! IPW, regression-adjustment, multiply-robust and complete-case estimators of
//! `θ = E[f(L)]`. One code path covers every `d`; with `d = 1` the incomplete
//! primary pattern is just `a = 0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Functional, Record, StratumIndex};
use crate::error::{Error, Result};
use crate::glm::{OddsModel, OutcomeModel};
use crate::pattern::{extract, PatternPair};
use crate::sensitivity::Tilt;

/// Closed-form nuisance evaluated at `(x_r, ℓ_a)`.
pub type NuisanceFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

fn observed_parts(rec: &Record, pair: &PatternPair) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((extract(rec.x(), &pair.r)?, extract(rec.l(), &pair.a)?))
}

/// An odds function `O_{r,a}`, either fitted or known.
#[derive(Clone)]
pub enum Odds {
    Fitted(OddsModel),
    Oracle { pair: PatternPair, func: NuisanceFn },
}

impl fmt::Debug for Odds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Odds::Fitted(m) => write!(f, "Fitted({}, alpha = {:?})", m.pair, m.alpha.as_slice()),
            Odds::Oracle { pair, .. } => write!(f, "Oracle({pair})"),
        }
    }
}

impl Odds {
    pub fn oracle(pair: PatternPair, func: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Odds::Oracle {
            pair,
            func: Arc::new(func),
        }
    }

    pub fn pair(&self) -> PatternPair {
        match self {
            Odds::Fitted(m) => m.pair,
            Odds::Oracle { pair, .. } => *pair,
        }
    }

    pub fn evaluate(&self, rec: &Record) -> Result<f64> {
        match self {
            Odds::Fitted(m) => m.evaluate(rec),
            Odds::Oracle { pair, func } => {
                let (x, l) = observed_parts(rec, pair)?;
                Ok(func(&x, &l))
            }
        }
    }

    pub fn fitted(&self) -> Option<&OddsModel> {
        match self {
            Odds::Fitted(m) => Some(m),
            Odds::Oracle { .. } => None,
        }
    }
}

/// An outcome regression `m_{r,a}`, either fitted or known.
#[derive(Clone)]
pub enum Outcome {
    Fitted(OutcomeModel),
    Oracle { pair: PatternPair, func: NuisanceFn },
}

impl fmt::Debug for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Fitted(m) => write!(f, "Fitted({}, beta = {:?})", m.pair, m.beta.as_slice()),
            Outcome::Oracle { pair, .. } => write!(f, "Oracle({pair})"),
        }
    }
}

impl Outcome {
    pub fn oracle(pair: PatternPair, func: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Outcome::Oracle {
            pair,
            func: Arc::new(func),
        }
    }

    pub fn pair(&self) -> PatternPair {
        match self {
            Outcome::Fitted(m) => m.pair,
            Outcome::Oracle { pair, .. } => *pair,
        }
    }

    pub fn predict(&self, rec: &Record) -> Result<f64> {
        match self {
            Outcome::Fitted(m) => m.predict(rec),
            Outcome::Oracle { pair, func } => {
                let (x, l) = observed_parts(rec, pair)?;
                Ok(func(&x, &l))
            }
        }
    }

    /// Prediction and its β-gradient (`None` for oracles).
    pub fn predict_with_gradient(&self, rec: &Record) -> Result<(f64, Option<DVector<f64>>)> {
        match self {
            Outcome::Fitted(m) => m.predict_with_gradient(rec).map(|(v, g)| (v, Some(g))),
            Outcome::Oracle { .. } => self.predict(rec).map(|v| (v, None)),
        }
    }

    pub fn fitted(&self) -> Option<&OutcomeModel> {
        match self {
            Outcome::Fitted(m) => Some(m),
            Outcome::Oracle { .. } => None,
        }
    }
}

pub type OddsSet = BTreeMap<PatternPair, Odds>;
pub type OutcomeSet = BTreeMap<PatternPair, Outcome>;

pub fn fitted_odds(models: BTreeMap<PatternPair, OddsModel>) -> OddsSet {
    models.into_iter().map(|(k, m)| (k, Odds::Fitted(m))).collect()
}

pub fn fitted_outcomes(models: BTreeMap<PatternPair, OutcomeModel>) -> OutcomeSet {
    models.into_iter().map(|(k, m)| (k, Outcome::Fitted(m))).collect()
}

fn require_models<T>(strata: &StratumIndex, models: &BTreeMap<PatternPair, T>, what: &str) -> Result<()> {
    match strata.incomplete_pairs().find(|p| !models.contains_key(p)) {
        Some(pair) => Err(Error::Config(format!("no {what} model supplied for stratum {pair}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ipw,
    Ra,
    Mr,
    CompleteCase,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ipw => "ipw",
            Method::Ra => "ra",
            Method::Mr => "mr",
            Method::CompleteCase => "complete_case",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ipw" => Ok(Method::Ipw),
            "ra" => Ok(Method::Ra),
            "mr" => Ok(Method::Mr),
            "cc" | "complete_case" => Ok(Method::CompleteCase),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected ipw, ra, mr or cc)"
            ))),
        }
    }
}

/// Total IPW weights `1 + Q_{R_i}` on the complete cases.
#[derive(Debug, Clone)]
pub struct WeightTable {
    /// Record indices with `A = 1_d`.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Per stratum, its odds contribution to each weight (aligned with `indices`).
    pub contributions: BTreeMap<PatternPair, Vec<f64>>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(Σw)² / Σw²`.
    pub effective_sample_size: f64,
    /// `(1/n) Σw`, which should be near one under a correct odds model.
    pub mass: f64,
}

impl WeightTable {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn diagnostics(&self) -> WeightDiagnostics {
        let w = &self.weights;
        let sum: f64 = w.iter().sum();
        let sum_sq: f64 = w.iter().map(|v| v * v).sum();
        let (min, max) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        WeightDiagnostics {
            min,
            max,
            mean: sum / w.len().max(1) as f64,
            effective_sample_size: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
            mass: sum / self.n as f64,
        }
    }
}

pub fn compute_weights(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    tilt: Option<&Tilt>,
) -> Result<WeightTable> {
    require_models(strata, odds, "odds")?;
    let indices = strata.complete_cases().to_vec();
    let mut weights = vec![1.0; indices.len()];
    let mut contributions = BTreeMap::new();
    let position: BTreeMap<usize, usize> = indices.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    for pair in strata.incomplete_pairs() {
        let model = &odds[&pair];
        let mut contrib = vec![0.0; indices.len()];
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            let mut o = model.evaluate(rec)?;
            if let Some(t) = tilt {
                o *= t.factor(&pair, rec)?;
            }
            let k = position[&i];
            contrib[k] = o;
            weights[k] += o;
        }
        contributions.insert(pair, contrib);
    }
    Ok(WeightTable {
        indices,
        weights,
        contributions,
        n: ds.n(),
    })
}

/// Point estimate with its additive decomposition over strata.
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub method: Method,
    pub theta: f64,
    /// Contribution of the observed `f(L) I(A = 1_d)` part.
    pub complete_term: f64,
    /// Contribution attributed to each incomplete stratum.
    pub strata: BTreeMap<PatternPair, f64>,
    /// Per-record summands; their mean is `theta`.
    pub contributions: Vec<f64>,
    pub weights: Option<WeightDiagnostics>,
    pub self_normalized: bool,
}

impl ThetaEstimate {
    pub fn decomposition_sum(&self) -> f64 {
        self.complete_term + self.strata.values().sum::<f64>()
    }
}

fn f_values(ds: &Dataset, strata: &StratumIndex, f: &Functional) -> Result<Vec<f64>> {
    f.validate(ds.d())?;
    strata
        .complete_cases()
        .iter()
        .map(|&i| f.evaluate_record(&ds.records()[i]))
        .collect()
}

fn require_complete_cases(strata: &StratumIndex) -> Result<()> {
    if strata.complete_cases().is_empty() {
        return Err(Error::Precondition("no records with a complete primary block".into()));
    }
    Ok(())
}

/// `θ̂ = (1/n) Σ f(L_i) (1 + Q̂_{R_i}) I(A_i = 1_d)`, or divided by `Σw` when
/// `self_normalize` is set.
pub fn estimate_ipw(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    f: &Functional,
    self_normalize: bool,
) -> Result<ThetaEstimate> {
    ipw_with_weights(
        ds,
        strata,
        &compute_weights(ds, strata, odds, None)?,
        f,
        self_normalize,
        Method::Ipw,
    )
}

pub(crate) fn ipw_with_weights(
    ds: &Dataset,
    strata: &StratumIndex,
    wt: &WeightTable,
    f: &Functional,
    self_normalize: bool,
    method: Method,
) -> Result<ThetaEstimate> {
    require_complete_cases(strata)?;
    let n = ds.n() as f64;
    let fv = f_values(ds, strata, f)?;
    let denom = if self_normalize {
        let s = wt.sum() / n;
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::Degenerate(format!("weight normalizer {s} is not positive")));
        }
        s
    } else {
        1.0
    };
    let complete_term = fv.iter().sum::<f64>() / n / denom;
    let strata_terms = wt
        .contributions
        .iter()
        .map(|(pair, c)| (*pair, fv.iter().zip(c).map(|(f, o)| f * o).sum::<f64>() / n / denom))
        .collect();
    let mut contributions = vec![0.0; ds.n()];
    for (k, &i) in wt.indices.iter().enumerate() {
        contributions[i] = fv[k] * wt.weights[k] / denom;
    }
    let mut est = ThetaEstimate {
        method,
        theta: 0.0,
        complete_term,
        strata: strata_terms,
        contributions,
        weights: Some(wt.diagnostics()),
        self_normalized: self_normalize,
    };
    est.theta = est.decomposition_sum();
    Ok(est)
}

/// `θ̂ = (1/n) Σ [f(L_i) I(A_i = 1_d) + m̂_{R_i,A_i}(X_i, L_i) I(A_i ≠ 1_d)]`.
pub fn estimate_ra(
    ds: &Dataset,
    strata: &StratumIndex,
    outcomes: &OutcomeSet,
    f: &Functional,
) -> Result<ThetaEstimate> {
    require_models(strata, outcomes, "outcome")?;
    let n = ds.n() as f64;
    let fv = f_values(ds, strata, f)?;
    let mut contributions = vec![0.0; ds.n()];
    for (k, &i) in strata.complete_cases().iter().enumerate() {
        contributions[i] = fv[k];
    }
    let mut strata_terms = BTreeMap::new();
    for pair in strata.incomplete_pairs() {
        let model = &outcomes[&pair];
        let mut total = 0.0;
        for &i in strata.stratum(&pair) {
            let m = model.predict(&ds.records()[i])?;
            contributions[i] = m;
            total += m;
        }
        strata_terms.insert(pair, total / n);
    }
    let mut est = ThetaEstimate {
        method: Method::Ra,
        theta: 0.0,
        complete_term: fv.iter().sum::<f64>() / n,
        strata: strata_terms,
        contributions,
        weights: None,
        self_normalized: false,
    };
    est.theta = est.decomposition_sum();
    Ok(est)
}

/// Multiply-robust estimator: for each incomplete stratum, the plug-in
/// `m̂ I(R = r, A = a)` plus the augmentation `(f - m̂) Ô I(R >= r, A = 1_d)`.
pub fn estimate_mr(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    outcomes: &OutcomeSet,
    f: &Functional,
) -> Result<ThetaEstimate> {
    require_models(strata, odds, "odds")?;
    require_models(strata, outcomes, "outcome")?;
    let n = ds.n() as f64;
    let fv = f_values(ds, strata, f)?;
    let mut contributions = vec![0.0; ds.n()];
    let mut f_of = vec![None; ds.n()];
    for (k, &i) in strata.complete_cases().iter().enumerate() {
        contributions[i] = fv[k];
        f_of[i] = Some(fv[k]);
    }
    let mut strata_terms = BTreeMap::new();
    for pair in strata.incomplete_pairs() {
        let (o_model, m_model) = (&odds[&pair], &outcomes[&pair]);
        let mut total = 0.0;
        for &i in strata.stratum(&pair) {
            let m = m_model.predict(&ds.records()[i])?;
            contributions[i] += m;
            total += m;
        }
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            let fi = f_of[i].expect("pool records are complete");
            let aug = (fi - m_model.predict(rec)?) * o_model.evaluate(rec)?;
            contributions[i] += aug;
            total += aug;
        }
        strata_terms.insert(pair, total / n);
    }
    let mut est = ThetaEstimate {
        method: Method::Mr,
        theta: 0.0,
        complete_term: fv.iter().sum::<f64>() / n,
        strata: strata_terms,
        contributions,
        weights: None,
        self_normalized: false,
    };
    est.theta = est.decomposition_sum();
    Ok(est)
}

/// `(1/n) Σ_{r,a} Σ_i (f(L_i) - m̂) Ô I(R_i >= r, A_i = 1_d)`, the amount MR adds to RA.
pub fn augmentation_term(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    outcomes: &OutcomeSet,
    f: &Functional,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in strata.incomplete_pairs() {
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            total += (f.evaluate_record(rec)? - outcomes[&pair].predict(rec)?) * odds[&pair].evaluate(rec)?;
        }
    }
    Ok(total / ds.n() as f64)
}

/// Mean of `f(L)` over records with `A = 1_d`.
pub fn estimate_complete_case(ds: &Dataset, strata: &StratumIndex, f: &Functional) -> Result<ThetaEstimate> {
    require_complete_cases(strata)?;
    let fv = f_values(ds, strata, f)?;
    let cc = strata.complete_cases();
    let theta = fv.iter().sum::<f64>() / cc.len() as f64;
    let scale = ds.n() as f64 / cc.len() as f64;
    let mut contributions = vec![0.0; ds.n()];
    for (k, &i) in cc.iter().enumerate() {
        contributions[i] = fv[k] * scale;
    }
    Ok(ThetaEstimate {
        method: Method::CompleteCase,
        theta,
        complete_term: theta,
        strata: BTreeMap::new(),
        contributions,
        weights: None,
        self_normalized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_strata;
    use crate::glm::{fit_all_odds, fit_all_outcomes, Basis, FitOptions, ModelFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// MNAR-ish data with one X and one L; L missing more often when X is large.
    fn fixture(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let l: f64 = x + rng.sample::<f64, _>(StandardNormal);
                let x_obs = rng.random::<f64>() < 0.7;
                let l_obs = rng.random::<f64>() < 1.0 / (1.0 + (0.5 * x).exp());
                Record::new(vec![x_obs.then_some(x)], vec![l_obs.then_some(l)]).unwrap()
            })
            .collect();
        Dataset::from_records(recs).unwrap()
    }

    fn fits(ds: &Dataset, f: &Functional) -> (StratumIndex, OddsSet, OutcomeSet) {
        let strata = build_strata(ds);
        let opts = FitOptions::default();
        let family = ModelFamily::new(Basis::Affine);
        let odds = fitted_odds(fit_all_odds(ds, &strata, &family, &opts).unwrap());
        let outcomes = fitted_outcomes(fit_all_outcomes(ds, &strata, f, &family, &opts).unwrap());
        (strata, odds, outcomes)
    }

    #[test]
    fn decompositions_sum_to_theta() {
        let ds = fixture(1500, 1);
        let f = Functional::Coordinate(0);
        let (strata, odds, outcomes) = fits(&ds, &f);
        let ests = [
            estimate_ipw(&ds, &strata, &odds, &f, false).unwrap(),
            estimate_ipw(&ds, &strata, &odds, &f, true).unwrap(),
            estimate_ra(&ds, &strata, &outcomes, &f).unwrap(),
            estimate_mr(&ds, &strata, &odds, &outcomes, &f).unwrap(),
            estimate_complete_case(&ds, &strata, &f).unwrap(),
        ];
        for est in &ests {
            assert_eq!(est.theta, est.decomposition_sum());
            let mean = est.contributions.iter().sum::<f64>() / ds.n() as f64;
            assert!((mean - est.theta).abs() < 1e-12, "{:?}", est.method);
        }
    }

    #[test]
    fn mr_is_ra_plus_augmentation() {
        let ds = fixture(1000, 2);
        let f = Functional::Coordinate(0);
        let (strata, odds, outcomes) = fits(&ds, &f);
        let ra = estimate_ra(&ds, &strata, &outcomes, &f).unwrap();
        let mr = estimate_mr(&ds, &strata, &odds, &outcomes, &f).unwrap();
        let aug = augmentation_term(&ds, &strata, &odds, &outcomes, &f).unwrap();
        assert!((mr.theta - (ra.theta + aug)).abs() < 1e-12);
    }

    #[test]
    fn complete_data_gives_sample_mean() {
        let recs: Vec<Record> = (0..20)
            .map(|i| Record::new(vec![Some(i as f64)], vec![Some((i * i) as f64)]).unwrap())
            .collect();
        let ds = Dataset::from_records(recs).unwrap();
        let strata = build_strata(&ds);
        let f = Functional::Coordinate(0);
        let mean = (0..20).map(|i| (i * i) as f64).sum::<f64>() / 20.0;
        let empty = BTreeMap::new();
        for est in [
            estimate_ipw(&ds, &strata, &empty, &f, false).unwrap(),
            estimate_ra(&ds, &strata, &BTreeMap::new(), &f).unwrap(),
            estimate_mr(&ds, &strata, &empty, &BTreeMap::new(), &f).unwrap(),
            estimate_complete_case(&ds, &strata, &f).unwrap(),
        ] {
            assert!((est.theta - mean).abs() < 1e-12);
        }
        let wt = compute_weights(&ds, &strata, &empty, None).unwrap();
        assert!(wt.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn missing_model_is_config_error() {
        let ds = fixture(300, 3);
        let strata = build_strata(&ds);
        let err = estimate_ipw(&ds, &strata, &BTreeMap::new(), &Functional::Coordinate(0), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn estimates_are_permutation_invariant() {
        let ds = fixture(800, 4);
        let f = Functional::Coordinate(0);
        let mut order: Vec<usize> = (0..ds.n()).collect();
        order.reverse();
        order.rotate_left(17);
        let shuffled = ds.subset(&order);
        let run = |ds: &Dataset| {
            let (strata, odds, outcomes) = fits(ds, &f);
            [
                estimate_ipw(ds, &strata, &odds, &f, false).unwrap().theta,
                estimate_ra(ds, &strata, &outcomes, &f).unwrap().theta,
                estimate_mr(ds, &strata, &odds, &outcomes, &f).unwrap().theta,
            ]
        };
        for (a, b) in run(&ds).iter().zip(run(&shuffled)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_are_at_least_one() {
        let ds = fixture(500, 5);
        let f = Functional::Coordinate(0);
        let (strata, odds, _) = fits(&ds, &f);
        let wt = compute_weights(&ds, &strata, &odds, None).unwrap();
        assert!(wt.weights.iter().all(|&w| w >= 1.0));
        let d = wt.diagnostics();
        assert!(d.min >= 1.0 && d.max >= d.mean && d.effective_sample_size <= wt.weights.len() as f64 + 1e-9);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("MR".parse::<Method>().unwrap(), Method::Mr);
        assert_eq!("complete-case".parse::<Method>().unwrap(), Method::CompleteCase);
        assert!("gmm".parse::<Method>().is_err());
    }
}
