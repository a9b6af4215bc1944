//! One-call driver: fit the nuisance models a method needs, estimate θ and
//! attach the influence-function standard error. Also the unit of work that
//! the bootstrap reruns on every resample.

use std::collections::BTreeMap;

use crate::data::{build_strata, Dataset, Functional, StratumIndex};
use crate::error::Result;
use crate::estimators::{
    estimate_complete_case, estimate_ipw, estimate_mr, estimate_ra, fitted_odds, fitted_outcomes, Method, OddsSet,
    OutcomeSet, ThetaEstimate,
};
use crate::glm::{fit_all_odds, fit_all_outcomes, FitOptions, ModelFamily, ModelSummary};
use crate::inference::{if_variance_complete_case, if_variance_ipw, if_variance_mr, if_variance_ra, InfluenceVector};

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub method: Method,
    pub functional: Functional,
    pub odds_family: ModelFamily,
    pub outcome_family: ModelFamily,
    pub fit: FitOptions,
    pub self_normalize: bool,
}

impl AnalysisConfig {
    pub fn new(method: Method, functional: Functional) -> Self {
        AnalysisConfig {
            method,
            functional,
            odds_family: ModelFamily::default(),
            outcome_family: ModelFamily::default(),
            fit: FitOptions::default(),
            self_normalize: false,
        }
    }

    fn needs_odds(&self) -> bool {
        matches!(self.method, Method::Ipw | Method::Mr)
    }

    fn needs_outcomes(&self) -> bool {
        matches!(self.method, Method::Ra | Method::Mr)
    }

    pub fn fit_nuisances(&self, ds: &Dataset, strata: &StratumIndex) -> Result<(OddsSet, OutcomeSet)> {
        let odds = if self.needs_odds() {
            fitted_odds(fit_all_odds(ds, strata, &self.odds_family, &self.fit)?)
        } else {
            BTreeMap::new()
        };
        let outcomes = if self.needs_outcomes() {
            fitted_outcomes(fit_all_outcomes(
                ds,
                strata,
                &self.functional,
                &self.outcome_family,
                &self.fit,
            )?)
        } else {
            BTreeMap::new()
        };
        Ok((odds, outcomes))
    }

    /// Point estimate only; used inside bootstrap replicates.
    pub fn estimate(&self, ds: &Dataset) -> Result<f64> {
        ds.check_estimator_dimensions()?;
        let strata = build_strata(ds);
        let (odds, outcomes) = self.fit_nuisances(ds, &strata)?;
        Ok(estimate_with(self, ds, &strata, &odds, &outcomes)?.theta)
    }

    pub fn run(&self, ds: &Dataset) -> Result<Analysis> {
        ds.check_estimator_dimensions()?;
        self.functional.validate(ds.d())?;
        let strata = build_strata(ds);
        let (odds, outcomes) = self.fit_nuisances(ds, &strata)?;
        let estimate = estimate_with(self, ds, &strata, &odds, &outcomes)?;
        let (se, influence) = influence_with(self, ds, &strata, &odds, &outcomes, &estimate)?;
        let models = odds
            .values()
            .filter_map(|o| o.fitted().map(|m| m.summary(ds)))
            .chain(outcomes.values().filter_map(|o| o.fitted().map(|m| m.summary(ds))))
            .collect();
        Ok(Analysis {
            estimate,
            se,
            influence,
            models,
            strata,
        })
    }
}

pub fn estimate_with(
    cfg: &AnalysisConfig,
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    outcomes: &OutcomeSet,
) -> Result<ThetaEstimate> {
    let f = &cfg.functional;
    match cfg.method {
        Method::Ipw => estimate_ipw(ds, strata, odds, f, cfg.self_normalize),
        Method::Ra => estimate_ra(ds, strata, outcomes, f),
        Method::Mr => estimate_mr(ds, strata, odds, outcomes, f),
        Method::CompleteCase => estimate_complete_case(ds, strata, f),
    }
}

pub fn influence_with(
    cfg: &AnalysisConfig,
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    outcomes: &OutcomeSet,
    est: &ThetaEstimate,
) -> Result<(f64, InfluenceVector)> {
    match cfg.method {
        Method::Ipw => if_variance_ipw(ds, strata, odds, &cfg.functional, est),
        Method::Ra => if_variance_ra(ds, strata, outcomes, est),
        Method::Mr => if_variance_mr(ds, strata, odds, outcomes, &cfg.functional, est),
        Method::CompleteCase => if_variance_complete_case(ds, strata, est),
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub estimate: ThetaEstimate,
    pub se: f64,
    pub influence: InfluenceVector,
    pub models: Vec<ModelSummary>,
    pub strata: StratumIndex,
}
