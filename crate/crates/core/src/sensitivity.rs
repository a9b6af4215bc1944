//! Exponential-tilting sensitivity analysis for the self-normalized IPW
//! estimator: every fitted odds term of stratum `(r, a)` is multiplied by
//! `exp(δ_āᵀ(ℓ_ā - c_ā))`, the tilt in the unobserved primary coordinates.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{build_strata, Dataset, Functional, Record, StratumIndex};
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, fitted_odds, ipw_with_weights, Method, OddsSet};
use crate::glm::{fit_all_odds, FitOptions, ModelFamily, ETA_CLAMP};
use crate::inference::{bootstrap, BootstrapOptions};
use crate::pattern::PatternPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub delta: Vec<f64>,
    pub center: Vec<f64>,
}

impl Tilt {
    pub fn new(delta: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if delta.len() != center.len() {
            return Err(Error::Config("tilt delta and center must have the same length".into()));
        }
        if delta.iter().chain(&center).any(|v| !v.is_finite()) {
            return Err(Error::Config("tilt parameters must be finite".into()));
        }
        Ok(Tilt { delta, center })
    }

    /// `δ = 0`, centered at zero.
    pub fn zero(d: usize) -> Self {
        Tilt {
            delta: vec![0.0; d],
            center: vec![0.0; d],
        }
    }

    /// Log of the tilt factor for stratum `pair` at a complete record.
    pub fn exponent(&self, pair: &PatternPair, rec: &Record) -> Result<f64> {
        if !pair.is_incomplete() {
            return Err(Error::Precondition(format!(
                "tilting is defined only for incomplete strata, got {pair}"
            )));
        }
        if self.delta.len() != pair.a.len() {
            return Err(Error::Config(format!(
                "tilt has {} coordinates but d = {}",
                self.delta.len(),
                pair.a.len()
            )));
        }
        let l = rec
            .l_complete()
            .ok_or_else(|| Error::Precondition("tilt factor needs a complete primary block".into()))?;
        Ok(pair
            .a
            .missing()
            .map(|j| self.delta[j] * (l[j] - self.center[j]))
            .sum::<f64>()
            .clamp(-ETA_CLAMP, ETA_CLAMP))
    }

    pub fn factor(&self, pair: &PatternPair, rec: &Record) -> Result<f64> {
        Ok(self.exponent(pair, rec)?.exp())
    }
}

/// `θ̃ = (1/ñ) Σ f(L_i) (1 + Q̃_{R_i}) I(A_i = 1_d)` with `ñ = Σ (1 + Q̃_{R_i}) I(A_i = 1_d)`.
pub fn tilted_estimate(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    f: &Functional,
    tilt: &Tilt,
) -> Result<f64> {
    let wt = compute_weights(ds, strata, odds, Some(tilt))?;
    if wt.indices.is_empty() || wt.sum() <= 0.0 {
        return Err(Error::Degenerate("tilted weights sum to zero".into()));
    }
    Ok(ipw_with_weights(ds, strata, &wt, f, true, Method::Ipw)?.theta)
}

/// Base tilt plus multipliers; grid point `g` uses `δ = g · delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSpec {
    pub delta: Vec<f64>,
    pub center: Vec<f64>,
    pub grid: Vec<f64>,
}

impl TiltSpec {
    pub fn tilt_at(&self, g: f64) -> Result<Tilt> {
        Tilt::new(self.delta.iter().map(|v| v * g).collect(), self.center.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delta: f64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub functional: String,
    pub points: Vec<CurvePoint>,
    pub replicates: usize,
    pub failed: usize,
    pub seed: u64,
}

fn curve_estimates(
    ds: &Dataset,
    family: &ModelFamily,
    opts: &FitOptions,
    f: &Functional,
    spec: &TiltSpec,
) -> Result<Vec<f64>> {
    let strata = build_strata(ds);
    let odds = fitted_odds(fit_all_odds(ds, &strata, family, opts)?);
    spec.grid
        .iter()
        .map(|&g| tilted_estimate(ds, &strata, &odds, f, &spec.tilt_at(g)?))
        .collect()
}

/// Tilted estimates over the grid with normal bootstrap intervals. Odds are
/// fitted once on the data and refitted within each bootstrap replicate.
pub fn sweep(
    ds: &Dataset,
    family: &ModelFamily,
    opts: &FitOptions,
    f: &Functional,
    spec: &TiltSpec,
    boot: &BootstrapOptions,
) -> Result<SensitivityCurve> {
    if spec.grid.is_empty() {
        return Err(Error::Config("sensitivity grid is empty".into()));
    }
    if spec.delta.len() != ds.d() || spec.center.len() != ds.d() {
        return Err(Error::Config(format!(
            "tilt delta and center need d = {} entries",
            ds.d()
        )));
    }
    let estimates = curve_estimates(ds, family, opts, f, spec)?;
    let res = bootstrap(ds, boot, |d| curve_estimates(d, family, opts, f, spec))?;
    let points = spec
        .grid
        .iter()
        .zip(&estimates)
        .enumerate()
        .map(|(k, (&g, &est))| {
            let (normal, _) = res.intervals(k, est, boot.level);
            CurvePoint {
                delta: g,
                estimate: est,
                ci_lo: normal.lower,
                ci_hi: normal.upper,
            }
        })
        .collect();
    Ok(SensitivityCurve {
        functional: format!("{f:?}"),
        points,
        replicates: res.total,
        failed: res.failures.len(),
        seed: boot.seed,
    })
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(reader: R) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
