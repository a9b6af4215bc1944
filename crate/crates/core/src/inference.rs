//! Influence-function standard errors for the θ-estimators and the
//! nonparametric case bootstrap.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, OrderStatistics};

use crate::data::{Dataset, Functional, StratumIndex};
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, Method, OddsSet, OutcomeSet, ThetaEstimate};
use crate::exec::Execution;

/// Per-record influence values `φ_i`; `var(φ)/n` estimates the variance.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVector {
    pub method: Method,
    pub values: Vec<f64>,
}

impl InfluenceVector {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `sd(φ) / √n`, with the `1/n` variance.
    pub fn se(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.mean();
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (var / n).sqrt()
    }
}

fn finish(method: Method, values: Vec<f64>) -> Result<(f64, InfluenceVector)> {
    let iv = InfluenceVector { method, values };
    let se = iv.se();
    if !se.is_finite() {
        return Err(Error::Degenerate(format!(
            "{method} influence-function SE is not finite"
        )));
    }
    Ok((se, iv))
}

/// IPW influence function with the odds-estimation correction
/// `Σ_k G_kᵀ ψα_k`, `G_k = (1/n) Σ (f - c) O_k d_k I(R >= r_k, A = 1_d)`.
/// For the self-normalized estimator `c = θ̂` and everything is divided by
/// `(1/n) Σ w`.
pub fn if_variance_ipw(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    f: &Functional,
    est: &ThetaEstimate,
) -> Result<(f64, InfluenceVector)> {
    let n = ds.n() as f64;
    let wt = compute_weights(ds, strata, odds, None)?;
    let (center, denom) = if est.self_normalized {
        (est.theta, wt.sum() / n)
    } else {
        (0.0, 1.0)
    };
    let mut phi = vec![-(est.theta - center); ds.n()];
    let mut f_of = vec![0.0; ds.n()];
    for (k, &i) in wt.indices.iter().enumerate() {
        let fi = f.evaluate_record(&ds.records()[i])?;
        f_of[i] = fi;
        phi[i] += wt.weights[k] * (fi - center);
    }
    for pair in strata.incomplete_pairs() {
        let Some(model) = odds[&pair].fitted() else {
            continue;
        };
        let mut g = DVector::zeros(model.alpha.len());
        let mut row = Vec::new();
        for &i in strata.pool(&pair.r) {
            let o = model.evaluate_with_row(&ds.records()[i], &mut row)?;
            let scale = (f_of[i] - center) * o;
            for (gj, dj) in g.iter_mut().zip(&row) {
                *gj += scale * dj;
            }
        }
        g /= n;
        let corr = model.psi_matrix(ds, strata)? * g;
        for (p, c) in phi.iter_mut().zip(corr.iter()) {
            *p += c;
        }
    }
    for p in phi.iter_mut() {
        *p /= denom;
    }
    finish(Method::Ipw, phi)
}

/// RA influence function: `h - θ̂ + Σ_k M_kᵀ ψβ_k`,
/// `M_k = (1/n) Σ ∇_β m_k I(R = r_k, A = a_k)`.
pub fn if_variance_ra(
    ds: &Dataset,
    strata: &StratumIndex,
    outcomes: &OutcomeSet,
    est: &ThetaEstimate,
) -> Result<(f64, InfluenceVector)> {
    let n = ds.n() as f64;
    let mut phi: Vec<f64> = est.contributions.iter().map(|c| c - est.theta).collect();
    for pair in strata.incomplete_pairs() {
        let Some(model) = outcomes[&pair].fitted() else {
            continue;
        };
        let mut m = DVector::zeros(model.beta.len());
        for &i in strata.stratum(&pair) {
            m += model.predict_with_gradient(&ds.records()[i])?.1;
        }
        m /= n;
        let corr = model.psi_matrix(ds, strata)? * m;
        for (p, c) in phi.iter_mut().zip(corr.iter()) {
            *p += c;
        }
    }
    finish(Method::Ra, phi)
}

/// MR influence function with both nuisance corrections:
/// `Mβ_k = (1/n) Σ ∇m_k [I(case_k) - O_k I(pool_k)]` and
/// `Mα_k = (1/n) Σ (f - m_k) O_k d_k I(pool_k)`.
pub fn if_variance_mr(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: &OddsSet,
    outcomes: &OutcomeSet,
    f: &Functional,
    est: &ThetaEstimate,
) -> Result<(f64, InfluenceVector)> {
    let n = ds.n() as f64;
    let mut phi: Vec<f64> = est.contributions.iter().map(|c| c - est.theta).collect();
    for pair in strata.incomplete_pairs() {
        let (o_fn, m_fn) = (&odds[&pair], &outcomes[&pair]);
        let mut m_beta = m_fn.fitted().map(|m| DVector::zeros(m.beta.len()));
        let mut m_alpha = o_fn.fitted().map(|m| DVector::<f64>::zeros(m.alpha.len()));
        if m_beta.is_none() && m_alpha.is_none() {
            continue;
        }
        if let Some(mb) = m_beta.as_mut() {
            for &i in strata.stratum(&pair) {
                if let (_, Some(g)) = m_fn.predict_with_gradient(&ds.records()[i])? {
                    *mb += g;
                }
            }
        }
        let mut row = Vec::new();
        for &i in strata.pool(&pair.r) {
            let rec = &ds.records()[i];
            let (m, grad) = m_fn.predict_with_gradient(rec)?;
            let o = match o_fn.fitted() {
                Some(model) => model.evaluate_with_row(rec, &mut row)?,
                None => o_fn.evaluate(rec)?,
            };
            if let (Some(mb), Some(g)) = (m_beta.as_mut(), grad) {
                *mb -= g * o;
            }
            if let Some(ma) = m_alpha.as_mut() {
                let scale = (f.evaluate_record(rec)? - m) * o;
                for (aj, dj) in ma.iter_mut().zip(&row) {
                    *aj += scale * dj;
                }
            }
        }
        if let (Some(mb), Some(model)) = (m_beta, m_fn.fitted()) {
            let corr = model.psi_matrix(ds, strata)? * (mb / n);
            for (p, c) in phi.iter_mut().zip(corr.iter()) {
                *p += c;
            }
        }
        if let (Some(ma), Some(model)) = (m_alpha, o_fn.fitted()) {
            let corr = model.psi_matrix(ds, strata)? * (ma / n);
            for (p, c) in phi.iter_mut().zip(corr.iter()) {
                *p += c;
            }
        }
    }
    finish(Method::Mr, phi)
}

/// Complete-case mean: `φ_i = I(A_i = 1_d) (f_i - θ̂) / π̂`.
pub fn if_variance_complete_case(
    ds: &Dataset,
    strata: &StratumIndex,
    est: &ThetaEstimate,
) -> Result<(f64, InfluenceVector)> {
    let pi = strata.complete_cases().len() as f64 / ds.n() as f64;
    let mut phi = vec![0.0; ds.n()];
    for &i in strata.complete_cases() {
        // contributions hold f_i / π̂ on complete cases
        phi[i] = est.contributions[i] - est.theta / pi;
    }
    finish(Method::CompleteCase, phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Influence,
    BootstrapPercentile,
    BootstrapNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Two-sided standard normal critical value for `level`.
pub fn z_value(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

pub fn normal_ci(estimate: f64, se: f64, level: f64, method: CiMethod) -> CiReport {
    let z = z_value(level);
    CiReport {
        estimate,
        se,
        lower: estimate - z * se,
        upper: estimate + z * se,
        level,
        method,
        replicates: None,
        failed: None,
        seed: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure_rate: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 500,
            seed: 0,
            level: 0.95,
            max_failure_rate: 0.2,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Estimates of successful replicates, in replicate order.
    pub estimates: Vec<Vec<f64>>,
    pub failures: Vec<(usize, String)>,
    pub total: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn se(&self, component: usize) -> f64 {
        let v: Vec<f64> = self.estimates.iter().map(|e| e[component]).collect();
        let m = v.len() as f64;
        let mean = v.iter().sum::<f64>() / m;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt()
    }

    /// Normal and percentile intervals around `estimate`.
    pub fn intervals(&self, component: usize, estimate: f64, level: f64) -> (CiReport, CiReport) {
        let se = self.se(component);
        let tag = |mut r: CiReport| {
            r.replicates = Some(self.total);
            r.failed = Some(self.failures.len());
            r.seed = Some(self.seed);
            r
        };
        let normal = tag(normal_ci(estimate, se, level, CiMethod::BootstrapNormal));
        let mut data = Data::new(self.estimates.iter().map(|e| e[component]).collect::<Vec<_>>());
        let alpha = (1.0 - level) / 2.0;
        let percentile = tag(CiReport {
            estimate,
            se,
            lower: data.quantile(alpha),
            upper: data.quantile(1.0 - alpha),
            level,
            method: CiMethod::BootstrapPercentile,
            replicates: None,
            failed: None,
            seed: None,
        });
        (normal, percentile)
    }
}

/// Index resample for replicate `b`: stream `b` of a ChaCha8 generator seeded with `seed`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Case bootstrap: reruns `estimator` (nuisance fits included) on `B`
/// resamples. Failed replicates are skipped unless they exceed the tolerated
/// fraction.
pub fn bootstrap<F>(ds: &Dataset, opts: &BootstrapOptions, estimator: F) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync + Send,
{
    if opts.replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    if !(0.0..1.0).contains(&opts.level) || opts.level <= 0.0 {
        return Err(Error::Config(format!(
            "confidence level {} must lie in (0, 1)",
            opts.level
        )));
    }
    let outcomes = opts.execution.map(opts.replicates, |b| {
        let idx = resample_indices(ds.n(), opts.seed, b);
        estimator(&ds.subset(&idx))
    });
    let mut estimates = Vec::with_capacity(opts.replicates);
    let mut failures = Vec::new();
    for (b, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(v) if v.iter().all(|x| x.is_finite()) => estimates.push(v),
            Ok(_) => failures.push((b, "non-finite estimate".to_string())),
            Err(e) => failures.push((b, e.to_string())),
        }
    }
    if failures.len() as f64 > opts.max_failure_rate * opts.replicates as f64 || estimates.len() < 2 {
        return Err(Error::BootstrapInstability {
            failed: failures.len(),
            total: opts.replicates,
        });
    }
    Ok(BootstrapResult {
        estimates,
        failures,
        total: opts.replicates,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_strata, Record};
    use crate::estimators::estimate_complete_case;

    fn simple(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| {
                let l = if i % 4 == 0 { None } else { Some((i % 7) as f64) };
                Record::new(vec![Some(i as f64)], vec![l]).unwrap()
            })
            .collect();
        Dataset::from_records(recs).unwrap()
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let ds = simple(200);
        let f = Functional::Coordinate(0);
        let run = |exec| {
            let opts = BootstrapOptions {
                replicates: 20,
                seed: 42,
                execution: exec,
                ..BootstrapOptions::default()
            };
            bootstrap(&ds, &opts, |d| {
                let s = build_strata(d);
                Ok(vec![estimate_complete_case(d, &s, &f)?.theta])
            })
            .unwrap()
        };
        let a = run(Execution::Sequential);
        let b = run(Execution::Parallel);
        let c = run(Execution::Parallel);
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(a.intervals(0, 1.0, 0.95), c.intervals(0, 1.0, 0.95));
    }

    #[test]
    fn identical_rows_give_zero_width() {
        let recs = vec![Record::new(vec![Some(1.0)], vec![Some(2.0)]).unwrap(); 30];
        let ds = Dataset::from_records(recs).unwrap();
        let opts = BootstrapOptions {
            replicates: 10,
            ..BootstrapOptions::default()
        };
        let res = bootstrap(&ds, &opts, |d| {
            let s = build_strata(d);
            Ok(vec![estimate_complete_case(d, &s, &Functional::Coordinate(0))?.theta])
        })
        .unwrap();
        let (normal, pct) = res.intervals(0, 2.0, 0.95);
        assert_eq!(normal.lower, normal.upper);
        assert_eq!(pct.lower, pct.upper);
    }

    #[test]
    fn instability_is_reported() {
        let ds = simple(50);
        let opts = BootstrapOptions {
            replicates: 10,
            ..BootstrapOptions::default()
        };
        let err = bootstrap(&ds, &opts, |_| Err(Error::Singular("boom".into()))).unwrap_err();
        assert!(matches!(err, Error::BootstrapInstability { failed: 10, total: 10 }));
        // one failure in ten is tolerated
        let res = bootstrap(&ds, &opts, |d| {
            if d.records()[0] == d.records()[1] {
                Err(Error::Singular("tie".into()))
            } else {
                Ok(vec![1.0])
            }
        });
        if let Ok(r) = res {
            assert!(r.failures.len() <= 2);
        }
        let err = bootstrap(&ds, &BootstrapOptions { replicates: 1, ..opts }, |_| Ok(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn complete_case_se_matches_formula() {
        let ds = simple(400);
        let strata = build_strata(&ds);
        let f = Functional::Coordinate(0);
        let est = estimate_complete_case(&ds, &strata, &f).unwrap();
        let (se, _) = if_variance_complete_case(&ds, &strata, &est).unwrap();
        let vals: Vec<f64> = strata
            .complete_cases()
            .iter()
            .map(|&i| ds.records()[i].l()[0].unwrap())
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!((se - (var / m).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn z_value_is_standard() {
        assert!((z_value(0.95) - 1.959963984540054).abs() < 1e-9);
        let ci = normal_ci(1.0, 0.5, 0.95, CiMethod::Influence);
        assert!(ci.lower <= 1.0 && 1.0 <= ci.upper);
    }
}
