//! Marginal parametric models: `θ*` solves `E[s(θ|L)] = 0`, estimated from the
//! IPW-weighted complete cases, with a sandwich covariance that accounts for
//! the estimated odds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StratumIndex};
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, Method, OddsSet, WeightDiagnostics, WeightTable};

/// The estimating function `s(θ|ℓ)`. Coordinates are 0-based indices into `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreSpec {
    /// Least squares of `L[response]` on `(1, L[regressors])`.
    Linear { response: usize, regressors: Vec<usize> },
    /// Mean and covariance of `L[coords]`. The covariance enters through
    /// `W = chol(Σ)⁻¹`: strictly lower entries as-is, diagonal as `log W_jj`.
    Gaussian { coords: Vec<usize> },
}

impl ScoreSpec {
    pub fn dim(&self) -> usize {
        match self {
            ScoreSpec::Linear { regressors, .. } => 1 + regressors.len(),
            ScoreSpec::Gaussian { coords } => {
                let k = coords.len();
                k + k * (k - 1) / 2 + k
            }
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let coords: Vec<usize> = match self {
            ScoreSpec::Linear { response, regressors } => {
                if regressors.contains(response) {
                    return Err(Error::Config("the response cannot also be a regressor".into()));
                }
                std::iter::once(*response).chain(regressors.iter().copied()).collect()
            }
            ScoreSpec::Gaussian { coords } => {
                if coords.is_empty() {
                    return Err(Error::Config("Gaussian score needs at least one coordinate".into()));
                }
                coords.clone()
            }
        };
        if let Some(j) = coords.iter().find(|&&j| j >= d) {
            return Err(Error::Config(format!(
                "score refers to primary coordinate {} but d = {d}",
                j + 1
            )));
        }
        Ok(())
    }

    pub fn names(&self, l_names: &[String]) -> Vec<String> {
        match self {
            ScoreSpec::Linear { regressors, .. } => std::iter::once("(intercept)".to_string())
                .chain(regressors.iter().map(|&j| l_names[j].clone()))
                .collect(),
            ScoreSpec::Gaussian { coords } => {
                let mut names: Vec<String> = coords.iter().map(|&j| format!("mean[{}]", l_names[j])).collect();
                for a in 1..coords.len() {
                    for b in 0..a {
                        names.push(format!("W[{},{}]", l_names[coords[a]], l_names[coords[b]]));
                    }
                }
                names.extend(coords.iter().map(|&j| format!("log W[{0},{0}]", l_names[j])));
                names
            }
        }
    }

    /// `(W, μ)` from a Gaussian parameter vector.
    fn gaussian_parts(k: usize, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let mu = theta.rows(0, k).into_owned();
        let mut w = DMatrix::zeros(k, k);
        let mut pos = k;
        for a in 1..k {
            for b in 0..a {
                w[(a, b)] = theta[pos];
                pos += 1;
            }
        }
        for a in 0..k {
            w[(a, a)] = theta[pos + a].exp();
        }
        (w, mu)
    }

    pub fn score(&self, theta: &DVector<f64>, l: &[f64]) -> DVector<f64> {
        match self {
            ScoreSpec::Linear { response, regressors } => {
                let z = linear_row(regressors, l);
                let resid = l[*response] - z.dot(theta);
                z * resid
            }
            ScoreSpec::Gaussian { coords } => {
                let k = coords.len();
                let (w, mu) = Self::gaussian_parts(k, theta);
                let e = DVector::from_iterator(k, coords.iter().map(|&j| l[j])) - mu;
                let u = &w * &e;
                let mut s = DVector::zeros(self.dim());
                s.rows_mut(0, k).copy_from(&w.tr_mul(&u));
                let mut pos = k;
                for a in 1..k {
                    for b in 0..a {
                        s[pos] = -u[a] * e[b];
                        pos += 1;
                    }
                }
                for a in 0..k {
                    s[pos + a] = 1.0 - u[a] * w[(a, a)] * e[a];
                }
                s
            }
        }
    }

    /// `∇_θ s(θ|ℓ)`, row = score component, column = parameter.
    pub fn jacobian(&self, theta: &DVector<f64>, l: &[f64]) -> DMatrix<f64> {
        match self {
            ScoreSpec::Linear { regressors, .. } => {
                let z = linear_row(regressors, l);
                -(&z * z.transpose())
            }
            ScoreSpec::Gaussian { coords } => {
                let k = coords.len();
                let q = self.dim();
                let (w, mu) = Self::gaussian_parts(k, theta);
                let e = DVector::from_iterator(k, coords.iter().map(|&j| l[j])) - mu;
                let u = &w * &e;
                let wtw = w.tr_mul(&w);
                let off: Vec<(usize, usize)> = (1..k).flat_map(|a| (0..a).map(move |b| (a, b))).collect();
                let g0 = k + off.len();
                let mut jac = DMatrix::zeros(q, q);
                for m in 0..k {
                    for n in 0..k {
                        jac[(m, n)] = -wtw[(m, n)];
                    }
                    for (p, &(a, b)) in off.iter().enumerate() {
                        let v = if m == b { u[a] } else { 0.0 } + w[(a, m)] * e[b];
                        jac[(m, k + p)] = v;
                        jac[(k + p, m)] = v;
                    }
                    for a in 0..k {
                        let v = if m == a { w[(a, a)] * u[a] } else { 0.0 } + w[(a, m)] * w[(a, a)] * e[a];
                        jac[(m, g0 + a)] = v;
                        jac[(g0 + a, m)] = v;
                    }
                }
                for (p, &(a, b)) in off.iter().enumerate() {
                    for (p2, &(a2, b2)) in off.iter().enumerate() {
                        if a == a2 {
                            jac[(k + p, k + p2)] = -e[b2] * e[b];
                        }
                    }
                    let v = -w[(a, a)] * e[a] * e[b];
                    jac[(k + p, g0 + a)] = v;
                    jac[(g0 + a, k + p)] = v;
                }
                for a in 0..k {
                    let we = w[(a, a)] * e[a];
                    jac[(g0 + a, g0 + a)] = -we * (we + u[a]);
                }
                jac
            }
        }
    }
}

fn linear_row(regressors: &[usize], l: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        1 + regressors.len(),
        std::iter::once(1.0).chain(regressors.iter().map(|&j| l[j])),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Drop the odds-estimation correction from the sandwich.
    pub naive_sandwich: bool,
}

impl Default for MpmOptions {
    fn default() -> Self {
        MpmOptions {
            tol: 1e-8,
            max_iter: 100,
            naive_sandwich: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpmEstimate {
    pub method: Method,
    pub theta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub names: Vec<String>,
    pub iterations: usize,
    pub residual: f64,
    pub weights: WeightDiagnostics,
}

impl MpmEstimate {
    pub fn se(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Only IPW (and the complete-case baseline) are congenial with a marginal model.
pub fn check_method(method: Method) -> Result<()> {
    match method {
        Method::Ipw | Method::CompleteCase => Ok(()),
        other => Err(Error::Congeniality(other.to_string())),
    }
}

/// Weighted complete cases: `(L_i, w_i)`.
struct Weighted {
    l: Vec<Vec<f64>>,
    w: Vec<f64>,
    n: usize,
}

impl Weighted {
    fn from_table(ds: &Dataset, wt: &WeightTable) -> Self {
        Weighted {
            l: wt
                .indices
                .iter()
                .map(|&i| ds.records()[i].l_complete().expect("complete case"))
                .collect(),
            w: wt.weights.clone(),
            n: ds.n(),
        }
    }

    fn ee(&self, spec: &ScoreSpec, theta: &DVector<f64>) -> DVector<f64> {
        let mut total = DVector::zeros(spec.dim());
        for (l, &w) in self.l.iter().zip(&self.w) {
            total += spec.score(theta, l) * w;
        }
        total / self.n as f64
    }

    fn jacobian(&self, spec: &ScoreSpec, theta: &DVector<f64>) -> DMatrix<f64> {
        let q = spec.dim();
        let mut total = DMatrix::zeros(q, q);
        for (l, &w) in self.l.iter().zip(&self.w) {
            total += spec.jacobian(theta, l) * w;
        }
        total / self.n as f64
    }

    /// Closed-form root for the linear spec; weighted MLE for the Gaussian spec.
    fn closed_form(&self, spec: &ScoreSpec) -> Result<DVector<f64>> {
        match spec {
            ScoreSpec::Linear { response, regressors } => {
                let q = spec.dim();
                let mut xtx = DMatrix::zeros(q, q);
                let mut xty = DVector::zeros(q);
                for (l, &w) in self.l.iter().zip(&self.w) {
                    let z = linear_row(regressors, l);
                    xtx += &z * z.transpose() * w;
                    xty += z * (w * l[*response]);
                }
                xtx.cholesky()
                    .map(|c| c.solve(&xty))
                    .ok_or_else(|| Error::Singular("weighted normal equations are singular".into()))
            }
            ScoreSpec::Gaussian { coords } => {
                let k = coords.len();
                let sw: f64 = self.w.iter().sum();
                let pick = |l: &Vec<f64>| DVector::from_iterator(k, coords.iter().map(|&j| l[j]));
                let mut mu = DVector::zeros(k);
                for (l, &w) in self.l.iter().zip(&self.w) {
                    mu += pick(l) * w;
                }
                mu /= sw;
                let mut cov = DMatrix::zeros(k, k);
                for (l, &w) in self.l.iter().zip(&self.w) {
                    let e = pick(l) - &mu;
                    cov += &e * e.transpose() * w;
                }
                cov /= sw;
                let chol = cov
                    .cholesky()
                    .ok_or_else(|| Error::Singular("weighted covariance is not positive definite".into()))?;
                let w = chol
                    .l()
                    .solve_lower_triangular(&DMatrix::identity(k, k))
                    .ok_or_else(|| Error::Singular("covariance factor is singular".into()))?;
                let mut theta = DVector::zeros(spec.dim());
                theta.rows_mut(0, k).copy_from(&mu);
                let mut pos = k;
                for a in 1..k {
                    for b in 0..a {
                        theta[pos] = w[(a, b)];
                        pos += 1;
                    }
                }
                for a in 0..k {
                    theta[pos + a] = w[(a, a)].ln();
                }
                Ok(theta)
            }
        }
    }

    fn newton(&self, spec: &ScoreSpec, start: DVector<f64>, opts: &MpmOptions) -> Result<(DVector<f64>, usize, f64)> {
        let mut theta = start;
        let mut psi = self.ee(spec, &theta);
        let mut iterations = 0;
        loop {
            let resid = psi.amax();
            if resid <= opts.tol {
                return Ok((theta, iterations, resid));
            }
            if iterations >= opts.max_iter {
                return Err(Error::EeNonConvergence {
                    iterations,
                    residual: resid,
                    last_iterate: theta.iter().copied().collect(),
                });
            }
            let jac = self.jacobian(spec, &theta);
            let step = jac
                .lu()
                .solve(&psi)
                .ok_or_else(|| Error::Singular("weighted score Jacobian is singular".into()))?;
            let mut t = 1.0;
            loop {
                let cand = &theta - &step * t;
                let cand_psi = self.ee(spec, &cand);
                if cand_psi.amax() < resid || t < 1e-8 {
                    theta = cand;
                    psi = cand_psi;
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
        }
    }
}

fn weight_table(ds: &Dataset, strata: &StratumIndex, odds: Option<&OddsSet>) -> Result<WeightTable> {
    match odds {
        Some(odds) => compute_weights(ds, strata, odds, None),
        None => Ok(WeightTable {
            indices: strata.complete_cases().to_vec(),
            weights: vec![1.0; strata.complete_cases().len()],
            contributions: Default::default(),
            n: ds.n(),
        }),
    }
}

/// Solves `Σ_i s(θ|L_i) (1 + Q̂_{R_i}) I(A_i = 1_d) = 0`. With `odds = None`
/// every complete case gets weight one (complete-case analysis).
pub fn solve_weighted_ee(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
    opts: &MpmOptions,
) -> Result<MpmEstimate> {
    spec.validate(ds.d())?;
    let wt = weight_table(ds, strata, odds)?;
    if wt.indices.is_empty() {
        return Err(Error::Precondition("no records with a complete primary block".into()));
    }
    let data = Weighted::from_table(ds, &wt);
    let start = data.closed_form(spec)?;
    let (theta, iterations, residual) = data.newton(spec, start, opts)?;
    let covariance = sandwich_from(ds, strata, odds, spec, &theta, &data, &wt, opts.naive_sandwich)?;
    Ok(MpmEstimate {
        method: if odds.is_some() {
            Method::Ipw
        } else {
            Method::CompleteCase
        },
        theta,
        covariance,
        names: spec.names(ds.l_names()),
        iterations,
        residual,
        weights: wt.diagnostics(),
    })
}

/// Root of the linear spec by weighted least squares, without iterating.
pub fn closed_form_linear(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
) -> Result<DVector<f64>> {
    let wt = weight_table(ds, strata, odds)?;
    Weighted::from_table(ds, &wt).closed_form(spec)
}

/// Same root with externally supplied weights on the complete cases.
pub fn solve_with_weights(
    ds: &Dataset,
    strata: &StratumIndex,
    weights: &[f64],
    spec: &ScoreSpec,
    opts: &MpmOptions,
) -> Result<DVector<f64>> {
    let data = Weighted {
        l: strata
            .complete_cases()
            .iter()
            .map(|&i| ds.records()[i].l_complete().expect("complete case"))
            .collect(),
        w: weights.to_vec(),
        n: ds.n(),
    };
    let start = data.closed_form(spec)?;
    Ok(data.newton(spec, start, opts)?.0)
}

/// `‖(1/n) Σ w_i s(θ|L_i)‖∞`.
pub fn ee_root_residual(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
    theta: &DVector<f64>,
) -> Result<f64> {
    let wt = weight_table(ds, strata, odds)?;
    Ok(Weighted::from_table(ds, &wt).ee(spec, theta).amax())
}

/// Analytic Jacobian of the weighted estimating function.
pub fn ee_jacobian(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let wt = weight_table(ds, strata, odds)?;
    let data = Weighted::from_table(ds, &wt);
    Ok((data.ee(spec, theta), data.jacobian(spec, theta)))
}

pub fn sandwich_variance(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
    theta: &DVector<f64>,
    naive: bool,
) -> Result<DMatrix<f64>> {
    let wt = weight_table(ds, strata, odds)?;
    let data = Weighted::from_table(ds, &wt);
    sandwich_from(ds, strata, odds, spec, theta, &data, &wt, naive)
}

/// `A⁻¹ Cov(c) A⁻ᵀ / n` with `c_i = w_i s_i + Σ_k Φ_k ψα_k(i)`,
/// `Φ_k = (1/n) Σ O_k s d_kᵀ I(R >= r_k, A = 1_d)`.
#[allow(clippy::too_many_arguments)]
fn sandwich_from(
    ds: &Dataset,
    strata: &StratumIndex,
    odds: Option<&OddsSet>,
    spec: &ScoreSpec,
    theta: &DVector<f64>,
    data: &Weighted,
    wt: &WeightTable,
    naive: bool,
) -> Result<DMatrix<f64>> {
    let n = ds.n();
    let q = spec.dim();
    let a = data.jacobian(spec, theta);
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("weighted score Jacobian is singular".into()))?;
    let mut c = DMatrix::zeros(n, q);
    let mut scores = vec![None; n];
    for (k, &i) in wt.indices.iter().enumerate() {
        let s = spec.score(theta, &data.l[k]);
        for j in 0..q {
            c[(i, j)] = wt.weights[k] * s[j];
        }
        scores[i] = Some(s);
    }
    if let (Some(odds), false) = (odds, naive) {
        for pair in strata.incomplete_pairs() {
            let Some(model) = odds[&pair].fitted() else {
                continue;
            };
            let mut phi = DMatrix::zeros(q, model.alpha.len());
            let mut row = Vec::new();
            for &i in strata.pool(&pair.r) {
                let o = model.evaluate_with_row(&ds.records()[i], &mut row)?;
                let s = scores[i].as_ref().expect("pool records are complete cases");
                phi += s * DVector::from_column_slice(&row).transpose() * o;
            }
            phi /= n as f64;
            c += model.psi_matrix(ds, strata)? * phi.transpose();
        }
    }
    let mean = c.row_mean();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let meat = c.tr_mul(&c) / n as f64;
    let cov = &a_inv * meat * a_inv.transpose() / n as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}
