//! Per-stratum nuisance models.
//!
//! Odds models are logistic regressions of "in stratum (r, a)" against "in the
//! pool {R >= r, A = 1_d}"; outcome models are least-squares fits of `f(L)` on
//! the pool. Both use designs built from the variables observed in `(r, a)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Functional, Record, StratumIndex};
use crate::error::{Error, Result};
use crate::pattern::PatternPair;

/// Linear predictors are clamped to this range inside the likelihood.
pub const ETA_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    X(usize),
    L(usize),
}

impl Var {
    fn value(self, rec: &Record) -> Option<f64> {
        match self {
            Var::X(j) => rec.x()[j],
            Var::L(j) => rec.l()[j],
        }
    }
}

/// Product of variables; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term(pub Vec<Var>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Design {
    terms: Vec<Term>,
}

impl Design {
    pub fn new(terms: Vec<Term>) -> Self {
        Design { terms }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Writes the design row of `rec` into `out` (cleared first).
    pub fn fill(&self, rec: &Record, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        for term in &self.terms {
            let mut v = 1.0;
            for &var in &term.0 {
                v *= var
                    .value(rec)
                    .ok_or_else(|| Error::Precondition(format!("design variable {var:?} is not observed")))?;
            }
            out.push(v);
        }
        Ok(())
    }

    pub fn row(&self, rec: &Record) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        self.fill(rec, &mut out)?;
        Ok(out)
    }

    pub fn names(&self, x_names: &[String], l_names: &[String]) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| {
                if t.0.is_empty() {
                    return "(intercept)".to_string();
                }
                t.0.iter()
                    .map(|v| match *v {
                        Var::X(j) => x_names[j].clone(),
                        Var::L(j) => l_names[j].clone(),
                    })
                    .collect::<Vec<_>>()
                    .join("*")
            })
            .collect()
    }
}

/// Which functions of the observed `(x_r, ℓ_a)` enter a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `(1, x_r, ℓ_a)`.
    #[default]
    Affine,
    /// Affine terms plus all pairwise products and squares.
    Quadratic,
    InterceptOnly,
    /// Affine (or quadratic) in the listed 0-based coordinates, where observed.
    Restricted {
        #[serde(default)]
        x: Vec<usize>,
        #[serde(default)]
        l: Vec<usize>,
        #[serde(default)]
        quadratic: bool,
    },
}

impl Basis {
    pub fn design(&self, pair: &PatternPair) -> Design {
        let all_vars = pair.r.observed().map(Var::X).chain(pair.a.observed().map(Var::L));
        let (vars, quadratic): (Vec<Var>, bool) = match self {
            Basis::Affine => (all_vars.collect(), false),
            Basis::Quadratic => (all_vars.collect(), true),
            Basis::InterceptOnly => (Vec::new(), false),
            Basis::Restricted { x, l, quadratic } => (
                all_vars
                    .filter(|v| match *v {
                        Var::X(j) => x.contains(&j),
                        Var::L(j) => l.contains(&j),
                    })
                    .collect(),
                *quadratic,
            ),
        };
        let mut terms = vec![Term(Vec::new())];
        terms.extend(vars.iter().map(|&v| Term(vec![v])));
        if quadratic {
            for i in 0..vars.len() {
                for j in i..vars.len() {
                    terms.push(Term(vec![vars[i], vars[j]]));
                }
            }
        }
        Design::new(terms)
    }
}

/// Default basis with per-stratum overrides (used to misspecify on purpose).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelFamily {
    pub default: Basis,
    pub overrides: BTreeMap<PatternPair, Basis>,
}

impl ModelFamily {
    pub fn new(default: Basis) -> Self {
        ModelFamily {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, pair: PatternPair, basis: Basis) -> Self {
        self.overrides.insert(pair, basis);
        self
    }

    pub fn basis_for(&self, pair: &PatternPair) -> &Basis {
        self.overrides.get(pair).unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub n_min: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub separation_bound: f64,
    /// For product functionals, regress the unobserved factors and multiply by
    /// the observed ones.
    pub factorize_products: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_min: 10,
            max_iter: 100,
            tol: 1e-8,
            separation_bound: 30.0,
            factorize_products: true,
        }
    }
}

#[inline]
fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

#[inline]
fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// `log(1 + e^η)` without overflow.
#[inline]
fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pool(strata: &StratumIndex, pair: &PatternPair, n_min: usize, need_case: bool) -> Result<()> {
    let n_case = strata.stratum(pair).len();
    let n_pool = strata.pool(&pair.r).len();
    if n_pool == 0 {
        return Err(Error::Positivity { pair: *pair });
    }
    if n_pool < n_min || (need_case && n_case < n_min) {
        return Err(Error::InsufficientData {
            pair: *pair,
            n_case,
            n_pool,
            n_min,
        });
    }
    Ok(())
}

/// Binary likelihood of case (`y = 1`) against pool (`y = 0`), normalized by
/// the full sample size.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    x: DMatrix<f64>,
    y: Vec<f64>,
    n_total: usize,
}

impl LogisticProblem {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, n_total: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Argument("design and response lengths differ".into()));
        }
        if n_total == 0 {
            return Err(Error::Argument("sample size must be positive".into()));
        }
        Ok(LogisticProblem { x, y, n_total })
    }

    pub fn for_pair(ds: &Dataset, strata: &StratumIndex, pair: &PatternPair, design: &Design) -> Result<Self> {
        let case = strata.stratum(pair);
        let pool = strata.pool(&pair.r);
        let q = design.len();
        let mut x = DMatrix::zeros(case.len() + pool.len(), q);
        let mut y = Vec::with_capacity(case.len() + pool.len());
        let mut row = Vec::with_capacity(q);
        for (k, (&i, label)) in case
            .iter()
            .map(|i| (i, 1.0))
            .chain(pool.iter().map(|i| (i, 0.0)))
            .enumerate()
        {
            design.fill(&ds.records()[i], &mut row)?;
            for (j, v) in row.iter().enumerate() {
                x[(k, j)] = *v;
            }
            y.push(label);
        }
        Self::new(x, y, ds.n())
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn eta(&self, alpha: &DVector<f64>, k: usize) -> f64 {
        (self.x.row(k) * alpha)[0]
    }

    /// Whether any linear predictor falls outside the clamp range.
    pub fn clamped(&self, alpha: &DVector<f64>) -> bool {
        (0..self.y.len()).any(|k| self.eta(alpha, k).abs() > ETA_CLAMP)
    }

    pub fn log_likelihood(&self, alpha: &DVector<f64>) -> f64 {
        let eta = &self.x * alpha;
        let total: f64 = eta
            .iter()
            .zip(&self.y)
            .map(|(&e, &y)| {
                let e = clamp_eta(e);
                y * e - log1pexp(e)
            })
            .sum();
        total / self.n_total as f64
    }

    /// Analytic score and Hessian of [`Self::log_likelihood`].
    pub fn score_and_hessian(&self, alpha: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.dim();
        let eta = &self.x * alpha;
        let mut resid = DVector::zeros(self.y.len());
        let mut wx = self.x.clone();
        for k in 0..self.y.len() {
            let p = logistic(clamp_eta(eta[k]));
            resid[k] = self.y[k] - p;
            let w = p * (1.0 - p);
            for j in 0..q {
                wx[(k, j)] *= w;
            }
        }
        let n = self.n_total as f64;
        let score = self.x.tr_mul(&resid) / n;
        let hess = -(self.x.tr_mul(&wx)) / n;
        (score, hess)
    }

    /// Newton–Raphson with step halving.
    pub fn fit(&self, pair: &PatternPair, opts: &FitOptions) -> Result<LogisticFit> {
        let q = self.dim();
        let n_case = self.y.iter().filter(|&&y| y == 1.0).count();
        let n_pool = self.y.len() - n_case;
        let mut alpha = DVector::zeros(q);
        if n_case > 0 && n_pool > 0 {
            alpha[0] = (n_case as f64 / n_pool as f64).ln();
        }
        let mut ll = self.log_likelihood(&alpha);
        let mut iterations = 0;
        let mut score_norm = f64::INFINITY;
        let mut converged = false;
        while iterations <= opts.max_iter {
            let (score, hess) = self.score_and_hessian(&alpha);
            score_norm = score.amax();
            if score_norm <= opts.tol {
                converged = true;
                break;
            }
            if iterations == opts.max_iter {
                break;
            }
            let max_coef = alpha.amax();
            if max_coef > opts.separation_bound {
                return Err(Error::Separation { pair: *pair, max_coef });
            }
            let info = -hess;
            let step = match info.clone().cholesky() {
                Some(ch) => ch.solve(&score),
                None => {
                    return Err(Error::Singular(format!(
                        "odds information matrix for stratum {pair} is not positive definite"
                    )))
                }
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let cand = &alpha + &step * t;
                let ll_c = self.log_likelihood(&cand);
                if ll_c >= ll - 1e-15 * ll.abs().max(1.0) {
                    alpha = cand;
                    ll = ll_c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
            if !accepted {
                break;
            }
        }
        let max_coef = alpha.amax();
        if !converged {
            if max_coef > opts.separation_bound {
                return Err(Error::Separation { pair: *pair, max_coef });
            }
            return Err(Error::NonConvergence {
                pair: *pair,
                iterations,
                score_norm,
                last_iterate: alpha.iter().copied().collect(),
            });
        }
        if self.clamped(&alpha) {
            return Err(Error::Separation { pair: *pair, max_coef });
        }
        let (_, hess) = self.score_and_hessian(&alpha);
        let info_inv = (-hess)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Singular(format!("odds information matrix for stratum {pair} is singular")))?;
        Ok(LogisticFit {
            alpha,
            info_inv,
            iterations,
            score_norm,
            log_likelihood: ll,
            n_case,
            n_pool,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub alpha: DVector<f64>,
    /// Inverse of `(1/n) Σ p(1-p) d dᵀ` at the solution.
    pub info_inv: DMatrix<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    pub log_likelihood: f64,
    pub n_case: usize,
    pub n_pool: usize,
}

/// Fitted odds `O_{r,a}(x_r, ℓ_a) = exp(αᵀ d(x_r, ℓ_a))`.
#[derive(Debug, Clone)]
pub struct OddsModel {
    pub pair: PatternPair,
    pub design: Design,
    pub alpha: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub n_case: usize,
    pub n_pool: usize,
    info_inv: DMatrix<f64>,
}

impl OddsModel {
    pub fn linear_predictor(&self, rec: &Record) -> Result<f64> {
        Ok(dot(&self.design.row(rec)?, self.alpha.as_slice()))
    }

    pub fn evaluate(&self, rec: &Record) -> Result<f64> {
        Ok(clamp_eta(self.linear_predictor(rec)?).exp())
    }

    /// Odds and design row together.
    pub fn evaluate_with_row(&self, rec: &Record, row: &mut Vec<f64>) -> Result<f64> {
        self.design.fill(rec, row)?;
        Ok(clamp_eta(dot(row, self.alpha.as_slice())).exp())
    }

    pub fn info_inv(&self) -> &DMatrix<f64> {
        &self.info_inv
    }

    /// Influence of `rec` on `α̂`: `Σ⁻¹ [I(case) - (I(case) + I(pool)) p] d`.
    pub fn psi(&self, rec: &Record) -> Result<DVector<f64>> {
        let in_case = rec.pair() == self.pair;
        let in_pool = rec.primary_complete() && rec.r().dominates(&self.pair.r);
        if !in_case && !in_pool {
            return Ok(DVector::zeros(self.alpha.len()));
        }
        let d = DVector::from_vec(self.design.row(rec)?);
        let p = logistic(clamp_eta(d.dot(&self.alpha)));
        let y = if in_case { 1.0 } else { 0.0 };
        Ok(&self.info_inv * d * (y - p))
    }

    /// Row `i` holds `psi` of record `i`.
    pub fn psi_matrix(&self, ds: &Dataset, strata: &StratumIndex) -> Result<DMatrix<f64>> {
        let q = self.alpha.len();
        let mut m = DMatrix::zeros(ds.n(), q);
        for &i in strata.stratum(&self.pair).iter().chain(strata.pool(&self.pair.r)) {
            let psi = self.psi(&ds.records()[i])?;
            for j in 0..q {
                m[(i, j)] = psi[j];
            }
        }
        Ok(m)
    }

    pub fn summary(&self, ds: &Dataset) -> ModelSummary {
        ModelSummary {
            kind: "odds".into(),
            pair: self.pair.to_string(),
            r: self.pair.r.to_string(),
            a: self.pair.a.to_string(),
            coefficients: coefficient_table(&self.design, &self.alpha, ds),
            converged: Some(self.converged),
            iterations: Some(self.iterations),
            score_norm: Some(self.score_norm),
            residual_variance: None,
            n_case: self.n_case,
            n_pool: self.n_pool,
        }
    }
}

fn coefficient_table(design: &Design, coef: &DVector<f64>, ds: &Dataset) -> Vec<Coefficient> {
    design
        .names(ds.x_names(), ds.l_names())
        .into_iter()
        .zip(coef.iter())
        .map(|(name, &value)| Coefficient { name, value })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub value: f64,
}

/// Serializable description of a fitted nuisance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: String,
    pub pair: String,
    pub r: String,
    pub a: String,
    pub coefficients: Vec<Coefficient>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_variance: Option<f64>,
    pub n_case: usize,
    pub n_pool: usize,
}

pub fn fit_odds(
    ds: &Dataset,
    strata: &StratumIndex,
    pair: &PatternPair,
    basis: &Basis,
    opts: &FitOptions,
) -> Result<OddsModel> {
    check_pool(strata, pair, opts.n_min, true)?;
    let design = basis.design(pair);
    let problem = LogisticProblem::for_pair(ds, strata, pair, &design)?;
    let fit = problem.fit(pair, opts)?;
    Ok(OddsModel {
        pair: *pair,
        design,
        alpha: fit.alpha,
        converged: true,
        iterations: fit.iterations,
        score_norm: fit.score_norm,
        n_case: fit.n_case,
        n_pool: fit.n_pool,
        info_inv: fit.info_inv,
    })
}

/// How the outcome model's response relates to `f(L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    /// Regress `f(L)` itself.
    Direct,
    /// `f = Π ℓ_j`: regress the product over `response`, multiply by the
    /// product over `multiplier` (the factors observed in `a`).
    Factorized {
        response: Vec<usize>,
        multiplier: Vec<usize>,
    },
}

impl Response {
    fn for_pair(f: &Functional, pair: &PatternPair, factorize: bool) -> Response {
        match f.product_coords() {
            Some(coords) if factorize => {
                let (multiplier, response) = coords.iter().partition(|&&j| pair.a.get(j));
                Response::Factorized { response, multiplier }
            }
            _ => Response::Direct,
        }
    }

    fn multiplier(&self, rec: &Record) -> Result<f64> {
        match self {
            Response::Direct => Ok(1.0),
            Response::Factorized { multiplier, .. } => multiplier
                .iter()
                .map(|&j| {
                    rec.l()[j]
                        .ok_or_else(|| Error::Precondition(format!("primary coordinate {} is not observed", j + 1)))
                })
                .product(),
        }
    }

    fn target(&self, rec: &Record, f: &Functional) -> Result<f64> {
        match self {
            Response::Direct => f.evaluate_record(rec),
            Response::Factorized { response, .. } => {
                let l = rec
                    .l_complete()
                    .ok_or_else(|| Error::Precondition("outcome response needs a complete primary block".into()))?;
                Ok(response.iter().map(|&j| l[j]).product())
            }
        }
    }
}

/// Fitted outcome regression `m_{r,a}(x_r, ℓ_a) = c(ℓ_a) · βᵀ e(x_r, ℓ_a)`,
/// where `c` is 1 unless the response is factorized.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub pair: PatternPair,
    pub design: Design,
    pub response: Response,
    pub beta: DVector<f64>,
    pub residual_variance: f64,
    pub n_pool: usize,
    functional: Functional,
    bread_inv: DMatrix<f64>,
}

impl OutcomeModel {
    pub fn predict(&self, rec: &Record) -> Result<f64> {
        let e = self.design.row(rec)?;
        Ok(self.response.multiplier(rec)? * dot(&e, self.beta.as_slice()))
    }

    /// Prediction and its gradient in β.
    pub fn predict_with_gradient(&self, rec: &Record) -> Result<(f64, DVector<f64>)> {
        let mult = self.response.multiplier(rec)?;
        let e = DVector::from_vec(self.design.row(rec)?);
        Ok((mult * e.dot(&self.beta), e * mult))
    }

    /// Influence of `rec` on `β̂`: `B⁻¹ I(pool) (y' - βᵀe) e`.
    pub fn psi(&self, rec: &Record) -> Result<DVector<f64>> {
        let in_pool = rec.primary_complete() && rec.r().dominates(&self.pair.r);
        if !in_pool {
            return Ok(DVector::zeros(self.beta.len()));
        }
        let e = DVector::from_vec(self.design.row(rec)?);
        let resid = self.response.target(rec, &self.functional)? - e.dot(&self.beta);
        Ok(&self.bread_inv * e * resid)
    }

    pub fn psi_matrix(&self, ds: &Dataset, strata: &StratumIndex) -> Result<DMatrix<f64>> {
        let q = self.beta.len();
        let mut m = DMatrix::zeros(ds.n(), q);
        for &i in strata.pool(&self.pair.r) {
            let psi = self.psi(&ds.records()[i])?;
            for j in 0..q {
                m[(i, j)] = psi[j];
            }
        }
        Ok(m)
    }

    pub fn bread_inv(&self) -> &DMatrix<f64> {
        &self.bread_inv
    }

    pub fn summary(&self, ds: &Dataset) -> ModelSummary {
        ModelSummary {
            kind: "outcome".into(),
            pair: self.pair.to_string(),
            r: self.pair.r.to_string(),
            a: self.pair.a.to_string(),
            coefficients: coefficient_table(&self.design, &self.beta, ds),
            converged: None,
            iterations: None,
            score_norm: None,
            residual_variance: Some(self.residual_variance),
            n_case: 0,
            n_pool: self.n_pool,
        }
    }
}

/// Least squares via thin QR; errors when the pool design is rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, q) = x.shape();
    if m < q {
        return None;
    }
    let scale = (0..q).map(|j| x.column(j).norm()).fold(0.0, f64::max);
    let qr = x.clone().qr();
    let r = qr.r();
    if scale == 0.0 || (0..q).any(|j| r[(j, j)].abs() <= 1e-10 * scale) {
        return None;
    }
    let qty = qr.q().tr_mul(y);
    r.solve_upper_triangular(&qty)
}

pub fn fit_outcome(
    ds: &Dataset,
    strata: &StratumIndex,
    pair: &PatternPair,
    f: &Functional,
    basis: &Basis,
    opts: &FitOptions,
) -> Result<OutcomeModel> {
    check_pool(strata, pair, opts.n_min, false)?;
    let design = basis.design(pair);
    let response = Response::for_pair(f, pair, opts.factorize_products);
    let pool = strata.pool(&pair.r);
    let q = design.len();
    let mut x = DMatrix::zeros(pool.len(), q);
    let mut y = DVector::zeros(pool.len());
    let mut row = Vec::with_capacity(q);
    for (k, &i) in pool.iter().enumerate() {
        let rec = &ds.records()[i];
        design.fill(rec, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            x[(k, j)] = *v;
        }
        y[k] = response.target(rec, f)?;
    }
    let beta = least_squares(&x, &y).ok_or_else(|| {
        Error::Singular(format!(
            "outcome design for stratum {pair} is rank deficient on its pool"
        ))
    })?;
    let resid = &y - &x * &beta;
    let dof = pool.len().saturating_sub(q).max(1);
    let residual_variance = resid.norm_squared() / dof as f64;
    let bread = x.tr_mul(&x) / ds.n() as f64;
    let bread_inv = bread
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("outcome normal matrix for stratum {pair} is singular")))?;
    Ok(OutcomeModel {
        pair: *pair,
        design,
        response,
        beta,
        residual_variance,
        n_pool: pool.len(),
        functional: f.clone(),
        bread_inv,
    })
}

/// Odds models for every incomplete stratum present in the data.
pub fn fit_all_odds(
    ds: &Dataset,
    strata: &StratumIndex,
    family: &ModelFamily,
    opts: &FitOptions,
) -> Result<BTreeMap<PatternPair, OddsModel>> {
    strata
        .incomplete_pairs()
        .map(|pair| Ok((pair, fit_odds(ds, strata, &pair, family.basis_for(&pair), opts)?)))
        .collect()
}

/// Outcome models for every incomplete stratum present in the data.
pub fn fit_all_outcomes(
    ds: &Dataset,
    strata: &StratumIndex,
    f: &Functional,
    family: &ModelFamily,
    opts: &FitOptions,
) -> Result<BTreeMap<PatternPair, OutcomeModel>> {
    strata
        .incomplete_pairs()
        .map(|pair| Ok((pair, fit_outcome(ds, strata, &pair, f, family.basis_for(&pair), opts)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_strata;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pair(s: &str) -> PatternPair {
        PatternPair::parse(s).unwrap()
    }

    /// One X, one L. Cases have L missing; pool has both observed.
    fn logistic_fixture(n: usize, seed: u64, a0: f64, a1: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let p = logistic(a0 + a1 * x);
                if rng.random::<f64>() < p {
                    Record::new(vec![Some(x)], vec![None]).unwrap()
                } else {
                    let l: f64 = rng.sample::<f64, _>(StandardNormal) + x;
                    Record::new(vec![Some(x)], vec![Some(l)]).unwrap()
                }
            })
            .collect();
        Dataset::from_records(recs).unwrap()
    }

    #[test]
    fn recovers_logistic_coefficients() {
        let ds = logistic_fixture(20000, 1, -0.5, 1.0);
        let strata = build_strata(&ds);
        let m = fit_odds(&ds, &strata, &pair("1,0"), &Basis::Affine, &FitOptions::default()).unwrap();
        assert!((m.alpha[0] + 0.5).abs() < 0.06, "{}", m.alpha);
        assert!((m.alpha[1] - 1.0).abs() < 0.06, "{}", m.alpha);
        assert!(m.score_norm <= 1e-8);
    }

    #[test]
    fn score_matches_finite_differences() {
        let ds = logistic_fixture(500, 2, 0.3, -0.7);
        let strata = build_strata(&ds);
        let p = pair("1,0");
        let prob = LogisticProblem::for_pair(&ds, &strata, &p, &Basis::Quadratic.design(&p)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let alpha = DVector::from_fn(prob.dim(), |_, _| rng.random_range(-1.0..1.0));
            let (score, hess) = prob.score_and_hessian(&alpha);
            for j in 0..prob.dim() {
                let h = 1e-5;
                let mut up = alpha.clone();
                up[j] += h;
                let mut dn = alpha.clone();
                dn[j] -= h;
                let fd = (prob.log_likelihood(&up) - prob.log_likelihood(&dn)) / (2.0 * h);
                let rel = (fd - score[j]).abs() / score[j].abs().max(1e-3);
                assert!(rel <= 1e-6, "score {j}: fd {fd} analytic {}", score[j]);
                let (s_up, _) = prob.score_and_hessian(&up);
                let (s_dn, _) = prob.score_and_hessian(&dn);
                for k in 0..prob.dim() {
                    let fd = (s_up[k] - s_dn[k]) / (2.0 * h);
                    assert!((fd - hess[(k, j)]).abs() <= 1e-6 * hess[(k, j)].abs().max(1e-2));
                }
            }
            assert!((&hess - hess.transpose()).amax() < 1e-14);
            let eig = hess.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e <= 1e-12));
        }
    }

    #[test]
    fn newton_never_decreases_likelihood() {
        let ds = logistic_fixture(300, 4, 1.0, 2.0);
        let strata = build_strata(&ds);
        let p = pair("1,0");
        let prob = LogisticProblem::for_pair(&ds, &strata, &p, &Basis::Affine.design(&p)).unwrap();
        let mut last = f64::NEG_INFINITY;
        for max_iter in 0..8 {
            let opts = FitOptions {
                max_iter,
                ..FitOptions::default()
            };
            let alpha = match prob.fit(&p, &opts) {
                Ok(fit) => fit.alpha,
                Err(Error::NonConvergence { last_iterate, .. }) => DVector::from_vec(last_iterate),
                Err(e) => panic!("{e}"),
            };
            let ll = prob.log_likelihood(&alpha);
            assert!(ll >= last - 1e-14);
            last = ll;
        }
    }

    #[test]
    fn separable_data_is_rejected() {
        let recs = (0..40)
            .map(|i| {
                let x = i as f64 / 10.0;
                if i < 20 {
                    Record::new(vec![Some(x)], vec![None]).unwrap()
                } else {
                    Record::new(vec![Some(x)], vec![Some(1.0)]).unwrap()
                }
            })
            .collect();
        let ds = Dataset::from_records(recs).unwrap();
        let strata = build_strata(&ds);
        let err = fit_odds(&ds, &strata, &pair("1,0"), &Basis::Affine, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err:?}");
    }

    #[test]
    fn small_and_empty_strata() {
        let mut recs: Vec<Record> = (0..5)
            .map(|i| Record::new(vec![Some(i as f64)], vec![None]).unwrap())
            .collect();
        recs.push(Record::new(vec![None], vec![Some(1.0)]).unwrap());
        recs.push(Record::new(vec![None], vec![None]).unwrap());
        let ds = Dataset::from_records(recs).unwrap();
        let strata = build_strata(&ds);
        let err = fit_odds(&ds, &strata, &pair("1,0"), &Basis::Affine, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Positivity { .. }));
        let err = fit_odds(&ds, &strata, &pair("0,0"), &Basis::Affine, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }), "{err:?}");
    }

    #[test]
    fn psi_odds_has_zero_mean() {
        let ds = logistic_fixture(2000, 5, -0.2, 0.8);
        let strata = build_strata(&ds);
        let m = fit_odds(&ds, &strata, &pair("1,0"), &Basis::Affine, &FitOptions::default()).unwrap();
        let psi = m.psi_matrix(&ds, &strata).unwrap();
        let mean = psi.row_mean();
        assert!(mean.amax() <= 1e-8, "{mean}");
    }

    fn ols_fixture(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|i| {
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let l = 2.0 / 3.0 + (x1 + x2) / 3.0 + e;
                let l = if i % 3 == 0 { None } else { Some(l) };
                Record::new(vec![Some(x1), Some(x2)], vec![l]).unwrap()
            })
            .collect();
        Dataset::from_records(recs).unwrap()
    }

    #[test]
    fn ols_residuals_are_orthogonal() {
        let ds = ols_fixture(3000, 6);
        let strata = build_strata(&ds);
        let p = pair("11,0");
        let f = Functional::Coordinate(0);
        for basis in [Basis::Affine, Basis::Quadratic] {
            let m = fit_outcome(&ds, &strata, &p, &f, &basis, &FitOptions::default()).unwrap();
            let mut worst: f64 = 0.0;
            let mut cross = vec![0.0; m.design.len()];
            for &i in strata.pool(&p.r) {
                let rec = &ds.records()[i];
                let resid = f.evaluate_record(rec).unwrap() - m.predict(rec).unwrap();
                for (c, e) in cross.iter_mut().zip(m.design.row(rec).unwrap()) {
                    *c += e * resid;
                }
            }
            for c in cross {
                worst = worst.max(c.abs());
            }
            assert!(worst <= 1e-8 * ds.n() as f64, "{worst}");
            let psi = m.psi_matrix(&ds, &strata).unwrap();
            assert!(psi.row_mean().amax() <= 1e-10);
        }
        let m = fit_outcome(&ds, &strata, &p, &f, &Basis::Affine, &FitOptions::default()).unwrap();
        assert!((m.beta[0] - 2.0 / 3.0).abs() < 0.08);
        assert!((m.beta[1] - 1.0 / 3.0).abs() < 0.08);
        assert!((m.beta[2] - 1.0 / 3.0).abs() < 0.08);
        assert!((m.residual_variance - 1.0).abs() < 0.1);
    }

    #[test]
    fn zero_response_gives_zero_beta() {
        let ds = ols_fixture(100, 7);
        let strata = build_strata(&ds);
        let f = Functional::custom("zero", |_| 0.0);
        let m = fit_outcome(&ds, &strata, &pair("11,0"), &f, &Basis::Affine, &FitOptions::default()).unwrap();
        assert!(m.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rank_deficient_pool_is_singular() {
        let recs = (0..30)
            .map(|i| {
                let l = if i % 2 == 0 { None } else { Some(i as f64) };
                Record::new(vec![Some(1.0), Some(2.0)], vec![l]).unwrap()
            })
            .collect();
        let ds = Dataset::from_records(recs).unwrap();
        let strata = build_strata(&ds);
        let err = fit_outcome(
            &ds,
            &strata,
            &pair("11,0"),
            &Functional::Coordinate(0),
            &Basis::Affine,
            &FitOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn outside_pool_psi_is_zero() {
        let ds = ols_fixture(60, 8);
        let strata = build_strata(&ds);
        let m = fit_outcome(
            &ds,
            &strata,
            &pair("11,0"),
            &Functional::Coordinate(0),
            &Basis::Affine,
            &FitOptions::default(),
        )
        .unwrap();
        let incomplete = ds.records().iter().find(|r| !r.primary_complete()).unwrap();
        assert!(m.psi(incomplete).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_designs() {
        let p = pair("101,01");
        assert_eq!(Basis::Affine.design(&p).len(), 4);
        assert_eq!(Basis::Quadratic.design(&p).len(), 1 + 3 + 6);
        assert_eq!(Basis::InterceptOnly.design(&p).len(), 1);
        let restricted = Basis::Restricted {
            x: vec![0],
            l: vec![],
            quadratic: false,
        };
        assert_eq!(restricted.design(&p).terms()[1], Term(vec![Var::X(0)]));
        let names = Basis::Affine
            .design(&p)
            .names(&["a".into(), "b".into(), "c".into()], &["u".into(), "v".into()]);
        assert_eq!(names, ["(intercept)", "a", "c", "v"]);
    }

    #[test]
    fn factorized_response_splits_product() {
        let f = Functional::Product(vec![0, 1]);
        let r = Response::for_pair(&f, &pair("00,01"), true);
        assert_eq!(
            r,
            Response::Factorized {
                response: vec![0],
                multiplier: vec![1]
            }
        );
        assert_eq!(Response::for_pair(&f, &pair("00,01"), false), Response::Direct);
        assert_eq!(
            Response::for_pair(&Functional::Average(vec![0, 1]), &pair("00,01"), true),
            Response::Direct
        );
    }
}
