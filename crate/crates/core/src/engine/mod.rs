//! Profiled ML/REML estimation of linear mixed models.
//!
//! For fixed variance parameters θ the fixed effects have the closed-form
//! GLS solution `β̂(θ) = (Σ X_i'V_i⁻¹X_i)⁻¹ Σ X_i'V_i⁻¹y_i`, so the optimiser
//! only searches over θ. Every `V_i` is handled through its Cholesky factor.

pub mod optim;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::covstruct::{CovError, CovarianceStructure, StructureKind};
use crate::dataio::LongDataset;
use crate::formula::{
    build_design, parse_formula, ColumnScope, DesignSet, FormulaAst, FormulaError,
};
use optim::{minimize, OptimOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// SD estimates below this fraction of the response SD count as boundary.
const BOUNDARY_FRACTION: f64 = 1e-4;
const BOUNDARY_PHI: f64 = 0.999;
/// Value an SD is pinned at after a boundary estimate.
const BOUNDARY_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Design(#[from] FormulaError),
    #[error(transparent)]
    Covariance(#[from] CovError),
    #[error("marginal covariance of mouse `{0}` is not positive definite")]
    CholeskyFailure(String),
    #[error("GLS information matrix is singular")]
    SingularInformation,
    #[error("optimizer did not converge (best logLik {loglik}, gradient norm {grad_norm:.3e})")]
    NonConvergence {
        loglik: f64,
        grad_norm: f64,
        theta: Box<CovarianceStructure>,
    },
    #[error("{n} observations cannot support {k} parameters")]
    TooFewObservations { n: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "REML")]
    Reml,
}

impl Method {
    pub fn from_token(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Some(Self::Ml),
            "reml" => Some(Self::Reml),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        })
    }
}

/// Formulas of the three candidate mean structures.
pub const MODEL_FORMULAS: [(&str, &str); 3] = [
    ("m1", "weight ~ tw + grp"),
    ("m2", "weight ~ tw * grp"),
    ("m3", "weight ~ tw + grp + tw:grp3"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub fixed: FormulaAst,
    pub structure: StructureKind,
    pub method: Method,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        fixed: FormulaAst,
        structure: StructureKind,
        method: Method,
    ) -> Self {
        Self {
            name: name.into(),
            fixed,
            structure,
            method,
        }
    }

    /// One of `m1`, `m2`, `m3`.
    pub fn preset(token: &str, structure: StructureKind, method: Method) -> Option<Self> {
        let (_, text) = MODEL_FORMULAS.iter().find(|(t, _)| *t == token)?;
        let fixed = parse_formula(text).expect("preset formulas parse");
        Some(Self::new(token, fixed, structure, method))
    }
}

struct GlsParts {
    beta: DVector<f64>,
    /// `Σ X_i'V_i⁻¹X_i`
    information: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet_v: f64,
    quad: f64,
}

fn gls_parts(theta: &CovarianceStructure, ds: &DesignSet) -> Result<GlsParts> {
    let p = ds.n_cols();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut logdet_v = 0.0;
    let mut whitened = Vec::with_capacity(ds.n_clusters());
    for c in &ds.clusters {
        let v = theta.marginal_cov(&c.t, c.group)?;
        let chol = v
            .cholesky()
            .ok_or_else(|| EngineError::CholeskyFailure(c.mouse_id.clone()))?;
        let l = chol.l_dirty();
        logdet_v += 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let w = l
            .solve_lower_triangular(&c.x)
            .ok_or_else(|| EngineError::CholeskyFailure(c.mouse_id.clone()))?;
        let z = l
            .solve_lower_triangular(&c.y)
            .ok_or_else(|| EngineError::CholeskyFailure(c.mouse_id.clone()))?;
        xtx += w.tr_mul(&w);
        xty += w.tr_mul(&z);
        whitened.push((w, z));
    }
    let information = xtx.cholesky().ok_or(EngineError::SingularInformation)?;
    let beta = information.solve(&xty);
    let quad = whitened
        .iter()
        .map(|(w, z)| (z - w * &beta).norm_squared())
        .sum();
    if !logdet_v.is_finite() {
        return Err(EngineError::SingularInformation);
    }
    Ok(GlsParts {
        beta,
        information,
        logdet_v,
        quad,
    })
}

/// GLS fixed effects and their covariance `(Σ X_i'V_i⁻¹X_i)⁻¹` at `theta`.
pub fn gls_beta(
    theta: &CovarianceStructure,
    ds: &DesignSet,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let parts = gls_parts(theta, ds)?;
    Ok((parts.beta, parts.information.inverse()))
}

/// Log-likelihood with β profiled out, accumulated over mice in id order.
pub fn profile_loglik(theta: &CovarianceStructure, ds: &DesignSet, method: Method) -> Result<f64> {
    let parts = gls_parts(theta, ds)?;
    let n = ds.n_obs() as f64;
    let ml = -0.5 * (n * LN_2PI + parts.logdet_v + parts.quad);
    Ok(match method {
        Method::Ml => ml,
        Method::Reml => {
            let p = ds.n_cols() as f64;
            let logdet_a = 2.0
                * parts
                    .information
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            ml - 0.5 * logdet_a + 0.5 * p * LN_2PI
        }
    })
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Extra starting points; the fit never ends below the best of them.
    pub starts: Vec<CovarianceStructure>,
    /// Skip the moment-based default start (used for warm restarts).
    pub skip_default_start: bool,
    pub optim: OptimOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub column_names: Vec<String>,
    pub column_scope: Vec<ColumnScope>,
    pub group_levels: Vec<u32>,
    pub beta: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub theta: CovarianceStructure,
    pub loglik: f64,
    pub k: usize,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub df_outer: usize,
    pub df_inner: usize,
    pub converged: bool,
    pub boundary: bool,
    pub grad_norm: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
}

/// `AIC = −2ℓ + 2k`, `BIC = −2ℓ + k log N`.
pub fn information_criteria_from(loglik: f64, k: usize, n_obs: usize) -> InformationCriteria {
    let k = k as f64;
    InformationCriteria {
        aic: -2.0 * loglik + 2.0 * k,
        bic: -2.0 * loglik + k * (n_obs as f64).ln(),
    }
}

pub fn information_criteria(m: &FittedModel) -> InformationCriteria {
    information_criteria_from(m.loglik, m.k, m.n_obs)
}

impl FittedModel {
    pub fn se(&self) -> Vec<f64> {
        self.cov_beta
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .map(|j| self.beta[j])
    }

    pub fn to_json(&self) -> Value {
        let named = |v: &[f64]| -> Value {
            let mut m = Map::new();
            for (n, x) in self.column_names.iter().zip(v) {
                m.insert(n.clone(), json!(x));
            }
            Value::Object(m)
        };
        let beta: Vec<f64> = self.beta.iter().copied().collect();
        let cov: Vec<Vec<f64>> = (0..self.cov_beta.nrows())
            .map(|i| self.cov_beta.row(i).iter().copied().collect())
            .collect();
        let ic = information_criteria(self);
        json!({
            "model": self.spec.name,
            "formula": self.spec.fixed.to_string(),
            "structure": self.spec.structure.token(),
            "method": self.spec.method.to_string(),
            "beta": named(&beta),
            "se": named(&self.se()),
            "cov_beta": cov,
            "theta": serde_json::to_value(&self.theta).unwrap_or(Value::Null),
            "loglik": self.loglik,
            "aic": ic.aic,
            "bic": ic.bic,
            "k": self.k,
            "N": self.n_obs,
            "M": self.n_clusters,
            "df_outer": self.df_outer,
            "df_inner": self.df_inner,
            "converged": self.converged,
            "boundary": self.boundary,
        })
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    x.clone().svd(true, true).solve(y, 1e-12).ok()
}

/// Moment-based starting values: residual SD from per-mouse linear detrending
/// of pooled OLS residuals, intercept SD from the spread of per-mouse mean
/// residuals.
pub fn initial_theta(kind: StructureKind, ds: &DesignSet) -> CovarianceStructure {
    let (x, y) = ds.pooled();
    let resid = least_squares(&x, &y).map_or_else(|| y.clone(), |b| &y - &x * b);
    let mut ssr = 0.0;
    let mut df = 0usize;
    let mut means = Vec::with_capacity(ds.n_clusters());
    let mut offset = 0;
    for c in &ds.clusters {
        let n = c.len();
        let r = resid.rows(offset, n).into_owned();
        offset += n;
        means.push(r.mean());
        let q = if n >= 3 { 2 } else { 1 };
        if n > q {
            let z = DMatrix::from_fn(n, q, |i, j| if j == 0 { 1.0 } else { c.t[i] });
            if let Some(b) = least_squares(&z, &r) {
                ssr += (&r - &z * b).norm_squared();
                df += n - q;
            }
        }
    }
    let resp_sd = sample_sd(y.as_slice()).max(1e-8);
    let sigma = if df > 0 && ssr > 0.0 {
        (ssr / df as f64).sqrt()
    } else {
        sample_sd(resid.as_slice()).max(1e-3 * resp_sd)
    };
    let n_bar = ds.n_obs() as f64 / ds.n_clusters().max(1) as f64;
    let between = sample_sd(&means).powi(2) - sigma * sigma / n_bar;
    let sd_intercept = between.max(0.01 * sigma * sigma).sqrt();
    CovarianceStructure::embed_intercept(
        kind,
        &ds.group_levels,
        sd_intercept,
        sigma,
        0.1 * sd_intercept,
    )
}

fn perturb_boundary(s: &CovarianceStructure, floor: f64) -> CovarianceStructure {
    let bump = |v: f64| if v > 0.0 { v } else { floor };
    match s.clone() {
        CovarianceStructure::RandomIntercept {
            sd_intercept,
            sigma,
        } => CovarianceStructure::RandomIntercept {
            sd_intercept: bump(sd_intercept),
            sigma: bump(sigma),
        },
        CovarianceStructure::RandomInterceptSlope {
            l11,
            l21,
            l22,
            sigma,
            correlated,
        } => CovarianceStructure::RandomInterceptSlope {
            l11: bump(l11),
            l21,
            l22: bump(l22),
            sigma: bump(sigma),
            correlated,
        },
        CovarianceStructure::RandomInterceptAr1 {
            sd_intercept,
            sigma,
            phi,
        } => CovarianceStructure::RandomInterceptAr1 {
            sd_intercept: bump(sd_intercept),
            sigma: bump(sigma),
            phi: phi.clamp(-0.999_999, 0.999_999),
        },
        CovarianceStructure::RandomInterceptHeteroVar {
            sd_intercept,
            sigma,
            reference,
            mut ratios,
        } => {
            for r in &mut ratios {
                r.ratio = bump(r.ratio);
            }
            CovarianceStructure::RandomInterceptHeteroVar {
                sd_intercept: bump(sd_intercept),
                sigma: bump(sigma),
                reference,
                ratios,
            }
        }
    }
}

struct Search<'a> {
    ds: &'a DesignSet,
    kind: StructureKind,
    method: Method,
}

impl Search<'_> {
    fn theta(&self, u: &[f64]) -> Option<CovarianceStructure> {
        CovarianceStructure::from_unconstrained(self.kind, &self.ds.group_levels, u).ok()
    }

    fn objective(&self, u: &[f64]) -> f64 {
        self.theta(u)
            .and_then(|t| profile_loglik(&t, self.ds, self.method).ok())
            .map_or(f64::INFINITY, |l| -l)
    }

    /// Minimises over the coordinates not listed in `fixed`.
    fn run(
        &self,
        start: &[f64],
        fixed: &[(usize, f64)],
        opts: &OptimOptions,
    ) -> (Vec<f64>, f64, bool, f64, usize) {
        let free: Vec<usize> = (0..start.len())
            .filter(|i| !fixed.iter().any(|f| f.0 == *i))
            .collect();
        let assemble = |z: &[f64]| {
            let mut u = start.to_vec();
            for (&i, &v) in free.iter().zip(z) {
                u[i] = v;
            }
            for &(i, v) in fixed {
                u[i] = v;
            }
            u
        };
        let z0: Vec<f64> = free.iter().map(|&i| start[i]).collect();
        let r = minimize(|z| self.objective(&assemble(z)), &z0, opts);
        (
            assemble(&r.x),
            r.f,
            r.simplex_converged,
            r.grad_norm,
            r.evals,
        )
    }
}

pub fn fit(spec: &ModelSpec, d: &LongDataset) -> Result<FittedModel> {
    let ds = build_design(&spec.fixed, d)?;
    fit_design(spec, &ds, &FitOptions::default())
}

/// Maximises the profiled criterion of `spec.method` over θ.
pub fn fit_design(spec: &ModelSpec, ds: &DesignSet, opts: &FitOptions) -> Result<FittedModel> {
    let p = ds.n_cols();
    let n_var = spec.structure.n_params(ds.group_levels.len());
    let k = p + n_var;
    let n = ds.n_obs();
    if n <= k {
        return Err(EngineError::TooFewObservations { n, k });
    }
    let (_, y) = ds.pooled();
    let resp_sd = sample_sd(y.as_slice()).max(f64::MIN_POSITIVE);
    let search = Search {
        ds,
        kind: spec.structure,
        method: spec.method,
    };

    let mut starts = Vec::new();
    if !opts.skip_default_start {
        starts.push(initial_theta(spec.structure, ds));
    }
    for s in &opts.starts {
        if s.kind() != spec.structure {
            return Err(CovError::InvalidParam {
                name: "start structure",
                value: f64::NAN,
            }
            .into());
        }
        starts.push(perturb_boundary(s, BOUNDARY_CLAMP));
    }
    if starts.is_empty() {
        starts.push(initial_theta(spec.structure, ds));
    }

    let mut best: Option<(Vec<f64>, f64, bool, f64, usize)> = None;
    let mut evaluations = 0;
    for s in &starts {
        let u0 = s.to_unconstrained()?;
        let r = search.run(&u0, &[], &opts.optim);
        evaluations += r.4;
        if best.as_ref().is_none_or(|b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (mut u, mut f, mut simplex_ok, mut grad_norm, _) = best.expect("at least one start");
    if !f.is_finite() {
        return Err(EngineError::CholeskyFailure("all starting points".into()));
    }

    let theta = search
        .theta(&u)
        .expect("optimizer returns finite coordinates");
    let low: Vec<(usize, f64)> = theta
        .sd_components()
        .into_iter()
        .filter(|c| c.2 < BOUNDARY_FRACTION * resp_sd)
        .map(|c| (c.1, BOUNDARY_CLAMP.ln()))
        .collect();
    let phi_edge = matches!(theta, CovarianceStructure::RandomInterceptAr1 { phi, .. } if phi.abs() > BOUNDARY_PHI);
    let boundary = !low.is_empty() || phi_edge;
    if !low.is_empty() {
        let r = search.run(&u, &low, &opts.optim);
        evaluations += r.4;
        if r.1.is_finite() {
            (u, f, simplex_ok, grad_norm) = (r.0, r.1, r.2, r.3);
        }
    }

    let theta = search
        .theta(&u)
        .expect("optimizer returns finite coordinates");
    let converged = simplex_ok || grad_norm < 1e-3;
    if !converged && grad_norm > 1e-2 && !boundary {
        return Err(EngineError::NonConvergence {
            loglik: -f,
            grad_norm,
            theta: Box::new(theta),
        });
    }
    let parts = gls_parts(&theta, ds)?;
    let loglik = profile_loglik(&theta, ds, spec.method)?;
    let q_outer = ds
        .column_scope
        .iter()
        .filter(|s| **s == ColumnScope::Outer)
        .count();
    let q_inner = p - q_outer;
    let m = ds.n_clusters();
    Ok(FittedModel {
        spec: spec.clone(),
        column_names: ds.column_names.clone(),
        column_scope: ds.column_scope.clone(),
        group_levels: ds.group_levels.clone(),
        beta: parts.beta,
        cov_beta: parts.information.inverse(),
        theta,
        loglik,
        k,
        n_obs: n,
        n_clusters: m,
        df_outer: m.saturating_sub(q_outer),
        df_inner: n.saturating_sub(m + q_inner),
        converged,
        boundary,
        grad_norm,
        evaluations,
    })
}

/// Refits `m` by REML, warm-started at its variance estimates.
pub fn refit_reml(m: &FittedModel, ds: &DesignSet) -> Result<FittedModel> {
    let spec = ModelSpec {
        method: Method::Reml,
        ..m.spec.clone()
    };
    let opts = FitOptions {
        starts: vec![m.theta.clone()],
        skip_default_start: true,
        ..FitOptions::default()
    };
    fit_design(&spec, ds, &opts)
}
