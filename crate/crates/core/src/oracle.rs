//! Synthetic growth data and a dense reference implementation of the
//! mixed-model likelihood.
//!
//! The dense routines assemble the full `N × N` covariance `Z G Z' + R`
//! entrywise from the generative model and factor it once. They share no
//! code with the per-mouse engine beyond the design matrix, which makes
//! them usable as a cross-check.
//!
//! Random streams: mouse `i` (0-based, in layout order) draws from
//! `ChaCha20Rng::seed_from_u64(seed ^ i)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

use crate::covstruct::{CovarianceStructure, GroupRatio, StructureKind};
use crate::dataio::{LongDataset, Record};
use crate::engine::{fit_design, gls_beta, profile_loglik, FitOptions, Method, ModelSpec};
use crate::formula::{build_design, parse_formula, FormulaAst, FormulaError, RowBuilder};
use crate::inference::{contrast, Contrast};

/// Dense routines refuse problems larger than this.
pub const MAX_DENSE_OBS: usize = 2000;
pub const MIN_REPS: usize = 100;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dense oracle limited to {MAX_DENSE_OBS} observations, got {0}")]
    TooLarge(usize),
    #[error("dense covariance is not positive definite")]
    CholeskyFailure,
    #[error("dense information matrix is singular")]
    SingularInformation,
    #[error("beta has {got} entries, design has {expected} columns")]
    BetaLength { expected: usize, got: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("engine and dense oracle disagree beyond {0:e}")]
    Mismatch(f64),
    #[error("coverage needs at least {MIN_REPS} replicates, got {0}")]
    TooFewReps(usize),
    #[error("group {0} has no residual scale")]
    UnknownGroup(u32),
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SimLayout {
    /// `(group label, number of mice)` in generation order.
    pub groups: Vec<(u32, usize)>,
    pub weeks: u32,
    pub seed: u64,
}

impl Default for SimLayout {
    fn default() -> Self {
        Self {
            groups: vec![(1, 10), (2, 10), (3, 11)],
            weeks: 12,
            seed: 1,
        }
    }
}

impl SimLayout {
    pub fn new(groups: Vec<(u32, usize)>, weeks: u32, seed: u64) -> Self {
        Self {
            groups,
            weeks,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weeks < 2 {
            return Err(OracleError::Layout("need at least 2 weeks".into()));
        }
        if self.groups.is_empty() || self.groups.iter().any(|g| g.1 == 0) {
            return Err(OracleError::Layout(
                "every group needs at least one mouse".into(),
            ));
        }
        Ok(())
    }

    pub fn n_mice(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthParams {
    pub formula: FormulaAst,
    pub beta: Vec<f64>,
    pub structure: CovarianceStructure,
}

impl TruthParams {
    /// Model-3 mean structure with a random intercept.
    pub fn model3(beta: [f64; 5], sd_intercept: f64, sigma: f64) -> Self {
        Self {
            formula: parse_formula("weight ~ tw + grp + tw:grp3").expect("formula parses"),
            beta: beta.to_vec(),
            structure: CovarianceStructure::RandomIntercept {
                sd_intercept,
                sigma,
            },
        }
    }

    /// The reported final-model estimates: β = (19.004, 0.337, 14.925,
    /// 17.254, 1.738), σ_b0 = 1.72 g, σ = 1.37 g.
    pub fn reported() -> Self {
        Self::model3([19.004, 0.337, 14.925, 17.254, 1.738], 1.72, 1.37)
    }
}

fn residual_sd(s: &CovarianceStructure, group: u32) -> Result<f64> {
    Ok(match s {
        CovarianceStructure::RandomIntercept { sigma, .. }
        | CovarianceStructure::RandomInterceptSlope { sigma, .. }
        | CovarianceStructure::RandomInterceptAr1 { sigma, .. } => *sigma,
        CovarianceStructure::RandomInterceptHeteroVar {
            sigma,
            reference,
            ratios,
            ..
        } => {
            if group == *reference {
                *sigma
            } else {
                let r: &GroupRatio = ratios
                    .iter()
                    .find(|r| r.group == group)
                    .ok_or(OracleError::UnknownGroup(group))?;
                sigma * r.ratio
            }
        }
    })
}

/// Lower-triangular factor of the random-effects covariance.
fn re_factor(s: &CovarianceStructure) -> DMatrix<f64> {
    match s {
        CovarianceStructure::RandomInterceptSlope { l11, l21, l22, .. } => {
            DMatrix::from_row_slice(2, 2, &[*l11, 0.0, *l21, *l22])
        }
        CovarianceStructure::RandomIntercept { sd_intercept, .. }
        | CovarianceStructure::RandomInterceptAr1 { sd_intercept, .. }
        | CovarianceStructure::RandomInterceptHeteroVar { sd_intercept, .. } => {
            DMatrix::from_element(1, 1, *sd_intercept)
        }
    }
}

fn z_row(s: &CovarianceStructure, t: f64) -> Vec<f64> {
    match s {
        CovarianceStructure::RandomInterceptSlope { .. } => vec![1.0, t],
        _ => vec![1.0],
    }
}

pub fn simulate(truth: &TruthParams, layout: &SimLayout) -> Result<LongDataset> {
    layout.validate()?;
    let levels: Vec<u32> = {
        let mut l: Vec<u32> = layout.groups.iter().map(|g| g.0).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let rows = RowBuilder::new(&truth.formula, &levels)?;
    if rows.column_names().len() != truth.beta.len() {
        return Err(OracleError::BetaLength {
            expected: rows.column_names().len(),
            got: truth.beta.len(),
        });
    }
    let factor = re_factor(&truth.structure);
    let phi = match truth.structure {
        CovarianceStructure::RandomInterceptAr1 { phi, .. } => phi,
        _ => 0.0,
    };
    let width = layout.n_mice().to_string().len().max(2);
    let mut records = Vec::with_capacity(layout.n_mice() * layout.weeks as usize);
    let mut index = 0u64;
    for &(group, count) in &layout.groups {
        let sd = residual_sd(&truth.structure, group)?;
        for _ in 0..count {
            let mut rng = ChaCha20Rng::seed_from_u64(layout.seed ^ index);
            let z: Vec<f64> = (0..factor.nrows())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let b = &factor * DVector::from_vec(z);
            let id = format!("M{:0width$}", index + 1);
            let mut prev: Option<f64> = None;
            for week in 1..=layout.weeks {
                let t = f64::from(week);
                let e: f64 = StandardNormal.sample(&mut rng);
                let eps = match prev {
                    None => sd * e,
                    Some(p) => phi * p + sd * (1.0 - phi * phi).sqrt() * e,
                };
                prev = Some(eps);
                let mean: f64 = rows
                    .row(group, t)
                    .iter()
                    .zip(&truth.beta)
                    .map(|(x, b)| x * b)
                    .sum();
                let re: f64 = z_row(&truth.structure, t)
                    .iter()
                    .zip(b.iter())
                    .map(|(z, b)| z * b)
                    .sum();
                records.push(Record {
                    mouse_id: id.clone(),
                    group,
                    tw: week,
                    weight: mean + re + eps,
                });
            }
            index += 1;
        }
    }
    Ok(LongDataset::from_records(records))
}

struct Dense {
    x: DMatrix<f64>,
    y: DVector<f64>,
    v: DMatrix<f64>,
}

fn dense_system(theta: &CovarianceStructure, d: &LongDataset, ast: &FormulaAst) -> Result<Dense> {
    let n = d.n_obs();
    if n > MAX_DENSE_OBS {
        return Err(OracleError::TooLarge(n));
    }
    let ds = build_design(ast, d)?;
    let (x, y) = ds.pooled();
    let recs: Vec<&Record> = d.by_mouse().into_iter().flatten().collect();
    let g = {
        let l = re_factor(theta);
        &l * l.transpose()
    };
    let phi = match theta {
        CovarianceStructure::RandomInterceptAr1 { phi, .. } => *phi,
        _ => 0.0,
    };
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (recs[i], recs[j]);
            if a.mouse_id != b.mouse_id {
                continue;
            }
            let (ta, tb) = (f64::from(a.tw), f64::from(b.tw));
            let za = z_row(theta, ta);
            let zb = z_row(theta, tb);
            let mut re = 0.0;
            for (p, zp) in za.iter().enumerate() {
                for (q, zq) in zb.iter().enumerate() {
                    re += zp * g[(p, q)] * zq;
                }
            }
            let lag = (ta - tb).abs();
            let corr = if lag == 0.0 { 1.0 } else { phi.powf(lag) };
            let resid = residual_sd(theta, a.group)? * residual_sd(theta, b.group)? * corr;
            v[(i, j)] = re + resid;
        }
    }
    Ok(Dense { x, y, v })
}

/// Joint Gaussian log-density of all records at `truth.beta`; with REML the
/// restricted criterion `… − ½ log|X'V⁻¹X| + (p/2) log 2π`.
pub fn dense_loglik(truth: &TruthParams, d: &LongDataset, method: Method) -> Result<f64> {
    let sys = dense_system(&truth.structure, d, &truth.formula)?;
    let p = sys.x.ncols();
    if truth.beta.len() != p {
        return Err(OracleError::BetaLength {
            expected: p,
            got: truth.beta.len(),
        });
    }
    let n = sys.y.len() as f64;
    let chol = sys.v.cholesky().ok_or(OracleError::CholeskyFailure)?;
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let r = &sys.y - &sys.x * DVector::from_column_slice(&truth.beta);
    let quad = r.dot(&chol.solve(&r));
    let ml = -0.5 * (n * LN_2PI + logdet + quad);
    Ok(match method {
        Method::Ml => ml,
        Method::Reml => {
            let info = sys.x.transpose() * chol.solve(&sys.x);
            let logdet_info = info.determinant().ln();
            if !logdet_info.is_finite() {
                return Err(OracleError::SingularInformation);
            }
            ml - 0.5 * logdet_info + 0.5 * p as f64 * LN_2PI
        }
    })
}

/// GLS through one factorisation of the full covariance.
pub fn dense_gls(
    theta: &CovarianceStructure,
    d: &LongDataset,
    ast: &FormulaAst,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sys = dense_system(theta, d, ast)?;
    let chol = sys.v.cholesky().ok_or(OracleError::CholeskyFailure)?;
    let vinv_x = chol.solve(&sys.x);
    let info = sys.x.transpose() * &vinv_x;
    let cov = info.try_inverse().ok_or(OracleError::SingularInformation)?;
    let beta = &cov * (vinv_x.transpose() * &sys.y);
    Ok((beta, cov))
}

/// `E[b | y] = G Z' V⁻¹ (y − Xβ)` over all mice at once, returned per mouse
/// in mouse-id order.
pub fn dense_conditional_effects(truth: &TruthParams, d: &LongDataset) -> Result<Vec<Vec<f64>>> {
    let sys = dense_system(&truth.structure, d, &truth.formula)?;
    let mice = d.by_mouse();
    let l = re_factor(&truth.structure);
    let g = &l * l.transpose();
    let q = g.nrows();
    let n = sys.y.len();
    let mut z = DMatrix::zeros(n, q * mice.len());
    let mut row = 0;
    for (m, recs) in mice.iter().enumerate() {
        for r in *recs {
            for (k, v) in z_row(&truth.structure, f64::from(r.tw))
                .into_iter()
                .enumerate()
            {
                z[(row, m * q + k)] = v;
            }
            row += 1;
        }
    }
    let mut big_g = DMatrix::zeros(q * mice.len(), q * mice.len());
    for m in 0..mice.len() {
        big_g.view_mut((m * q, m * q), (q, q)).copy_from(&g);
    }
    let chol = sys.v.cholesky().ok_or(OracleError::CholeskyFailure)?;
    let r = &sys.y - &sys.x * DVector::from_column_slice(&truth.beta);
    let b = big_g * z.transpose() * chol.solve(&r);
    Ok((0..mice.len())
        .map(|m| b.rows(m * q, q).iter().copied().collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub label: String,
    pub truth: f64,
    pub hits: usize,
    pub completed: usize,
    pub failures: usize,
}

impl CoverageRow {
    pub fn coverage(&self) -> f64 {
        if self.completed == 0 {
            f64::NAN
        } else {
            self.hits as f64 / self.completed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    pub reps: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("contrast,truth,coverage,hits,completed,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.4},{},{},{}",
                r.label,
                r.truth,
                r.coverage(),
                r.hits,
                r.completed,
                r.failures
            );
        }
        s
    }
}

/// Contrasts tracked by the default coverage run: the group-2 offset and
/// the group-3 minus group-1 gain between the first and last week.
pub fn default_coverage_contrasts(truth: &TruthParams, weeks: u32) -> Result<Vec<Contrast>> {
    let rows = RowBuilder::new(&truth.formula, &[1, 2, 3])?;
    let names = rows.column_names();
    let mut out = Vec::new();
    if let Some(j) = names.iter().position(|c| c == "grp2") {
        out.push(Contrast::unit("grp2", names.len(), j));
    }
    let last = f64::from(weeks);
    let gain = |g: u32| -> Vec<f64> {
        rows.row(g, last)
            .into_iter()
            .zip(rows.row(g, 1.0))
            .map(|(a, b)| a - b)
            .collect()
    };
    let c: Vec<f64> = gain(3).iter().zip(gain(1)).map(|(a, b)| a - b).collect();
    if c.iter().any(|v| *v != 0.0) {
        out.push(Contrast::new("gain3-gain1", c));
    }
    Ok(out)
}

/// Per-replicate seed; replicate order fixes the result regardless of
/// scheduling.
pub fn replicate_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn one_replicate(
    truth: &TruthParams,
    layout: &SimLayout,
    spec: &ModelSpec,
    contrasts: &[Contrast],
    rep: usize,
) -> Option<Vec<bool>> {
    let lay = SimLayout {
        seed: replicate_seed(layout.seed, rep),
        ..layout.clone()
    };
    let d = simulate(truth, &lay).ok()?;
    let ds = build_design(&spec.fixed, &d).ok()?;
    let m = fit_design(spec, &ds, &FitOptions::default()).ok()?;
    contrasts
        .iter()
        .map(|c| {
            let target: f64 = c.c.iter().zip(&truth.beta).map(|(a, b)| a * b).sum();
            contrast(&m, c)
                .ok()
                .map(|r| r.ci_lo <= target && target <= r.ci_hi)
        })
        .collect()
}

/// Simulate → fit → contrast, `reps` times; empirical 95% CI coverage per
/// contrast. Failed replicates are counted, not fatal.
pub fn coverage_experiment(
    truth: &TruthParams,
    layout: &SimLayout,
    spec: &ModelSpec,
    contrasts: &[Contrast],
    reps: usize,
) -> Result<CoverageTable> {
    if reps < MIN_REPS {
        return Err(OracleError::TooFewReps(reps));
    }
    layout.validate()?;
    let run = |rep: usize| one_replicate(truth, layout, spec, contrasts, rep);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Option<Vec<bool>>> = {
        use rayon::prelude::*;
        (0..reps).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Option<Vec<bool>>> = (0..reps).map(run).collect();

    let mut rows: Vec<CoverageRow> = contrasts
        .iter()
        .map(|c| CoverageRow {
            label: c.label.clone(),
            truth: c.c.iter().zip(&truth.beta).map(|(a, b)| a * b).sum(),
            hits: 0,
            completed: 0,
            failures: 0,
        })
        .collect();
    for o in outcomes {
        match o {
            Some(hits) => {
                for (row, hit) in rows.iter_mut().zip(hits) {
                    row.completed += 1;
                    row.hits += usize::from(hit);
                }
            }
            None => rows.iter_mut().for_each(|r| r.failures += 1),
        }
    }
    Ok(CoverageTable { reps, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceRow {
    pub structure: StructureKind,
    pub draws: usize,
    pub max_loglik_diff: f64,
    pub max_beta_rel_diff: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub rows: Vec<EquivalenceRow>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| {
            r.errors == 0
                && r.max_loglik_diff < self.tolerance
                && r.max_beta_rel_diff < self.tolerance
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("structure,draws,max_loglik_diff,max_beta_rel_diff,errors\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.3e},{:.3e},{}",
                r.structure, r.draws, r.max_loglik_diff, r.max_beta_rel_diff, r.errors
            );
        }
        s
    }
}

/// Per-mouse engine against the dense oracle: `draws` random interior θ per
/// structure (unconstrained coordinates uniform on [−1, 1]), each on its own
/// 5-mouse × 4-week simulated dataset, under both ML and REML.
pub fn equivalence_check(seed: u64, draws: usize, tolerance: f64) -> EquivalenceReport {
    let kinds = [
        StructureKind::RandomIntercept,
        StructureKind::RandomInterceptSlope { correlated: true },
        StructureKind::RandomInterceptSlope { correlated: false },
        StructureKind::RandomInterceptAr1,
        StructureKind::RandomInterceptHeteroVar,
    ];
    let levels = [1u32, 2, 3];
    let coord = Uniform::new(-1.0, 1.0).expect("valid range");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut dataset = 0usize;
    for kind in kinds {
        let mut row = EquivalenceRow {
            structure: kind,
            draws,
            max_loglik_diff: 0.0,
            max_beta_rel_diff: 0.0,
            errors: 0,
        };
        for _ in 0..draws {
            dataset += 1;
            let u: Vec<f64> = (0..kind.n_params(levels.len()))
                .map(|_| coord.sample(&mut rng))
                .collect();
            let check = || -> std::result::Result<(f64, f64), String> {
                let theta = CovarianceStructure::from_unconstrained(kind, &levels, &u)
                    .map_err(|e| e.to_string())?;
                let truth = TruthParams {
                    structure: theta.clone(),
                    ..TruthParams::reported()
                };
                let layout = SimLayout::new(
                    vec![(1, 2), (2, 2), (3, 1)],
                    4,
                    replicate_seed(seed, dataset),
                );
                let d = simulate(&truth, &layout).map_err(|e| e.to_string())?;
                let ds = build_design(&truth.formula, &d).map_err(|e| e.to_string())?;
                let (beta, _) = gls_beta(&theta, &ds).map_err(|e| e.to_string())?;
                let (dense_beta, _) =
                    dense_gls(&theta, &d, &truth.formula).map_err(|e| e.to_string())?;
                let rel = (&beta - &dense_beta).norm() / dense_beta.norm().max(f64::MIN_POSITIVE);
                let at_hat = TruthParams {
                    beta: beta.iter().copied().collect(),
                    ..truth
                };
                let mut worst: f64 = 0.0;
                for method in [Method::Ml, Method::Reml] {
                    let a = profile_loglik(&theta, &ds, method).map_err(|e| e.to_string())?;
                    let b = dense_loglik(&at_hat, &d, method).map_err(|e| e.to_string())?;
                    worst = worst.max((a - b).abs());
                }
                Ok((worst, rel))
            };
            match check() {
                Ok((ll, rel)) => {
                    row.max_loglik_diff = row.max_loglik_diff.max(ll);
                    row.max_beta_rel_diff = row.max_beta_rel_diff.max(rel);
                }
                Err(_) => row.errors += 1,
            }
        }
        rows.push(row);
    }
    EquivalenceReport { tolerance, rows }
}
