//! Likelihood-ratio tests, model-comparison tables and linear contrasts
//! `c'β̂` with containment degrees of freedom.
//!
//! Degrees of freedom: a column constant within every mouse gets
//! `M − q_outer`, any other column gets `N − M − q_inner`; a contrast uses
//! the smallest df among the columns it touches.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::{beta::beta_reg, gamma::gamma_ur};
use thiserror::Error;

use crate::covstruct::StructureKind;
use crate::engine::{information_criteria, FittedModel, Method};
use crate::formula::{ColumnScope, FormulaError, RowBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("contrast `{0}` has no nonzero coefficient")]
    ZeroContrast(String),
    #[error("contrast has {got} entries but the model has {expected} coefficients")]
    LengthMismatch { expected: usize, got: usize },
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("likelihood-ratio tests need ML fits; got {0}")]
    MethodMismatch(Method),
    #[error("model layout does not support this table: {0}")]
    LayoutMismatch(String),
    #[error("group {0} is not a level of the fitted data")]
    UnknownGroup(u32),
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    pub label: String,
    pub c: Vec<f64>,
}

impl Contrast {
    pub fn new(label: impl Into<String>, c: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            c,
        }
    }

    /// Unit vector selecting coefficient `j` of `p`.
    pub fn unit(label: impl Into<String>, p: usize, j: usize) -> Self {
        let mut c = vec![0.0; p];
        c[j] = 1.0;
        Self::new(label, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastResult {
    pub label: String,
    pub week: Option<f64>,
    pub estimate: f64,
    pub se: f64,
    pub df: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t: f64,
    pub p: f64,
}

/// 97.5% quantile of Student's t.
pub fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df is positive")
        .inverse_cdf(0.975)
}

/// Two-sided tail probability `P(|T_df| ≥ |t|)`, floored at the smallest
/// positive double when it underflows.
pub fn two_sided_p(t: f64, df: usize) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let nu = df as f64;
    let p = beta_reg(nu / 2.0, 0.5, nu / (nu + t * t));
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

fn column_df(m: &FittedModel, j: usize) -> usize {
    match m.column_scope[j] {
        ColumnScope::Outer => m.df_outer,
        ColumnScope::Inner => m.df_inner,
    }
}

pub fn contrast(m: &FittedModel, c: &Contrast) -> Result<ContrastResult> {
    let p = m.beta.len();
    if c.c.len() != p {
        return Err(InferenceError::LengthMismatch {
            expected: p,
            got: c.c.len(),
        });
    }
    let active: Vec<usize> = (0..p).filter(|&j| c.c[j] != 0.0).collect();
    if active.is_empty() {
        return Err(InferenceError::ZeroContrast(c.label.clone()));
    }
    let estimate: f64 = active.iter().map(|&j| c.c[j] * m.beta[j]).sum();
    let mut var = 0.0;
    for &i in &active {
        for &j in &active {
            var += c.c[i] * m.cov_beta[(i, j)] * c.c[j];
        }
    }
    let se = var.max(0.0).sqrt();
    let df = active
        .iter()
        .map(|&j| column_df(m, j))
        .min()
        .unwrap_or(0)
        .max(1);
    let half = t_quantile_975(df) * se;
    let t = estimate / se;
    Ok(ContrastResult {
        label: c.label.clone(),
        week: None,
        estimate,
        se,
        df,
        ci_lo: estimate - half,
        ci_hi: estimate + half,
        t,
        p: two_sided_p(t, df),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrtResult {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
    /// Set when either fit sits on the variance boundary.
    pub boundary: bool,
    pub warning: Option<String>,
}

/// Chi-square upper tail.
pub fn chi2_upper(stat: f64, df: usize) -> f64 {
    if df == 0 || stat <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, stat / 2.0)
}

pub fn lrt_from_loglik(reduced: f64, full: f64, df: usize) -> LrtResult {
    let raw = 2.0 * (full - reduced);
    let warning = (raw < -1e-6).then(|| {
        format!("negative likelihood-ratio statistic {raw:.6}: models may not be nested or a fit did not converge")
    });
    let stat = raw.max(0.0);
    LrtResult {
        stat,
        df,
        p: chi2_upper(stat, df),
        boundary: false,
        warning,
    }
}

fn structure_nests(reduced: StructureKind, full: StructureKind) -> bool {
    reduced == full
        || reduced == StructureKind::RandomIntercept
        || (reduced == (StructureKind::RandomInterceptSlope { correlated: false })
            && full == (StructureKind::RandomInterceptSlope { correlated: true }))
}

pub fn lrt(reduced: &FittedModel, full: &FittedModel) -> Result<LrtResult> {
    for m in [reduced, full] {
        if m.spec.method != Method::Ml {
            return Err(InferenceError::MethodMismatch(m.spec.method));
        }
    }
    if reduced.n_obs != full.n_obs || reduced.n_clusters != full.n_clusters {
        return Err(InferenceError::NotNested("fits use different data".into()));
    }
    if full.k < reduced.k {
        return Err(InferenceError::NotNested(format!(
            "full model has fewer parameters ({} < {})",
            full.k, reduced.k
        )));
    }
    if !structure_nests(reduced.spec.structure, full.spec.structure) {
        return Err(InferenceError::NotNested(format!(
            "structure {} is not a restriction of {}",
            reduced.spec.structure, full.spec.structure
        )));
    }
    let mut r = lrt_from_loglik(reduced.loglik, full.loglik, full.k - reduced.k);
    r.boundary = reduced.boundary || full.boundary;
    Ok(r)
}

fn builder(m: &FittedModel) -> Result<RowBuilder> {
    let b = RowBuilder::new(&m.spec.fixed, &m.group_levels)?;
    if b.column_names() != m.column_names.as_slice() {
        return Err(InferenceError::LayoutMismatch(
            "formula does not reproduce the fitted columns".into(),
        ));
    }
    Ok(b)
}

fn check_group(m: &FittedModel, g: u32) -> Result<()> {
    if m.group_levels.contains(&g) {
        Ok(())
    } else {
        Err(InferenceError::UnknownGroup(g))
    }
}

/// Model-based mean of group `g` at week `t`.
pub fn group_mean(m: &FittedModel, g: u32, t: f64) -> Result<ContrastResult> {
    check_group(m, g)?;
    let c = builder(m)?.row(g, t);
    let mut r = contrast(m, &Contrast::new(format!("Group {g}"), c))?;
    r.week = Some(t);
    Ok(r)
}

fn difference(b: &RowBuilder, (g_a, t_a): (u32, f64), (g_b, t_b): (u32, f64)) -> Vec<f64> {
    b.row(g_a, t_a)
        .into_iter()
        .zip(b.row(g_b, t_b))
        .map(|(x, y)| x - y)
        .collect()
}

/// Pairwise group differences at each week: `Group b − Group a` for every
/// `a < b`, ordered by `b` then `a`, weeks ascending within each pair.
pub fn weekly_differences(m: &FittedModel, weeks: &[f64]) -> Result<Vec<ContrastResult>> {
    let b = builder(m)?;
    let levels = &m.group_levels;
    if levels.len() < 2 {
        return Err(InferenceError::LayoutMismatch(
            "need at least two groups".into(),
        ));
    }
    let mut out = Vec::new();
    for (ib, &gb) in levels.iter().enumerate() {
        for &ga in &levels[..ib] {
            let label = format!("Group {gb} - Group {ga}");
            for &t in weeks {
                let c = difference(&b, (gb, t), (ga, t));
                if c.iter().all(|v| *v == 0.0) {
                    return Err(InferenceError::LayoutMismatch(
                        "formula has no group terms".into(),
                    ));
                }
                let mut r = contrast(m, &Contrast::new(label.clone(), c))?;
                r.week = Some(t);
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Mean gain `μ_g(last) − μ_g(first)` per group, then each group's excess
/// gain over every lower-numbered group (only for pairs whose gains differ
/// structurally).
pub fn gains(m: &FittedModel, first: f64, last: f64) -> Result<Vec<ContrastResult>> {
    let b = builder(m)?;
    if !m
        .column_names
        .iter()
        .any(|c| c.split(':').any(|v| v == "tw"))
    {
        return Err(InferenceError::LayoutMismatch(
            "formula has no time term".into(),
        ));
    }
    let mut out = Vec::new();
    let gain = |g: u32| difference(&b, (g, last), (g, first));
    for &g in &m.group_levels {
        out.push(contrast(m, &Contrast::new(format!("Group {g}"), gain(g)))?);
    }
    let levels = &m.group_levels;
    for (ib, &gb) in levels.iter().enumerate() {
        for &ga in &levels[..ib] {
            let c: Vec<f64> = gain(gb).iter().zip(gain(ga)).map(|(x, y)| x - y).collect();
            if c.iter().any(|v| *v != 0.0) {
                out.push(contrast(
                    m,
                    &Contrast::new(format!("Group {gb} - Group {ga}"), c),
                )?);
            }
        }
    }
    Ok(out)
}

/// Coefficient table: one unit contrast per fixed effect.
pub fn coefficient_table(m: &FittedModel) -> Vec<ContrastResult> {
    let p = m.beta.len();
    m.column_names
        .iter()
        .enumerate()
        .filter_map(|(j, name)| contrast(m, &Contrast::unit(name.clone(), p, j)).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
    pub k: usize,
    pub boundary: bool,
}

pub fn compare_table(models: &[FittedModel]) -> Vec<CompareRow> {
    models
        .iter()
        .map(|m| {
            let ic = information_criteria(m);
            CompareRow {
                name: m.spec.name.clone(),
                aic: ic.aic,
                bic: ic.bic,
                loglik: m.loglik,
                k: m.k,
                boundary: m.boundary,
            }
        })
        .collect()
}

/// Probability formatting for tables: `0.00` below 1e-300, scientific below 1e-3.
pub fn format_p(p: f64) -> String {
    if p < 1e-300 {
        "0.00".to_string()
    } else if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.3}")
    }
}

pub const WEEKLY_HEADER: &str =
    "contrast_label,week,Estimate,Std_Error,Lower_95CI,Upper_95CI,p_value";
pub const GAINS_HEADER: &str = "Group,Estimate,Std_Error,Lower_95CI,Upper_95CI";
pub const COMPARE_HEADER: &str = "Model,AIC,BIC,logLik,k";
pub const COEF_HEADER: &str = "Term,Estimate,Std_Error,Lower_95CI,Upper_95CI,p_value";

pub fn weekly_csv(rows: &[ContrastResult]) -> String {
    let mut s = format!("{WEEKLY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{}",
            r.label,
            r.week.unwrap_or(f64::NAN),
            r.estimate,
            r.se,
            r.ci_lo,
            r.ci_hi,
            format_p(r.p)
        );
    }
    s
}

pub fn gains_csv(rows: &[ContrastResult]) -> String {
    let mut s = format!("{GAINS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3}",
            r.label, r.estimate, r.se, r.ci_lo, r.ci_hi
        );
    }
    s
}

pub fn coefficient_csv(rows: &[ContrastResult]) -> String {
    let mut s = format!("{COEF_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3},{}",
            r.label,
            r.estimate,
            r.se,
            r.ci_lo,
            r.ci_hi,
            format_p(r.p)
        );
    }
    s
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{}",
            r.name, r.aic, r.bic, r.loglik, r.k
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covstruct::CovarianceStructure;
    use crate::engine::ModelSpec;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    /// A Model-3 shaped fit with a hand-picked covariance.
    fn model3() -> FittedModel {
        let spec = ModelSpec::preset("m3", StructureKind::RandomIntercept, Method::Ml).unwrap();
        let se = [0.561, 0.025, 0.777, 0.829, 0.044];
        let mut cov = DMatrix::from_diagonal(&DVector::from_iterator(5, se.iter().map(|s| s * s)));
        cov[(0, 1)] = -0.008;
        cov[(1, 0)] = -0.008;
        cov[(3, 4)] = -0.02;
        cov[(4, 3)] = -0.02;
        cov[(2, 3)] = 0.3;
        cov[(3, 2)] = 0.3;
        use ColumnScope::*;
        FittedModel {
            spec,
            column_names: ["(Intercept)", "tw", "grp2", "grp3", "tw:grp3"]
                .map(String::from)
                .to_vec(),
            column_scope: vec![Outer, Inner, Outer, Outer, Inner],
            group_levels: vec![1, 2, 3],
            beta: DVector::from_vec(vec![19.004, 0.337, 14.925, 17.254, 1.738]),
            cov_beta: cov,
            theta: CovarianceStructure::RandomIntercept {
                sd_intercept: 1.72,
                sigma: 1.37,
            },
            loglik: -691.838,
            k: 7,
            n_obs: 372,
            n_clusters: 31,
            df_outer: 28,
            df_inner: 339,
            converged: true,
            boundary: false,
            grad_norm: 0.0,
            evaluations: 0,
        }
    }

    #[test]
    fn t_quantiles() {
        assert_relative_eq!(t_quantile_975(28), 2.048407, epsilon = 1e-5);
        assert_relative_eq!(t_quantile_975(339), 1.966986, epsilon = 1e-5);
    }

    #[test]
    fn p_values() {
        assert_eq!(two_sided_p(0.0, 10), 1.0);
        assert_relative_eq!(two_sided_p(2.048407, 28), 0.05, epsilon = 1e-6);
        assert!(two_sided_p(1e5, 339) > 0.0);
        assert_relative_eq!(chi2_upper(3.841459, 1), 0.05, epsilon = 1e-6);
    }

    #[test]
    fn unit_contrast_uses_outer_df() {
        let m = model3();
        let r = contrast(&m, &Contrast::unit("grp2", 5, 2)).unwrap();
        assert_eq!(r.df, 28);
        assert_relative_eq!(r.estimate, 14.925);
        assert_relative_eq!(r.se, 0.777, epsilon = 1e-12);
        assert_relative_eq!(r.ci_lo, 14.925 - 2.048407 * 0.777, epsilon = 1e-4);
    }

    #[test]
    fn mixed_contrast_takes_min_df() {
        let m = model3();
        let r = contrast(
            &m,
            &Contrast::new("g3-g1 wk1", vec![0.0, 0.0, 0.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(r.df, 28);
        let g = contrast(&m, &Contrast::new("gain", vec![0.0, 11.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(g.df, 339);
    }

    #[test]
    fn contrast_errors() {
        let m = model3();
        assert!(matches!(
            contrast(&m, &Contrast::new("z", vec![0.0; 5])),
            Err(InferenceError::ZeroContrast(_))
        ));
        assert!(matches!(
            contrast(&m, &Contrast::new("short", vec![1.0])),
            Err(InferenceError::LengthMismatch {
                expected: 5,
                got: 1
            })
        ));
    }

    #[test]
    fn scaling_is_linear() {
        let m = model3();
        let a = contrast(&m, &Contrast::unit("b1", 5, 1)).unwrap();
        let b = contrast(&m, &Contrast::new("2b1", vec![0.0, 2.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(b.estimate, 2.0 * a.estimate);
        assert_eq!(b.se, 2.0 * a.se);
        assert_relative_eq!(b.ci_lo, 2.0 * a.ci_lo, epsilon = 1e-12);
        assert_relative_eq!(b.ci_hi, 2.0 * a.ci_hi, epsilon = 1e-12);
        assert_eq!(b.p, a.p);
        assert_eq!(b.t, a.t);
    }

    #[test]
    fn weekly_vectors_match_closed_forms() {
        let m = model3();
        let weeks: Vec<f64> = (1..=12).map(f64::from).collect();
        let rows = weekly_differences(&m, &weeks).unwrap();
        assert_eq!(rows.len(), 36);
        let b = &m.beta;
        for (i, t) in weeks.iter().enumerate() {
            assert_eq!(rows[i].label, "Group 2 - Group 1");
            assert_eq!(rows[i].estimate, b[2]);
            assert_eq!(rows[i].se, rows[0].se);
            assert_relative_eq!(rows[12 + i].estimate, b[3] + t * b[4], epsilon = 1e-12);
            assert_relative_eq!(
                rows[24 + i].estimate,
                b[3] - b[2] + t * b[4],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                rows[12 + i].estimate - rows[24 + i].estimate,
                rows[i].estimate,
                epsilon = 1e-12
            );
        }
        assert_relative_eq!(rows[23].estimate, 38.110, epsilon = 1e-9);
        assert_relative_eq!(rows[24].estimate, 4.067, epsilon = 1e-9);
    }

    #[test]
    fn gains_and_means() {
        let m = model3();
        let g = gains(&m, 1.0, 12.0).unwrap();
        let labels: Vec<&str> = g.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "Group 1",
                "Group 2",
                "Group 3",
                "Group 3 - Group 1",
                "Group 3 - Group 2"
            ]
        );
        assert_relative_eq!(g[0].estimate, 11.0 * 0.337, epsilon = 1e-12);
        assert_eq!(g[1].estimate - g[0].estimate, 0.0);
        assert_relative_eq!(g[2].estimate, 11.0 * (0.337 + 1.738), epsilon = 1e-12);
        assert_relative_eq!(g[3].estimate, 11.0 * 1.738, epsilon = 1e-12);
        assert_relative_eq!(g[0].se, 11.0 * 0.025, epsilon = 1e-12);

        assert_eq!(group_mean(&m, 1, 0.0).unwrap().estimate, 19.004);
        assert_relative_eq!(
            group_mean(&m, 3, 1.0).unwrap().estimate,
            38.333,
            epsilon = 1e-9
        );
        let d5 =
            group_mean(&m, 2, 5.0).unwrap().estimate - group_mean(&m, 1, 5.0).unwrap().estimate;
        let d9 =
            group_mean(&m, 2, 9.0).unwrap().estimate - group_mean(&m, 1, 9.0).unwrap().estimate;
        assert_relative_eq!(d5, d9, epsilon = 1e-12);
        assert_eq!(group_mean(&m, 7, 1.0), Err(InferenceError::UnknownGroup(7)));
    }

    #[test]
    fn lrt_values() {
        let r = lrt_from_loglik(-984.321, -691.838, 1);
        assert_relative_eq!(r.stat, 584.966, epsilon = 1e-9);
        assert!(r.p < 1e-100 && r.p > 0.0);
        let r = lrt_from_loglik(-691.838, -691.730, 1);
        assert_relative_eq!(r.stat, 0.216, epsilon = 1e-9);
        assert!((r.p - 0.642).abs() < 0.005);
        let m = model3();
        let same = lrt(&m, &m).unwrap();
        assert_eq!((same.stat, same.df, same.p), (0.0, 0, 1.0));
        let bad = lrt_from_loglik(-10.0, -11.0, 1);
        assert!(bad.warning.is_some());
        assert_eq!(bad.stat, 0.0);
    }

    #[test]
    fn lrt_rejects_reml_and_non_nested() {
        let m = model3();
        let mut reml = m.clone();
        reml.spec.method = Method::Reml;
        assert_eq!(
            lrt(&m, &reml),
            Err(InferenceError::MethodMismatch(Method::Reml))
        );
        let mut bigger = m.clone();
        bigger.k = 9;
        assert!(matches!(
            lrt(&bigger, &m),
            Err(InferenceError::NotNested(_))
        ));
        let mut ar = m.clone();
        ar.spec.structure = StructureKind::RandomInterceptAr1;
        ar.k = 8;
        let mut hv = m.clone();
        hv.spec.structure = StructureKind::RandomInterceptHeteroVar;
        hv.k = 9;
        assert!(lrt(&m, &ar).is_ok());
        assert!(matches!(lrt(&ar, &hv), Err(InferenceError::NotNested(_))));
    }

    #[test]
    fn table_formats() {
        let m = model3();
        let rows = weekly_differences(&m, &[1.0]).unwrap();
        let csv = weekly_csv(&rows);
        assert!(csv
            .starts_with("contrast_label,week,Estimate,Std_Error,Lower_95CI,Upper_95CI,p_value\n"));
        assert!(csv.contains("Group 2 - Group 1,1.000,14.925,0.777,"));
        assert!(gains_csv(&gains(&m, 1.0, 12.0).unwrap())
            .starts_with("Group,Estimate,Std_Error,Lower_95CI,Upper_95CI\n"));
        let cmp = compare_csv(&compare_table(&[m]));
        assert_eq!(
            cmp,
            "Model,AIC,BIC,logLik,k\nm3,1397.676,1425.108,-691.838,7\n"
        );
        assert_eq!(format_p(1e-320), "0.00");
        assert_eq!(format_p(3.77e-5), "3.77e-5");
        assert_eq!(format_p(0.642), "0.642");
    }
}
