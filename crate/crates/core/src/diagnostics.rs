//! Residuals, empirical Bayes random effects and Q–Q coordinates, emitted
//! as plot-ready tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::covstruct::{CovError, CovarianceStructure};
use crate::engine::FittedModel;
use crate::formula::DesignSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("marginal covariance of mouse `{0}` is not positive definite")]
    CholeskyFailure(String),
    #[error("need at least 2 values for a Q-Q plot, got {0}")]
    TooFew(usize),
    #[error("design has {design} columns but the fit has {fit}")]
    DesignMismatch { design: usize, fit: usize },
    #[error(transparent)]
    Covariance(#[from] CovError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RanefRow {
    pub mouse_id: String,
    pub group: u32,
    pub effects: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsTable {
    /// `b0`, plus `b1` (per-week slope) for slope models.
    pub names: Vec<String>,
    pub rows: Vec<RanefRow>,
}

impl RandomEffectsTable {
    pub fn intercepts(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.effects[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("mouse_id,group,{}\n", self.names.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.effects.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{},{},{}", r.mouse_id, r.group, vals.join(","));
        }
        s
    }
}

fn check_design(m: &FittedModel, ds: &DesignSet) -> Result<()> {
    if ds.n_cols() != m.beta.len() {
        return Err(DiagnosticsError::DesignMismatch {
            design: ds.n_cols(),
            fit: m.beta.len(),
        });
    }
    Ok(())
}

fn cluster_blup(
    theta: &CovarianceStructure,
    t: &[f64],
    group: u32,
    resid: &DVector<f64>,
    mouse: &str,
) -> Result<DVector<f64>> {
    let v = theta.marginal_cov(t, group)?;
    let chol = v
        .cholesky()
        .ok_or_else(|| DiagnosticsError::CholeskyFailure(mouse.to_string()))?;
    let z = theta.re_design(t);
    Ok(theta.re_cov() * z.tr_mul(&chol.solve(resid)))
}

/// `b̂_i = D Z_i' V_i⁻¹ (y_i − X_i β̂)` for every mouse.
pub fn blups(m: &FittedModel, ds: &DesignSet) -> Result<RandomEffectsTable> {
    check_design(m, ds)?;
    let q = m.theta.re_cov().nrows();
    let names = if q == 2 {
        vec!["b0".to_string(), "b1".to_string()]
    } else {
        vec!["b0".to_string()]
    };
    let rows = ds
        .clusters
        .iter()
        .map(|c| {
            let r = &c.y - &c.x * &m.beta;
            let b = cluster_blup(&m.theta, &c.t, c.group, &r, &c.mouse_id)?;
            Ok(RanefRow {
                mouse_id: c.mouse_id.clone(),
                group: c.group,
                effects: b.iter().copied().collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RandomEffectsTable { names, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub mouse_id: String,
    pub group: u32,
    pub tw: f64,
    pub observed: f64,
    pub fitted_marginal: f64,
    pub fitted_conditional: f64,
    pub resid_marginal: f64,
    pub resid_conditional: f64,
    pub resid_pearson: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsTable {
    pub rows: Vec<DiagRow>,
}

impl DiagnosticsTable {
    pub fn pearson(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.resid_pearson).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mouse_id,group,tw,observed,fitted_marginal,fitted_conditional,resid_marginal,resid_conditional,resid_pearson\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.mouse_id,
                r.group,
                r.tw,
                r.observed,
                r.fitted_marginal,
                r.fitted_conditional,
                r.resid_marginal,
                r.resid_conditional,
                r.resid_pearson
            );
        }
        s
    }
}

/// Marginal and conditional residuals; Pearson residuals are conditional
/// residuals over the residual SD of the observation's group.
pub fn residual_table(m: &FittedModel, ds: &DesignSet) -> Result<DiagnosticsTable> {
    check_design(m, ds)?;
    let mut rows = Vec::with_capacity(ds.n_obs());
    for c in &ds.clusters {
        let fitted = &c.x * &m.beta;
        let r = &c.y - &fitted;
        let b = cluster_blup(&m.theta, &c.t, c.group, &r, &c.mouse_id)?;
        let zb = m.theta.re_design(&c.t) * b;
        let sd = m.theta.residual_sd(c.group)?;
        for i in 0..c.len() {
            let resid_conditional = r[i] - zb[i];
            rows.push(DiagRow {
                mouse_id: c.mouse_id.clone(),
                group: c.group,
                tw: c.t[i],
                observed: c.y[i],
                fitted_marginal: fitted[i],
                fitted_conditional: fitted[i] + zb[i],
                resid_marginal: r[i],
                resid_conditional,
                resid_pearson: resid_conditional / sd,
            });
        }
    }
    Ok(DiagnosticsTable { rows })
}

/// `(Φ⁻¹((i − 0.5)/n), x_(i))` for `i = 1..n`.
pub fn qq_points(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = values.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFew(n));
    }
    let std = Normal::standard();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (std.inverse_cdf((i as f64 + 0.5) / n as f64), v))
        .collect())
}

pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("theoretical,empirical\n");
    for (a, b) in points {
        let _ = writeln!(s, "{a:.6},{b:.6}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekResidualCell {
    pub group: u32,
    pub tw: f64,
    pub mean: f64,
    /// `None` for single-observation cells.
    pub sd: Option<f64>,
    pub count: usize,
}

pub fn residuals_by_week(t: &DiagnosticsTable) -> Vec<WeekResidualCell> {
    let mut cells: BTreeMap<(u32, u64), Vec<f64>> = BTreeMap::new();
    for r in &t.rows {
        // weeks are nonnegative, so the bit pattern orders like the value
        cells
            .entry((r.group, r.tw.to_bits()))
            .or_default()
            .push(r.resid_pearson);
    }
    cells
        .into_iter()
        .map(|((group, tw), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.len() > 1)
                .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            WeekResidualCell {
                group,
                tw: f64::from_bits(tw),
                mean,
                sd,
                count: v.len(),
            }
        })
        .collect()
}

pub fn residuals_by_week_csv(cells: &[WeekResidualCell]) -> String {
    let mut s = String::from("group,tw,mean_resid_pearson,sd,count\n");
    for c in cells {
        let sd =
            c.sd.map_or_else(|| MISSING.to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{},{},{:.6},{},{}", c.group, c.tw, c.mean, sd, c.count);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn qq_two_points() {
        let q = qq_points(&[3.0, -1.0]).unwrap();
        assert!((q[0].0 + 0.674_489_75).abs() < 1e-6);
        assert!((q[1].0 - 0.674_489_75).abs() < 1e-6);
        assert_eq!((q[0].1, q[1].1), (-1.0, 3.0));
        assert_eq!(qq_points(&[1.0]), Err(DiagnosticsError::TooFew(1)));
    }

    #[test]
    fn qq_constant_and_monotone() {
        let q = qq_points(&[2.0; 5]).unwrap();
        assert!(q.iter().all(|p| p.1 == 2.0));
        assert!(q.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn qq_standard_normal_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let q = qq_points(&xs).unwrap();
        // Extreme order statistics have SD near 0.4 at this n, so the bound
        // applies to the central 98%; the tails get the order-statistic band.
        let dev = |r: &[(f64, f64)]| r.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let central = dev(&q[100..9900]);
        assert!(central < 0.15, "central max deviation {central}");
        assert!(dev(&q) < 1.5, "tail deviation {}", dev(&q));
        assert!(q.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn single_cell_sd_missing() {
        let t = DiagnosticsTable {
            rows: vec![DiagRow {
                mouse_id: "A".into(),
                group: 1,
                tw: 1.0,
                observed: 1.0,
                fitted_marginal: 1.0,
                fitted_conditional: 1.0,
                resid_marginal: 0.0,
                resid_conditional: 0.0,
                resid_pearson: 0.3,
            }],
        };
        let cells = residuals_by_week(&t);
        assert_eq!(cells[0].sd, None);
        assert!(residuals_by_week_csv(&cells).contains("1,1,0.300000,NA,1"));
    }
}
