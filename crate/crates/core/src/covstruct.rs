//! Variance-parameter families and per-mouse marginal covariance
//! `V_i = Z_i D Z_i' + R_i`.
//!
//! Four families share one random intercept per mouse:
//!
//! | token    | random effects            | residual law                     |
//! |----------|---------------------------|----------------------------------|
//! | `ri`     | intercept                 | iid `σ²`                         |
//! | `ris`    | intercept + week slope    | iid `σ²`                         |
//! | `ri+ar1` | intercept                 | `σ² φ^|t_j − t_k|`               |
//! | `ri+hv`  | intercept                 | iid, SD `σ·δ_g` per group        |
//!
//! Optimizers work on an unconstrained vector: SDs and ratios on the log
//! scale, `φ` through `atanh`, the Cholesky off-diagonal as is.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("parameter `{0}` is not finite")]
    NonFiniteParam(&'static str),
    #[error("parameter `{name}` = {value} is outside its domain")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("parameter `{0}` sits on the boundary and has no unconstrained image")]
    BoundaryParam(&'static str),
    #[error("intraclass correlation undefined: both variances are zero")]
    DegenerateVariance,
    #[error("expected {expected} unconstrained coordinates, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("group {0} has no residual scale")]
    UnknownGroup(u32),
    #[error("structure token `{0}` is not one of ri, ris, ris0, ri+ar1, ri+hv")]
    UnknownToken(String),
    #[error("week values must be strictly increasing")]
    UnsortedWeeks,
}

pub type Result<T> = std::result::Result<T, CovError>;

/// Structure family without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    RandomIntercept,
    RandomInterceptSlope { correlated: bool },
    RandomInterceptAr1,
    RandomInterceptHeteroVar,
}

impl StructureKind {
    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "ri" => Self::RandomIntercept,
            "ris" => Self::RandomInterceptSlope { correlated: true },
            "ris0" => Self::RandomInterceptSlope { correlated: false },
            "ri+ar1" => Self::RandomInterceptAr1,
            "ri+hv" => Self::RandomInterceptHeteroVar,
            other => return Err(CovError::UnknownToken(other.to_string())),
        })
    }

    pub fn token(&self) -> &'static str {
        match self {
            Self::RandomIntercept => "ri",
            Self::RandomInterceptSlope { correlated: true } => "ris",
            Self::RandomInterceptSlope { correlated: false } => "ris0",
            Self::RandomInterceptAr1 => "ri+ar1",
            Self::RandomInterceptHeteroVar => "ri+hv",
        }
    }

    /// Number of variance parameters for a dataset with `n_groups` groups.
    pub fn n_params(&self, n_groups: usize) -> usize {
        match self {
            Self::RandomIntercept => 2,
            Self::RandomInterceptSlope { correlated: true } => 4,
            Self::RandomInterceptSlope { correlated: false } => 3,
            Self::RandomInterceptAr1 => 3,
            Self::RandomInterceptHeteroVar => 2 + n_groups.saturating_sub(1),
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatio {
    pub group: u32,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum CovarianceStructure {
    RandomIntercept {
        sd_intercept: f64,
        sigma: f64,
    },
    /// `D = L L'` with `L = [[l11, 0], [l21, l22]]`.
    RandomInterceptSlope {
        l11: f64,
        l21: f64,
        l22: f64,
        sigma: f64,
        correlated: bool,
    },
    RandomInterceptAr1 {
        sd_intercept: f64,
        sigma: f64,
        phi: f64,
    },
    /// `sigma` is the residual SD of `reference`; other groups scale it.
    RandomInterceptHeteroVar {
        sd_intercept: f64,
        sigma: f64,
        reference: u32,
        ratios: Vec<GroupRatio>,
    },
}

fn finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CovError::NonFiniteParam(name))
    }
}

fn nonneg(name: &'static str, v: f64) -> Result<f64> {
    finite(name, v)?;
    if v < 0.0 {
        Err(CovError::InvalidParam { name, value: v })
    } else {
        Ok(v)
    }
}

fn log_of(name: &'static str, v: f64) -> Result<f64> {
    nonneg(name, v)?;
    if v == 0.0 {
        Err(CovError::BoundaryParam(name))
    } else {
        Ok(v.ln())
    }
}

impl CovarianceStructure {
    pub fn kind(&self) -> StructureKind {
        match self {
            Self::RandomIntercept { .. } => StructureKind::RandomIntercept,
            Self::RandomInterceptSlope { correlated, .. } => StructureKind::RandomInterceptSlope {
                correlated: *correlated,
            },
            Self::RandomInterceptAr1 { .. } => StructureKind::RandomInterceptAr1,
            Self::RandomInterceptHeteroVar { .. } => StructureKind::RandomInterceptHeteroVar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::RandomIntercept {
                sd_intercept,
                sigma,
            } => {
                nonneg("sd_intercept", *sd_intercept)?;
                nonneg("sigma", *sigma)?;
            }
            Self::RandomInterceptSlope {
                l11,
                l21,
                l22,
                sigma,
                correlated,
            } => {
                nonneg("l11", *l11)?;
                finite("l21", *l21)?;
                nonneg("l22", *l22)?;
                nonneg("sigma", *sigma)?;
                if !correlated && *l21 != 0.0 {
                    return Err(CovError::InvalidParam {
                        name: "l21",
                        value: *l21,
                    });
                }
            }
            Self::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                phi,
            } => {
                nonneg("sd_intercept", *sd_intercept)?;
                nonneg("sigma", *sigma)?;
                finite("phi", *phi)?;
                if phi.abs() >= 1.0 {
                    return Err(CovError::InvalidParam {
                        name: "phi",
                        value: *phi,
                    });
                }
            }
            Self::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                ratios,
                ..
            } => {
                nonneg("sd_intercept", *sd_intercept)?;
                nonneg("sigma", *sigma)?;
                for r in ratios {
                    finite("ratio", r.ratio)?;
                    if r.ratio <= 0.0 {
                        return Err(CovError::InvalidParam {
                            name: "ratio",
                            value: r.ratio,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Random-effects covariance `D` (1×1 or 2×2).
    pub fn re_cov(&self) -> DMatrix<f64> {
        match self {
            Self::RandomInterceptSlope { l11, l21, l22, .. } => DMatrix::from_row_slice(
                2,
                2,
                &[l11 * l11, l11 * l21, l11 * l21, l21 * l21 + l22 * l22],
            ),
            Self::RandomIntercept { sd_intercept, .. }
            | Self::RandomInterceptAr1 { sd_intercept, .. }
            | Self::RandomInterceptHeteroVar { sd_intercept, .. } => {
                DMatrix::from_element(1, 1, sd_intercept * sd_intercept)
            }
        }
    }

    /// Random-effects design `Z_i` for a mouse observed at weeks `t`.
    pub fn re_design(&self, t: &[f64]) -> DMatrix<f64> {
        match self {
            Self::RandomInterceptSlope { .. } => {
                DMatrix::from_fn(t.len(), 2, |i, j| if j == 0 { 1.0 } else { t[i] })
            }
            _ => DMatrix::from_element(t.len(), 1, 1.0),
        }
    }

    /// Residual standard deviation for an observation in `group`.
    pub fn residual_sd(&self, group: u32) -> Result<f64> {
        match self {
            Self::RandomIntercept { sigma, .. }
            | Self::RandomInterceptSlope { sigma, .. }
            | Self::RandomInterceptAr1 { sigma, .. } => Ok(*sigma),
            Self::RandomInterceptHeteroVar {
                sigma,
                reference,
                ratios,
                ..
            } => {
                if group == *reference {
                    return Ok(*sigma);
                }
                ratios
                    .iter()
                    .find(|r| r.group == group)
                    .map(|r| sigma * r.ratio)
                    .ok_or(CovError::UnknownGroup(group))
            }
        }
    }

    /// Residual correlation between observations at weeks `a` and `b`.
    fn residual_corr(&self, a: f64, b: f64) -> f64 {
        match self {
            Self::RandomInterceptAr1 { phi, .. } => {
                let lag = (a - b).abs();
                if lag == 0.0 {
                    1.0
                } else if lag.fract() == 0.0 && lag < f64::from(i32::MAX) {
                    phi.powi(lag as i32)
                } else {
                    phi.powf(lag)
                }
            }
            _ => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn marginal_cov(&self, t: &[f64], group: u32) -> Result<DMatrix<f64>> {
        self.validate()?;
        if t.windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(CovError::UnsortedWeeks);
        }
        let n = t.len();
        let s = self.residual_sd(group)?;
        let s2 = s * s;
        let d = self.re_cov();
        let mut v = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let re = match self {
                    Self::RandomInterceptSlope { .. } => {
                        d[(0, 0)] + d[(0, 1)] * (t[i] + t[j]) + d[(1, 1)] * t[i] * t[j]
                    }
                    _ => d[(0, 0)],
                };
                let value = re + s2 * self.residual_corr(t[i], t[j]);
                v[(i, j)] = value;
                v[(j, i)] = value;
            }
        }
        Ok(v)
    }

    /// `σ_b0² / (σ_b0² + σ²)` for the random-intercept family.
    pub fn icc(&self) -> Result<f64> {
        let (b, s) = match self {
            Self::RandomIntercept {
                sd_intercept,
                sigma,
            } => (*sd_intercept, *sigma),
            _ => {
                return Err(CovError::InvalidParam {
                    name: "structure",
                    value: f64::NAN,
                })
            }
        };
        let total = b * b + s * s;
        if total == 0.0 {
            Err(CovError::DegenerateVariance)
        } else {
            Ok(b * b / total)
        }
    }

    pub fn to_unconstrained(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match self {
            Self::RandomIntercept {
                sd_intercept,
                sigma,
            } => vec![
                log_of("sd_intercept", *sd_intercept)?,
                log_of("sigma", *sigma)?,
            ],
            Self::RandomInterceptSlope {
                l11,
                l21,
                l22,
                sigma,
                correlated,
            } => {
                let mut u = vec![log_of("l11", *l11)?];
                if *correlated {
                    u.push(*l21);
                }
                u.push(log_of("l22", *l22)?);
                u.push(log_of("sigma", *sigma)?);
                u
            }
            Self::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                phi,
            } => vec![
                log_of("sd_intercept", *sd_intercept)?,
                log_of("sigma", *sigma)?,
                phi.atanh(),
            ],
            Self::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                ratios,
                ..
            } => {
                let mut u = vec![
                    log_of("sd_intercept", *sd_intercept)?,
                    log_of("sigma", *sigma)?,
                ];
                for r in ratios {
                    u.push(log_of("ratio", r.ratio)?);
                }
                u
            }
        })
    }

    /// Inverse of [`Self::to_unconstrained`]. `levels` are the dataset's group
    /// labels in ascending order; the first one is the variance reference.
    pub fn from_unconstrained(kind: StructureKind, levels: &[u32], u: &[f64]) -> Result<Self> {
        let expected = kind.n_params(levels.len());
        if u.len() != expected {
            return Err(CovError::WrongLength {
                expected,
                got: u.len(),
            });
        }
        for &x in u {
            finite("unconstrained", x)?;
        }
        let s = match kind {
            StructureKind::RandomIntercept => Self::RandomIntercept {
                sd_intercept: u[0].exp(),
                sigma: u[1].exp(),
            },
            StructureKind::RandomInterceptSlope { correlated: true } => {
                Self::RandomInterceptSlope {
                    l11: u[0].exp(),
                    l21: u[1],
                    l22: u[2].exp(),
                    sigma: u[3].exp(),
                    correlated: true,
                }
            }
            StructureKind::RandomInterceptSlope { correlated: false } => {
                Self::RandomInterceptSlope {
                    l11: u[0].exp(),
                    l21: 0.0,
                    l22: u[1].exp(),
                    sigma: u[2].exp(),
                    correlated: false,
                }
            }
            StructureKind::RandomInterceptAr1 => Self::RandomInterceptAr1 {
                sd_intercept: u[0].exp(),
                sigma: u[1].exp(),
                phi: u[2].tanh(),
            },
            StructureKind::RandomInterceptHeteroVar => Self::RandomInterceptHeteroVar {
                sd_intercept: u[0].exp(),
                sigma: u[1].exp(),
                reference: levels.first().copied().unwrap_or(1),
                ratios: levels
                    .iter()
                    .skip(1)
                    .zip(&u[2..])
                    .map(|(&group, &x)| GroupRatio {
                        group,
                        ratio: x.exp(),
                    })
                    .collect(),
            },
        };
        Ok(s)
    }

    /// Standard-deviation-like components paired with the unconstrained
    /// coordinate that controls each one.
    pub fn sd_components(&self) -> Vec<(&'static str, usize, f64)> {
        match self {
            Self::RandomIntercept {
                sd_intercept,
                sigma,
            } => vec![("sd_intercept", 0, *sd_intercept), ("sigma", 1, *sigma)],
            Self::RandomInterceptSlope {
                l11,
                l21,
                l22,
                sigma,
                correlated,
            } => {
                let off = usize::from(*correlated);
                vec![
                    ("sd_intercept", 0, *l11),
                    ("sd_slope", 1 + off, l21.hypot(*l22)),
                    ("sigma", 2 + off, *sigma),
                ]
            }
            Self::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                ..
            }
            | Self::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                ..
            } => vec![("sd_intercept", 0, *sd_intercept), ("sigma", 1, *sigma)],
        }
    }

    /// Embeds random-intercept values `(sd_intercept, sigma)` into `kind`
    /// at the point where the extra parameters are neutral.
    pub fn embed_intercept(
        kind: StructureKind,
        levels: &[u32],
        sd_intercept: f64,
        sigma: f64,
        slope_sd: f64,
    ) -> Self {
        match kind {
            StructureKind::RandomIntercept => Self::RandomIntercept {
                sd_intercept,
                sigma,
            },
            StructureKind::RandomInterceptSlope { correlated } => Self::RandomInterceptSlope {
                l11: sd_intercept,
                l21: 0.0,
                l22: slope_sd,
                sigma,
                correlated,
            },
            StructureKind::RandomInterceptAr1 => Self::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                phi: 0.0,
            },
            StructureKind::RandomInterceptHeteroVar => Self::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                reference: levels.first().copied().unwrap_or(1),
                ratios: levels
                    .iter()
                    .skip(1)
                    .map(|&group| GroupRatio { group, ratio: 1.0 })
                    .collect(),
            },
        }
    }

    /// Intercept SD and (reference) residual SD.
    pub fn intercept_and_sigma(&self) -> (f64, f64) {
        match self {
            Self::RandomIntercept {
                sd_intercept,
                sigma,
            }
            | Self::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                ..
            }
            | Self::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                ..
            } => (*sd_intercept, *sigma),
            Self::RandomInterceptSlope { l11, sigma, .. } => (*l11, *sigma),
        }
    }
}
