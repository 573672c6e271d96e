//! WebAssembly bindings for the browser demo. Each exported function takes
//! plain numbers or text and returns a JSON string; the pure Rust versions
//! are tested natively.

use lmm_core::covstruct::{CovarianceStructure, GroupRatio, StructureKind};
use lmm_core::dataio::{group_week_means, parse_any};
use lmm_core::engine::{fit_design, FitOptions, FittedModel, Method, ModelSpec};
use lmm_core::inference::{
    coefficient_table, gains, group_mean, weekly_differences, ContrastResult,
};
use lmm_core::oracle::{simulate, SimLayout, TruthParams};
use lmm_core::{build_design, LongDataset};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_MICE_PER_GROUP: usize = 200;
const MAX_WEEKS: u32 = 52;

fn rows_json(rows: &[ContrastResult]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "label": r.label,
                    "week": r.week,
                    "estimate": r.estimate,
                    "se": r.se,
                    "lo": r.ci_lo,
                    "hi": r.ci_hi,
                    "p": r.p,
                })
            })
            .collect(),
    )
}

fn fit_m3(d: &LongDataset, kind: StructureKind, model: &str) -> Result<FittedModel, String> {
    let spec = ModelSpec::preset(model, kind, Method::Ml)
        .ok_or_else(|| format!("unknown model `{model}`"))?;
    let ds = build_design(&spec.fixed, d).map_err(|e| e.to_string())?;
    fit_design(&spec, &ds, &FitOptions::default()).map_err(|e| e.to_string())
}

/// Model-based group mean curves with pointwise 95% bands.
fn curves(m: &FittedModel, weeks: &[f64]) -> Result<Value, String> {
    let mut out = serde_json::Map::new();
    for &g in &m.group_levels {
        let rows = weeks
            .iter()
            .map(|&t| group_mean(m, g, t).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(g.to_string(), rows_json(&rows));
    }
    Ok(Value::Object(out))
}

fn summary(d: &LongDataset, m: &FittedModel) -> Result<Value, String> {
    let mut weeks: Vec<u32> = d.records().iter().map(|r| r.tw).collect();
    weeks.sort_unstable();
    weeks.dedup();
    let wf: Vec<f64> = weeks.iter().map(|&w| f64::from(w)).collect();
    let mice: Vec<Value> = d
        .by_mouse()
        .into_iter()
        .map(|recs| {
            json!({
                "id": recs[0].mouse_id,
                "group": recs[0].group,
                "weeks": recs.iter().map(|r| r.tw).collect::<Vec<_>>(),
                "weights": recs.iter().map(|r| r.weight).collect::<Vec<_>>(),
            })
        })
        .collect();
    let means: Vec<Value> = group_week_means(d)
        .cells
        .iter()
        .map(|c| json!({ "group": c.group, "week": c.tw, "mean": c.mean }))
        .collect();
    let (sd_b, sigma) = m.theta.intercept_and_sigma();
    let weekly = weekly_differences(m, &wf)
        .map(|r| rows_json(&r))
        .unwrap_or(Value::Null);
    let gain_rows = match (wf.first(), wf.last()) {
        (Some(&a), Some(&b)) if b > a => {
            gains(m, a, b).map(|r| rows_json(&r)).unwrap_or(Value::Null)
        }
        _ => Value::Null,
    };
    Ok(json!({
        "weeks": weeks,
        "mice": mice,
        "means": means,
        "curves": curves(m, &wf)?,
        "coefficients": rows_json(&coefficient_table(m)),
        "weekly": weekly,
        "gains": gain_rows,
        "fit": m.to_json(),
        "sd_intercept": sd_b,
        "sigma": sigma,
    }))
}

/// Simulates a three-group study around the reference estimates, with the
/// given variance components, and fits the model back.
pub fn simulate_and_fit_json(
    seed: u64,
    per_group: usize,
    weeks: u32,
    sd_intercept: f64,
    sigma: f64,
) -> Result<String, String> {
    if per_group == 0 || per_group > MAX_MICE_PER_GROUP {
        return Err(format!(
            "mice per group must be in 1..={MAX_MICE_PER_GROUP}"
        ));
    }
    if !(2..=MAX_WEEKS).contains(&weeks) {
        return Err(format!("weeks must be in 2..={MAX_WEEKS}"));
    }
    if !(sd_intercept >= 0.0 && sigma > 0.0 && sd_intercept.is_finite() && sigma.is_finite()) {
        return Err("need sd_intercept >= 0 and sigma > 0".into());
    }
    let reported = TruthParams::reported();
    let b = &reported.beta;
    let truth = TruthParams::model3([b[0], b[1], b[2], b[3], b[4]], sd_intercept, sigma);
    let layout = SimLayout::new(
        vec![(1, per_group), (2, per_group), (3, per_group)],
        weeks,
        seed,
    );
    let d = simulate(&truth, &layout).map_err(|e| e.to_string())?;
    let m = fit_m3(&d, StructureKind::RandomIntercept, "m3")?;
    let mut v = summary(&d, &m)?;
    v["truth"] = json!({ "beta": truth.beta, "sd_intercept": sd_intercept, "sigma": sigma });
    Ok(v.to_string())
}

/// Marginal covariance and correlation of one mouse's weeks `1..=weeks`.
/// `extra` is φ for `ri+ar1`, the slope SD for `ris0`, and the group ratio
/// applied to group 2 for `ri+hv` (evaluated for group 2); it is ignored for
/// `ri`.
pub fn covariance_json(
    structure: &str,
    sd_intercept: f64,
    sigma: f64,
    extra: f64,
    weeks: u32,
) -> Result<String, String> {
    if !(1..=MAX_WEEKS).contains(&weeks) {
        return Err(format!("weeks must be in 1..={MAX_WEEKS}"));
    }
    let kind = StructureKind::from_token(structure).map_err(|e| e.to_string())?;
    let (theta, group) = match kind {
        StructureKind::RandomIntercept => (
            CovarianceStructure::RandomIntercept {
                sd_intercept,
                sigma,
            },
            1,
        ),
        StructureKind::RandomInterceptAr1 => (
            CovarianceStructure::RandomInterceptAr1 {
                sd_intercept,
                sigma,
                phi: extra,
            },
            1,
        ),
        StructureKind::RandomInterceptSlope { correlated } => (
            CovarianceStructure::RandomInterceptSlope {
                l11: sd_intercept,
                l21: 0.0,
                l22: extra,
                sigma,
                correlated,
            },
            1,
        ),
        StructureKind::RandomInterceptHeteroVar => (
            CovarianceStructure::RandomInterceptHeteroVar {
                sd_intercept,
                sigma,
                reference: 1,
                ratios: vec![GroupRatio {
                    group: 2,
                    ratio: extra,
                }],
            },
            2,
        ),
    };
    let t: Vec<f64> = (1..=weeks).map(f64::from).collect();
    let v = theta.marginal_cov(&t, group).map_err(|e| e.to_string())?;
    let n = t.len();
    let cov: Vec<Vec<f64>> = (0..n).map(|i| v.row(i).iter().copied().collect()).collect();
    let corr: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| v[(i, j)] / (v[(i, i)] * v[(j, j)]).sqrt())
                .collect()
        })
        .collect();
    Ok(json!({
        "structure": kind.token(),
        "weeks": t,
        "cov": cov,
        "corr": corr,
        "icc": theta.icc().ok(),
    })
    .to_string())
}

/// Fits pasted wide or long CSV text.
pub fn analyze_csv_json(text: &str, model: &str, structure: &str) -> Result<String, String> {
    let d = parse_any(text).map_err(|e| e.to_string())?;
    let kind = StructureKind::from_token(structure).map_err(|e| e.to_string())?;
    let m = fit_m3(&d, kind, model)?;
    Ok(summary(&d, &m)?.to_string())
}

#[wasm_bindgen]
pub fn simulate_and_fit(
    seed: u32,
    per_group: u32,
    weeks: u32,
    sd_intercept: f64,
    sigma: f64,
) -> Result<String, String> {
    simulate_and_fit_json(
        u64::from(seed),
        per_group as usize,
        weeks,
        sd_intercept,
        sigma,
    )
}

#[wasm_bindgen]
pub fn covariance(
    structure: &str,
    sd_intercept: f64,
    sigma: f64,
    extra: f64,
    weeks: u32,
) -> Result<String, String> {
    covariance_json(structure, sd_intercept, sigma, extra, weeks)
}

#[wasm_bindgen]
pub fn analyze_csv(text: &str, model: &str, structure: &str) -> Result<String, String> {
    analyze_csv_json(text, model, structure)
}
