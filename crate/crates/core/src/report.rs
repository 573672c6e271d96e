//! Markdown summary of a finished analysis. Sections always appear in the
//! same order; an empty section prints a stub instead of disappearing.

use std::fmt::Write as _;

use crate::inference::{
    coefficient_csv, compare_csv, format_p, gains_csv, weekly_csv, CompareRow, ContrastResult,
};

const NO_RESULTS: &str = "_no results_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ResidualSummary {
    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n: v.len(),
            mean,
            sd,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportInputs {
    pub title: String,
    pub comparison: Vec<CompareRow>,
    /// Model name the coefficient table belongs to.
    pub coefficient_model: Option<String>,
    pub coefficients: Vec<ContrastResult>,
    pub weekly: Vec<ContrastResult>,
    pub gains: Vec<ContrastResult>,
    pub pearson: Option<ResidualSummary>,
    pub intercepts: Option<ResidualSummary>,
}

fn table(out: &mut String, csv: &str, rows: usize) {
    if rows == 0 {
        let _ = writeln!(out, "{NO_RESULTS}\n");
        return;
    }
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for l in lines {
        let _ = writeln!(out, "| {} |", l.split(',').collect::<Vec<_>>().join(" | "));
    }
    out.push('\n');
}

fn summary(out: &mut String, name: &str, s: &Option<ResidualSummary>) {
    match s {
        None => {
            let _ = writeln!(out, "{name}: {NO_RESULTS}\n");
        }
        Some(s) => {
            let _ = writeln!(
                out,
                "{name}: n = {}, mean = {:.3}, sd = {:.3}, min = {:.3}, max = {:.3}\n",
                s.n, s.mean, s.sd, s.min, s.max
            );
        }
    }
}

pub fn render_report(r: &ReportInputs) -> String {
    let mut out = String::new();
    let title = if r.title.is_empty() {
        "Mixed-model analysis"
    } else {
        &r.title
    };
    let _ = writeln!(out, "# {title}\n");

    out.push_str("## Model comparison\n\n");
    table(&mut out, &compare_csv(&r.comparison), r.comparison.len());
    let flagged: Vec<&str> = r
        .comparison
        .iter()
        .filter(|c| c.boundary)
        .map(|c| c.name.as_str())
        .collect();
    if !flagged.is_empty() {
        let _ = writeln!(out, "Boundary estimates: {}\n", flagged.join(", "));
    }

    out.push_str("## Fixed effects\n\n");
    if let Some(m) = &r.coefficient_model {
        let _ = writeln!(out, "Model: {m}\n");
    }
    table(
        &mut out,
        &coefficient_csv(&r.coefficients),
        r.coefficients.len(),
    );

    out.push_str("## Weekly group differences\n\n");
    table(&mut out, &weekly_csv(&r.weekly), r.weekly.len());

    out.push_str("## Gains\n\n");
    table(&mut out, &gains_csv(&r.gains), r.gains.len());
    for g in &r.gains {
        let _ = writeln!(out, "- {}: p = {}", g.label, format_p(g.p));
    }
    if !r.gains.is_empty() {
        out.push('\n');
    }

    out.push_str("## Diagnostics\n\n");
    summary(&mut out, "Pearson residuals", &r.pearson);
    summary(&mut out, "Predicted random intercepts", &r.intercepts);
    out
}

/// Writes `report.md` under `dir`.
pub fn emit_report(r: &ReportInputs, dir: &std::path::Path) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("report.md");
    std::fs::write(&path, render_report(r))?;
    Ok(path)
}
