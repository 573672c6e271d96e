use lmm_core::covstruct::StructureKind;
use lmm_core::dataio::{group_week_means, parse_wide, pivot_longer, LongDataset, Record};
use lmm_core::diagnostics::{blups, qq_points, residual_table};
use lmm_core::engine::{fit, fit_design, gls_beta, profile_loglik, FitOptions, Method, ModelSpec};
use lmm_core::formula::{build_design, parse_formula, RowBuilder};
use lmm_core::inference::{contrast, t_quantile_975, weekly_differences, Contrast};
use lmm_core::oracle::{
    coverage_experiment, dense_loglik, simulate, OracleError, SimLayout, TruthParams,
};
use lmm_core::report::{render_report, ReportInputs, ResidualSummary};
use lmm_core::CovarianceStructure;
use proptest::prelude::*;

fn m3(kind: StructureKind) -> ModelSpec {
    ModelSpec::preset("m3", kind, Method::Ml).unwrap()
}

fn small(seed: u64, structure: CovarianceStructure) -> LongDataset {
    let truth = TruthParams {
        structure,
        ..TruthParams::reported()
    };
    simulate(
        &truth,
        &SimLayout::new(vec![(1, 3), (2, 3), (3, 3)], 6, seed),
    )
    .unwrap()
}

fn ri(sd_intercept: f64, sigma: f64) -> CovarianceStructure {
    CovarianceStructure::RandomIntercept {
        sd_intercept,
        sigma,
    }
}

#[test]
fn wide_file_to_report() {
    let mut text = String::from("mouseid,grp,bw1,bw2,bw3,bw4\n");
    let d = simulate(
        &TruthParams::reported(),
        &SimLayout::new(vec![(1, 4), (2, 4), (3, 4)], 4, 12),
    )
    .unwrap();
    for m in d.by_mouse() {
        let w: Vec<String> = m.iter().map(|r| format!("{:.3}", r.weight)).collect();
        text.push_str(&format!(
            "{},{},{}\n",
            m[0].mouse_id,
            m[0].group,
            w.join(",")
        ));
    }
    let long = pivot_longer(&parse_wide(&text).unwrap());
    assert_eq!(long.n_obs(), 48);

    let spec = m3(StructureKind::RandomIntercept);
    let ds = build_design(&spec.fixed, &long).unwrap();
    let m = fit_design(&spec, &ds, &FitOptions::default()).unwrap();
    let diag = residual_table(&m, &ds).unwrap();
    assert_eq!(diag.rows.len(), long.n_obs());
    let ranef = blups(&m, &ds).unwrap();
    assert_eq!(ranef.rows.len(), 12);

    let inputs = ReportInputs {
        coefficient_model: Some("m3".into()),
        coefficients: lmm_core::inference::coefficient_table(&m),
        weekly: weekly_differences(&m, &[1.0, 4.0]).unwrap(),
        gains: lmm_core::inference::gains(&m, 1.0, 4.0).unwrap(),
        pearson: ResidualSummary::from_values(&diag.pearson()),
        intercepts: ResidualSummary::from_values(&ranef.intercepts()),
        ..Default::default()
    };
    let a = render_report(&inputs);
    assert_eq!(a, render_report(&inputs));
    assert_eq!(a.matches("| tw").count(), 2, "tw and tw:grp3 rows");
    assert_eq!(
        a.lines()
            .filter(|l| l.starts_with("| Group 3 - Group 1 |"))
            .count(),
        3
    );
}

/// The first-order GLS condition `Σ X_i' V_i⁻¹ (y_i − X_i β̂) = 0`.
#[test]
fn gls_score_vanishes() {
    let theta = CovarianceStructure::RandomInterceptAr1 {
        sd_intercept: 1.2,
        sigma: 1.1,
        phi: 0.4,
    };
    let d = small(3, theta.clone());
    let ds = build_design(&m3(StructureKind::RandomInterceptAr1).fixed, &d).unwrap();
    let (beta, _) = gls_beta(&theta, &ds).unwrap();
    let mut score = nalgebra::DVector::zeros(beta.len());
    for c in &ds.clusters {
        let v = theta.marginal_cov(&c.t, c.group).unwrap();
        let r = &c.y - &c.x * &beta;
        score += c.x.transpose() * v.cholesky().unwrap().solve(&r);
    }
    assert!(score.amax() < 1e-8, "{score}");
}

#[test]
fn fitting_is_deterministic() {
    let d = small(5, ri(1.5, 1.2));
    let spec = m3(StructureKind::RandomInterceptHeteroVar);
    let a = fit(&spec, &d).unwrap();
    let b = fit(&spec, &d).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
}

#[test]
fn one_mouse_per_group_means_are_trajectories() {
    let d = simulate(
        &TruthParams::reported(),
        &SimLayout::new(vec![(1, 1), (2, 1), (3, 1)], 5, 4),
    )
    .unwrap();
    let means = group_week_means(&d);
    for r in d.records() {
        assert_eq!(means.get(r.group, r.tw).unwrap().mean, r.weight);
    }
}

#[test]
fn group_one_rows_have_no_group_columns() {
    for (name, _) in lmm_core::engine::MODEL_FORMULAS {
        let spec = ModelSpec::preset(name, StructureKind::RandomIntercept, Method::Ml).unwrap();
        let b = RowBuilder::new(&spec.fixed, &[1, 2, 3]).unwrap();
        for t in 1..=12 {
            let row = b.row(1, f64::from(t));
            for (v, col) in row.iter().zip(b.column_names()) {
                if col.contains("grp") {
                    assert_eq!(*v, 0.0, "{name} {col}");
                }
            }
        }
    }
}

#[test]
fn coverage_with_no_intercept_variance() {
    let truth = TruthParams::model3([19.004, 0.337, 14.925, 17.254, 1.738], 0.0, 1.37);
    let layout = SimLayout {
        seed: 77,
        ..SimLayout::default()
    };
    let t = coverage_experiment(
        &truth,
        &layout,
        &m3(StructureKind::RandomIntercept),
        &[Contrast::unit("tw", 5, 1)],
        200,
    )
    .unwrap();
    let c = t.rows[0].coverage();
    assert!((0.92..=0.98).contains(&c), "coverage {c}");
    assert!(t
        .to_csv()
        .starts_with("contrast,truth,coverage,hits,completed,failures\n"));
    assert_eq!(
        coverage_experiment(
            &truth,
            &layout,
            &m3(StructureKind::RandomIntercept),
            &[],
            50
        ),
        Err(OracleError::TooFewReps(50))
    );
}

#[test]
fn qq_of_blups_is_monotone() {
    let d = small(9, ri(1.7, 1.3));
    let spec = m3(StructureKind::RandomIntercept);
    let ds = build_design(&spec.fixed, &d).unwrap();
    let m = fit_design(&spec, &ds, &FitOptions::default()).unwrap();
    let q = qq_points(&blups(&m, &ds).unwrap().intercepts()).unwrap();
    assert!(q.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn profile_dominates_any_beta(
        seed in 0u64..1000,
        sb in 0.2f64..3.0,
        s in 0.3f64..3.0,
        shift in prop::collection::vec(-0.5f64..0.5, 5),
    ) {
        let theta = ri(sb, s);
        let d = small(seed, theta.clone());
        let ast = parse_formula("weight ~ tw + grp + tw:grp3").unwrap();
        let ds = build_design(&ast, &d).unwrap();
        let (beta, _) = gls_beta(&theta, &ds).unwrap();
        let profile = profile_loglik(&theta, &ds, Method::Ml).unwrap();
        let at = |b: Vec<f64>| dense_loglik(
            &TruthParams { formula: ast.clone(), beta: b, structure: theta.clone() },
            &d,
            Method::Ml,
        ).unwrap();
        let hat: Vec<f64> = beta.iter().copied().collect();
        prop_assert!((at(hat.clone()) - profile).abs() < 1e-8);
        let other: Vec<f64> = hat.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert!(at(other) <= profile + 1e-9);
    }

    #[test]
    fn fit_never_below_truth(seed in 0u64..1000) {
        let truth = TruthParams::reported();
        let d = small(seed, truth.structure.clone());
        let spec = m3(StructureKind::RandomIntercept);
        let ds = build_design(&spec.fixed, &d).unwrap();
        let opts = FitOptions { starts: vec![truth.structure.clone()], ..FitOptions::default() };
        let m = fit_design(&spec, &ds, &opts).unwrap();
        let at_truth = profile_loglik(&truth.structure, &ds, Method::Ml).unwrap();
        prop_assert!(m.loglik >= at_truth - 1e-9);
    }

    #[test]
    fn contrast_ci_and_p_agree(seed in 0u64..1000, c in prop::collection::vec(-2.0f64..2.0, 5), scale in 0.1f64..10.0) {
        prop_assume!(c.iter().any(|v| v.abs() > 1e-3));
        let d = small(seed, ri(1.7, 1.4));
        let m = fit(&m3(StructureKind::RandomIntercept), &d).unwrap();
        let r = contrast(&m, &Contrast::new("c", c.clone())).unwrap();
        let width = 2.0 * t_quantile_975(r.df) * r.se;
        prop_assert!(((r.ci_hi - r.ci_lo) - width).abs() <= 1e-12 * width.max(1.0));
        let excludes = r.ci_lo > 0.0 || r.ci_hi < 0.0;
        prop_assert_eq!(r.p < 0.05, excludes);

        let scaled = contrast(&m, &Contrast::new("s", c.iter().map(|v| v * scale).collect())).unwrap();
        prop_assert!((scaled.estimate - scale * r.estimate).abs() < 1e-9 * (1.0 + r.estimate.abs() * scale));
        prop_assert!((scaled.se - scale * r.se).abs() < 1e-9 * (1.0 + r.se * scale));
        prop_assert!((scaled.t - r.t).abs() < 1e-9 * (1.0 + r.t.abs()));
    }

    #[test]
    fn weekly_identity(seed in 0u64..1000) {
        let d = small(seed, ri(1.7, 1.4));
        let m = fit(&m3(StructureKind::RandomIntercept), &d).unwrap();
        let weeks: Vec<f64> = (1..=6).map(f64::from).collect();
        let w = weekly_differences(&m, &weeks).unwrap();
        let (g21, rest) = w.split_at(6);
        let (g31, g32) = rest.split_at(6);
        for i in 0..6 {
            prop_assert!((g31[i].estimate - g32[i].estimate - g21[i].estimate).abs() < 1e-10);
        }
    }

    #[test]
    fn records_per_mouse_sum_to_total(counts in prop::collection::vec(1usize..5, 1..4), weeks in 2u32..8) {
        let groups: Vec<(u32, usize)> = counts.iter().enumerate().map(|(i, c)| (i as u32 + 1, *c)).collect();
        let truth = TruthParams {
            formula: parse_formula("weight ~ tw").unwrap(),
            beta: vec![20.0, 0.5],
            structure: ri(1.0, 1.0),
        };
        let d = simulate(&truth, &SimLayout::new(groups, weeks, 1)).unwrap();
        let per: usize = d.by_mouse().iter().map(|m| m.len()).sum();
        prop_assert_eq!(per, d.n_obs());
        prop_assert_eq!(d.n_obs(), d.n_mice() * weeks as usize);
        let _: &[Record] = d.records();
    }
}
