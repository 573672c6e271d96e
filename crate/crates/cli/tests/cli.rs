use std::path::Path;
use std::process::{Command, Output};

fn lmm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("LMM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

/// Simulated long file with the default 31-mouse layout.
fn simulated(dir: &Path) -> String {
    let o = lmm(dir, &["simulate", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("simulated_long.csv")
        .to_string_lossy()
        .into_owned()
}

fn wide_file(dir: &Path) -> String {
    let path = dir.join("wide.csv");
    std::fs::write(
        &path,
        "mouseid,grp,bw1,bw2,bw3,notes\nA,1,20.1,20.5,21.0,x\nB,2,35.2,35.4,36.0,\nC,3,38.0,40.1,42.3,y\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn reshape_and_eda() {
    let dir = tempfile::tempdir().unwrap();
    let input = wide_file(dir.path());
    let o = lmm(dir.path(), &["reshape", &input]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("notes"));
    let long = std::fs::read_to_string(dir.path().join("data_long.csv")).unwrap();
    assert_eq!(long.lines().next(), Some("mouseid,grp,tw,weight"));
    assert_eq!(long.lines().count(), 10);

    let o = lmm(dir.path(), &["eda", &input]);
    assert!(o.status.success());
    assert_eq!(
        first_line(&dir.path().join("group_week_means.csv")),
        "grp,tw,mean_weight,count"
    );
}

#[test]
fn fit_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated(dir.path());
    let o = lmm(
        dir.path(),
        &[
            "fit",
            "--model",
            "m3",
            "--structure",
            "ri",
            "--method",
            "ml",
            &input,
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["k"], 7);
    assert_eq!(v["N"], 372);
    assert_eq!(v["df_outer"], 28);
    assert_eq!(v["df_inner"], 339);
    assert!(v["loglik"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("fit.json").is_file());

    let o = lmm(dir.path(), &["fit", "--method", "reml", &input]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["method"], "REML");
}

#[test]
fn compare_main_and_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated(dir.path());
    let o = lmm(dir.path(), &["compare", "--set", "main", &input]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "Model,AIC,BIC,logLik,k");
    assert!(lines[1].starts_with("m1,") && lines[1].ends_with(",6"));
    assert!(lines[2].starts_with("m2,") && lines[2].ends_with(",8"));
    assert!(lines[3].starts_with("m3,") && lines[3].ends_with(",7"));
    assert_eq!(
        first_line(&dir.path().join("lrt_main.csv")),
        "reduced,full,stat,df,p_value,boundary"
    );

    let o = lmm(dir.path(), &["compare", "--set", "sensitivity", &input]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(dir.path().join("compare_sensitivity.csv")).unwrap();
    let names: Vec<&str> = t
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["Main", "RS", "AR1", "HV"]);
}

#[test]
fn contrasts_gains_diagnose_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated(dir.path());
    let o = lmm(dir.path(), &["contrasts", &input]);
    assert!(o.status.success());
    let w = std::fs::read_to_string(dir.path().join("weekly_differences.csv")).unwrap();
    assert_eq!(
        w.lines().next().unwrap(),
        "contrast_label,week,Estimate,Std_Error,Lower_95CI,Upper_95CI,p_value"
    );
    assert_eq!(w.lines().count(), 37);

    let o = lmm(dir.path(), &["gains", "--weeks", "1-12", &input]);
    assert!(o.status.success());
    let g = std::fs::read_to_string(dir.path().join("gains.csv")).unwrap();
    assert_eq!(
        g.lines().next().unwrap(),
        "Group,Estimate,Std_Error,Lower_95CI,Upper_95CI"
    );
    assert_eq!(g.lines().count(), 6);
    assert_eq!(
        first_line(&dir.path().join("coefficients.csv")),
        "Term,Estimate,Std_Error,Lower_95CI,Upper_95CI,p_value"
    );

    let o = lmm(dir.path(), &["diagnose", &input]);
    assert!(o.status.success());
    let expect = [
        ("diagnostics.csv", "mouse_id,group,tw,observed,fitted_marginal,fitted_conditional,resid_marginal,resid_conditional,resid_pearson"),
        ("ranef.csv", "mouse_id,group,b0"),
        ("qq_resid.csv", "theoretical,empirical"),
        ("qq_ranef.csv", "theoretical,empirical"),
        ("resid_by_week.csv", "group,tw,mean_resid_pearson,sd,count"),
    ];
    for (file, header) in expect {
        assert_eq!(first_line(&dir.path().join(file)), header, "{file}");
    }
    let n = std::fs::read_to_string(dir.path().join("diagnostics.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(n, 373);
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmm(dir.path(), &["oracle-check", "--seed", "7"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    assert!(dir.path().join("oracle_check.csv").is_file());
}

#[test]
fn report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated(dir.path());
    let a_dir = dir.path().join("a");
    let b_dir = dir.path().join("b");
    assert!(lmm(&a_dir, &["report", &input]).status.success());
    assert!(lmm(&b_dir, &["report", &input]).status.success());
    let a = std::fs::read(a_dir.join("report.md")).unwrap();
    let b = std::fs::read(b_dir.join("report.md")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let fixed = text
        .split("## Fixed effects")
        .nth(1)
        .unwrap()
        .split("## Weekly")
        .next()
        .unwrap();
    let rows = fixed
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Term"))
        .count();
    assert_eq!(rows, 5);
}

#[test]
fn report_with_unusable_data_has_stubs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one_group.csv");
    std::fs::write(
        &path,
        "mouseid,grp,tw,weight\nA,1,1,20\nA,1,2,21\nB,1,1,19\nB,1,2,20.5\n",
    )
    .unwrap();
    let o = lmm(dir.path(), &["report", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(text.contains("_no results_"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lmm"))
        .args(["simulate", "--groups", "2,2,2", "--weeks", "4"])
        .env("LMM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let d = std::fs::read_to_string(dir.path().join("simulated_long.csv")).unwrap();
    assert_eq!(d.lines().count(), 25);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        lmm(dir.path(), &["fit", "--model", "m9", "x.csv"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        lmm(dir.path(), &["fit", "--structure", "ar2", "x.csv"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(lmm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        lmm(dir.path(), &["coverage", "--reps", "10"]).status.code(),
        Some(2)
    );

    let missing = dir.path().join("missing.csv");
    assert_eq!(
        lmm(dir.path(), &["fit", missing.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "mouseid,grp,bw1,bw3\nA,1,20,21\n").unwrap();
    let o = lmm(dir.path(), &["reshape", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}
