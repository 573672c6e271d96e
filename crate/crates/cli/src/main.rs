use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmm_core::covstruct::StructureKind;
use lmm_core::dataio::{group_week_means, parse_any, parse_wide, pivot_longer, validate_long};
use lmm_core::diagnostics::{
    blups, qq_csv, qq_points, residual_table, residuals_by_week, residuals_by_week_csv,
};
use lmm_core::engine::{fit_design, FitOptions, FittedModel, Method, ModelSpec};
use lmm_core::inference::{
    coefficient_csv, coefficient_table, compare_csv, compare_table, gains, gains_csv, lrt,
    weekly_csv, weekly_differences, LrtResult,
};
use lmm_core::oracle::{
    coverage_experiment, default_coverage_contrasts, equivalence_check, simulate, SimLayout,
    TruthParams,
};
use lmm_core::report::{emit_report, ReportInputs, ResidualSummary};
use lmm_core::{build_design, DesignSet, ErrorKind, LongDataset};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const ORACLE_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "lmm",
    version,
    about = "Linear mixed models for longitudinal body-weight data"
)]
struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, env = "LMM_OUT_DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Wide table (mouseid, grp, bw1..bwW) to long records.
    Reshape { input: PathBuf },
    /// Mean weight per group and week.
    Eda { input: PathBuf },
    /// Fit one model and print it as JSON.
    Fit {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Information criteria and likelihood-ratio tests for a set of fits.
    Compare {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "main")]
        set: CompareSet,
    },
    /// Pairwise group differences at each week.
    Contrasts {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_weeks)]
        weeks: Option<(u32, u32)>,
    },
    /// Mean gain per group between the first and last week.
    Gains {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_weeks)]
        weeks: Option<(u32, u32)>,
    },
    /// Residuals, predicted random effects and Q-Q coordinates.
    Diagnose {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Simulate a study from the reference parameter values.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Compare the per-mouse likelihood against the dense oracle.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        draws: usize,
    },
    /// Empirical confidence-interval coverage by repeated simulation.
    Coverage {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 500)]
        reps: usize,
    },
    /// Run the full analysis and write a markdown report.
    Report {
        input: PathBuf,
        #[arg(long, value_parser = parse_weeks)]
        weeks: Option<(u32, u32)>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Mean structure: m1, m2 or m3.
    #[arg(long, default_value = "m3", value_parser = ["m1", "m2", "m3"])]
    model: String,
    /// Covariance structure: ri, ris, ris0, ri+ar1 or ri+hv.
    #[arg(long, default_value = "ri", value_parser = parse_structure)]
    structure: StructureKind,
    #[arg(long, default_value = "ml", value_parser = parse_method)]
    method: Method,
}

impl ModelArgs {
    fn spec(&self) -> ModelSpec {
        ModelSpec::preset(&self.model, self.structure, self.method).expect("validated by clap")
    }
}

#[derive(Args, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Mice per group, in group order.
    #[arg(long, value_delimiter = ',', default_value = "10,10,11")]
    groups: Vec<usize>,
    #[arg(long, default_value_t = 12)]
    weeks: u32,
}

impl SimArgs {
    fn layout(&self) -> SimLayout {
        SimLayout::new(
            self.groups
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, *n))
                .collect(),
            self.weeks,
            self.seed,
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CompareSet {
    Main,
    Sensitivity,
}

fn parse_structure(s: &str) -> Result<StructureKind, String> {
    StructureKind::from_token(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_token(s).ok_or_else(|| format!("unknown method `{s}`"))
}

/// `A-B` or a single week `A`.
fn parse_weeks(s: &str) -> Result<(u32, u32), String> {
    let bad = || format!("weeks must look like `1-12`, got `{s}`");
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lmm(lmm_core::Error),
}

impl<E: Into<lmm_core::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Lmm(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Lmm(e) => match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Lmm(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| {
        Failure::Lmm(lmm_core::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn load(path: &Path) -> Result<LongDataset, Failure> {
    let d = parse_any(&read(path)?)?;
    let report = validate_long(&d);
    if !report.is_empty() {
        eprint!("{report}");
    }
    Ok(d)
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn write(&self, name: &str, contents: &str) -> Outcome {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn fit_with(spec: &ModelSpec, d: &LongDataset) -> Result<(FittedModel, DesignSet), Failure> {
    let ds = build_design(&spec.fixed, d)?;
    let m = fit_design(spec, &ds, &FitOptions::default())?;
    if m.boundary {
        eprintln!(
            "note: {} ({}) has a variance estimate on the boundary",
            spec.name, spec.structure
        );
    }
    Ok((m, ds))
}

fn week_range(d: &LongDataset, weeks: Option<(u32, u32)>) -> Result<(u32, u32), Failure> {
    if let Some(w) = weeks {
        return Ok(w);
    }
    let tws = d.records().iter().map(|r| r.tw);
    match (tws.clone().min(), tws.max()) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Failure::Usage("dataset has no records".into())),
    }
}

fn lrt_csv(rows: &[(String, String, LrtResult)]) -> String {
    let mut s = String::from("reduced,full,stat,df,p_value,boundary\n");
    for (a, b, r) in rows {
        s.push_str(&format!(
            "{a},{b},{:.3},{},{},{}\n",
            r.stat,
            r.df,
            lmm_core::inference::format_p(r.p),
            r.boundary
        ));
    }
    s
}

fn compare_specs(set: CompareSet) -> Vec<ModelSpec> {
    let ri = StructureKind::RandomIntercept;
    match set {
        CompareSet::Main => ["m1", "m2", "m3"]
            .iter()
            .map(|m| ModelSpec::preset(m, ri, Method::Ml).expect("preset"))
            .collect(),
        CompareSet::Sensitivity => [
            ("Main", ri),
            (
                "RS",
                StructureKind::RandomInterceptSlope { correlated: true },
            ),
            ("AR1", StructureKind::RandomInterceptAr1),
            ("HV", StructureKind::RandomInterceptHeteroVar),
        ]
        .into_iter()
        .map(|(name, kind)| {
            let mut s = ModelSpec::preset("m3", kind, Method::Ml).expect("preset");
            s.name = name.to_string();
            s
        })
        .collect(),
    }
}

/// Fits are independent, so each runs on its own thread.
fn fit_all(specs: &[ModelSpec], d: &LongDataset) -> Result<Vec<FittedModel>, Failure> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|s| scope.spawn(move || fit_with(s, d).map(|r| r.0)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fit thread panicked"))
            .collect()
    })
}

fn compare(d: &LongDataset, set: CompareSet, out: &Output) -> Outcome {
    let fits = fit_all(&compare_specs(set), d)?;
    let table = compare_csv(&compare_table(&fits));
    let pairs: Vec<(usize, usize)> = match set {
        CompareSet::Main => vec![(0, 2), (2, 1)],
        CompareSet::Sensitivity => vec![(0, 1), (0, 2), (0, 3)],
    };
    let mut tests = Vec::new();
    for (a, b) in pairs {
        let r = lrt(&fits[a], &fits[b])?;
        if let Some(w) = &r.warning {
            eprintln!("warning: {w}");
        }
        tests.push((fits[a].spec.name.clone(), fits[b].spec.name.clone(), r));
    }
    let tag = match set {
        CompareSet::Main => "main",
        CompareSet::Sensitivity => "sensitivity",
    };
    print!("{table}");
    out.write(&format!("compare_{tag}.csv"), &table)?;
    out.write(&format!("lrt_{tag}.csv"), &lrt_csv(&tests))
}

fn diagnose(d: &LongDataset, spec: &ModelSpec, out: &Output) -> Outcome {
    let (m, ds) = fit_with(spec, d)?;
    let table = residual_table(&m, &ds)?;
    let ranef = blups(&m, &ds)?;
    out.write("diagnostics.csv", &table.to_csv())?;
    out.write("ranef.csv", &ranef.to_csv())?;
    out.write("qq_resid.csv", &qq_csv(&qq_points(&table.pearson())?))?;
    out.write("qq_ranef.csv", &qq_csv(&qq_points(&ranef.intercepts())?))?;
    out.write(
        "resid_by_week.csv",
        &residuals_by_week_csv(&residuals_by_week(&table)),
    )
}

/// Sections that cannot be computed are left empty and reported on stderr.
fn report(d: &LongDataset, weeks: Option<(u32, u32)>, out: &Output) -> Outcome {
    let mut inputs = ReportInputs {
        title: "Body-weight mixed-model analysis".into(),
        ..Default::default()
    };
    let skip = |what: &str, e: &dyn std::fmt::Display| eprintln!("note: {what} skipped: {e}");
    match fit_all(&compare_specs(CompareSet::Main), d) {
        Ok(fits) => inputs.comparison = compare_table(&fits),
        Err(e) => skip("model comparison", &e),
    }
    let spec = ModelSpec::preset("m3", StructureKind::RandomIntercept, Method::Ml).expect("preset");
    match fit_with(&spec, d) {
        Ok((m, ds)) => {
            inputs.coefficient_model = Some(format!("{} ({})", m.spec.name, m.spec.fixed));
            inputs.coefficients = coefficient_table(&m);
            let (first, last) = week_range(d, weeks)?;
            let all: Vec<f64> = (first..=last).map(f64::from).collect();
            match weekly_differences(&m, &all) {
                Ok(w) => inputs.weekly = w,
                Err(e) => skip("weekly differences", &e),
            }
            match gains(&m, f64::from(first), f64::from(last)) {
                Ok(g) => inputs.gains = g,
                Err(e) => skip("gains", &e),
            }
            match residual_table(&m, &ds) {
                Ok(t) => inputs.pearson = ResidualSummary::from_values(&t.pearson()),
                Err(e) => skip("residuals", &e),
            }
            match blups(&m, &ds) {
                Ok(r) => inputs.intercepts = ResidualSummary::from_values(&r.intercepts()),
                Err(e) => skip("random effects", &e),
            }
        }
        Err(e) => skip("model m3", &e),
    }
    let path = emit_report(&inputs, &out.dir)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let out = Output { dir: cli.out };
    match cli.cmd {
        Cmd::Reshape { input } => {
            let wide = parse_wide(&read(&input)?)?;
            if !wide.ignored_columns.is_empty() {
                eprintln!("ignored columns: {}", wide.ignored_columns.join(", "));
            }
            let long = pivot_longer(&wide);
            let report = validate_long(&long);
            if !report.is_empty() {
                eprint!("{report}");
            }
            out.write("data_long.csv", &long.to_csv())
        }
        Cmd::Eda { input } => {
            let d = load(&input)?;
            out.write("group_week_means.csv", &group_week_means(&d).to_csv())
        }
        Cmd::Fit { input, model } => {
            let d = load(&input)?;
            let (m, _) = fit_with(&model.spec(), &d)?;
            let json = serde_json::to_string_pretty(&m.to_json()).expect("JSON values serialise");
            println!("{json}");
            out.write("fit.json", &format!("{json}\n"))
        }
        Cmd::Compare { input, set } => compare(&load(&input)?, set, &out),
        Cmd::Contrasts {
            input,
            model,
            weeks,
        } => {
            let d = load(&input)?;
            let (first, last) = week_range(&d, weeks)?;
            let (m, _) = fit_with(&model.spec(), &d)?;
            let all: Vec<f64> = (first..=last).map(f64::from).collect();
            let csv = weekly_csv(&weekly_differences(&m, &all)?);
            print!("{csv}");
            out.write("weekly_differences.csv", &csv)
        }
        Cmd::Gains {
            input,
            model,
            weeks,
        } => {
            let d = load(&input)?;
            let (first, last) = week_range(&d, weeks)?;
            let (m, _) = fit_with(&model.spec(), &d)?;
            let csv = gains_csv(&gains(&m, f64::from(first), f64::from(last))?);
            print!("{csv}");
            out.write("gains.csv", &csv)?;
            out.write("coefficients.csv", &coefficient_csv(&coefficient_table(&m)))
        }
        Cmd::Diagnose { input, model } => diagnose(&load(&input)?, &model.spec(), &out),
        Cmd::Simulate { sim } => {
            let d = simulate(&TruthParams::reported(), &sim.layout())?;
            out.write("simulated_long.csv", &d.to_csv())
        }
        Cmd::OracleCheck { seed, draws } => {
            if draws == 0 {
                return Err(Failure::Usage("--draws must be positive".into()));
            }
            let r = equivalence_check(seed, draws, ORACLE_TOL);
            print!("{}", r.to_csv());
            out.write("oracle_check.csv", &r.to_csv())?;
            if r.passed() {
                Ok(())
            } else {
                Err(Failure::Lmm(lmm_core::Error::Oracle(
                    lmm_core::oracle::OracleError::Mismatch(ORACLE_TOL),
                )))
            }
        }
        Cmd::Coverage { sim, reps } => {
            let truth = TruthParams::reported();
            let spec = ModelSpec::preset("m3", StructureKind::RandomIntercept, Method::Ml)
                .expect("preset");
            let contrasts = default_coverage_contrasts(&truth, sim.weeks)?;
            let t = coverage_experiment(&truth, &sim.layout(), &spec, &contrasts, reps)?;
            print!("{}", t.to_csv());
            out.write("coverage.csv", &t.to_csv())
        }
        Cmd::Report { input, weeks } => report(&load(&input)?, weeks, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
