use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asymdir::field::write_csv;
use asymdir::metric::{classify, CurvatureClass, CurvatureTag, CLASSIFY_TOL};
use asymdir::normalization::{normalize, pushforward_vector};
use asymdir::seed::{rescale_chart, seed_order_check};
use asymdir::verify::{convergence_study, full_pipeline, PipelineConfig, PipelineOutput, REPORT_SCHEMA};
use asymdir::{
    seed_elliptic, seed_hyperbolic, seed_mixed, stream_vector, CaseTag, Convention, Error, MetricPatch, Preset,
    Rect, SeedPolynomial,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const EXIT_USAGE: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_IO: u8 = 5;

/// Local asymptotic directions via the degenerate Monge-Ampere equation.
#[derive(Parser, Debug)]
#[command(name = "asymdir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify the curvature at a point.
    Classify(Common),
    /// Normalize the chart and build the approximate polynomial solution.
    Seed(SeedArgs),
    /// Run the full pipeline and report residuals.
    Solve(SolveArgs),
    /// Residual table over lists of epsilon and grid sizes.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Preset name (euclidean, sphere, pseudosphere, cleansign) or "g11=...;g12=...;g22=...".
    #[arg(long)]
    metric: String,
    /// Base point "x1,x2"; defaults to the preset's base point.
    #[arg(long, allow_hyphen_values = true)]
    point: Option<String>,
    /// Output JSON path (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "R")]
    r: Option<f64>,
}

#[derive(Args, Debug)]
struct SeedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 50)]
    max_iter: usize,
    /// Stream-function convention for dumped vector fields.
    #[arg(long, default_value = "metric_weighted")]
    convention: String,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 65)]
    grid: usize,
    /// Directory for CSV dumps of h, the first-order state and X.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated epsilon values.
    #[arg(long, default_value = "0.1,0.05")]
    epsilon: String,
    /// Comma-separated grid sizes.
    #[arg(long, default_value = "65,129")]
    grid: String,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DegenerateCase => EXIT_DEGENERATE,
        Error::Io(_) => EXIT_IO,
        Error::Parse { .. } | Error::InvalidConfig(_) | Error::EpsOutOfRange(_) | Error::GridTooCoarse(_) => EXIT_USAGE,
        _ => EXIT_SOLVER,
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    #[serde(skip_serializing_if = "Option::is_none")]
    schema: Option<&'a str>,
    command: &'a str,
    metric: &'a str,
    point: [f64; 2],
    #[serde(flatten)]
    body: T,
}

fn parse_point(s: &str) -> Result<[f64; 2], Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Failure::Usage(format!("--point expects 'x1,x2', got '{s}'")));
    }
    let mut p = [0.0; 2];
    for (v, t) in p.iter_mut().zip(&parts) {
        *v = t
            .parse()
            .map_err(|_| Failure::Usage(format!("--point: '{t}' is not a number")))?;
    }
    Ok(p)
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("{flag}: '{t}' is not valid")))
        })
        .collect()
}

fn resolve_metric(common: &Common) -> Result<(MetricPatch, [f64; 2]), Failure> {
    if let Some(p) = Preset::by_name(&common.metric) {
        let point = match &common.point {
            Some(s) => parse_point(s)?,
            None => p.base_point(),
        };
        return Ok((p.patch(), point));
    }
    let point = match &common.point {
        Some(s) => parse_point(s)?,
        None => return Err(Failure::Usage("--point is required for expression metrics".into())),
    };
    let domain = Rect::new([point[0] - 2.0, point[1] - 2.0], [point[0] + 2.0, point[1] + 2.0]);
    let patch = MetricPatch::parse(&common.metric, domain).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((patch, point))
}

fn emit(out: &Option<PathBuf>, json: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, format!("{json}\n")).map_err(|e| Failure::Core(e.into())),
        None => {
            let mut so = std::io::stdout().lock();
            writeln!(so, "{json}").map_err(|e| Failure::Core(e.into()))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

#[derive(Serialize)]
struct ClassifyBody {
    #[serde(flatten)]
    class: CurvatureClass,
}

fn cmd_classify(c: &Common) -> Result<u8, Failure> {
    let (patch, point) = resolve_metric(c)?;
    let class = classify(&patch, point, CLASSIFY_TOL)?;
    let env = Envelope {
        schema: Some(REPORT_SCHEMA),
        command: "classify",
        metric: &c.metric,
        point,
        body: ClassifyBody { class },
    };
    emit(&c.out, &to_json(&env))?;
    Ok(if class.tag == CurvatureTag::Degenerate { EXIT_DEGENERATE } else { 0 })
}

#[derive(Serialize)]
struct NamedCubic {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

#[derive(Serialize)]
struct SeedBody {
    case: CaseTag,
    seed: SeedPolynomial,
    cubic: NamedCubic,
    residual_order: f64,
    positivity_margins: Option<[f64; 2]>,
}

fn cmd_seed(a: &SeedArgs) -> Result<u8, Failure> {
    let (patch, point) = resolve_metric(&a.common)?;
    let norm = normalize(&patch, point, 4.0)?;
    let case = CaseTag::from_curvature(norm.class.tag)?;
    let seed = match case {
        CaseTag::Elliptic => seed_elliptic(&norm.patch, &norm.jet)?,
        CaseTag::Hyperbolic => seed_hyperbolic(&norm.patch, &norm.jet)?,
        CaseTag::Mixed => seed_mixed(&norm.patch, &norm.jet, a.overrides.gamma, a.overrides.r)?,
    };
    let chart = if seed.chart_scale != 1.0 {
        rescale_chart(&norm.patch, seed.chart_scale)
    } else {
        norm.patch.clone()
    };
    let [ca, cb, cc, cd] = seed.cubic;
    let body = SeedBody {
        case,
        residual_order: seed_order_check(&seed, &chart)?,
        positivity_margins: (case == CaseTag::Mixed).then(|| seed.positivity_margins()),
        cubic: NamedCubic { a: ca, b: cb, c: cc, d: cd },
        seed,
    };
    let env = Envelope {
        schema: Some(REPORT_SCHEMA),
        command: "seed",
        metric: &a.common.metric,
        point,
        body,
    };
    emit(&a.common.out, &to_json(&env))?;
    Ok(0)
}

fn pipeline_config(o: &Overrides, s: &SolverArgs, eps: f64, grid: usize) -> Result<PipelineConfig, Failure> {
    if Convention::parse(&s.convention).is_none() {
        return Err(Failure::Usage(format!(
            "--convention must be metric_weighted or paper_coordinates, got '{}'",
            s.convention
        )));
    }
    Ok(PipelineConfig {
        eps,
        grid_n: grid,
        tol: s.tol,
        max_iter: s.max_iter,
        gamma: o.gamma,
        r: o.r,
        ..Default::default()
    })
}

fn dump(dir: &Path, out: &PipelineOutput, convention: Convention) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let h = &out.h;
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for j in 0..h.shape[1] {
        for i in 0..h.shape[0] {
            pts.push(h.node(i, j));
            vals.push(h.at(i, j));
        }
    }
    write_csv(fs::File::create(dir.join("h.csv"))?, &["h"], &pts, &[&vals])?;
    if let Some(s) = &out.state {
        let pts: Vec<[f64; 2]> = (0..s.nt)
            .flat_map(|j| (0..s.nz).map(move |i| [s.z(i), s.t(j)]))
            .collect();
        let cols: Vec<&[f64]> = s.comps.iter().map(|c| c.as_slice()).collect();
        write_csv(fs::File::create(dir.join("state.csv"))?, &["u", "v", "u_z", "v_z"], &pts, &cols)?;
    }
    let x = stream_vector(&out.f, &out.patch, convention);
    let mut xp = Vec::with_capacity(out.points.len());
    let mut c1 = Vec::with_capacity(out.points.len());
    let mut c2 = Vec::with_capacity(out.points.len());
    for &y in &out.points {
        let (p, v) = pushforward_vector(&out.map, y, x.value(y)?);
        xp.push(p);
        c1.push(v[0]);
        c2.push(v[1]);
    }
    write_csv(fs::File::create(dir.join("x.csv"))?, &["X1", "X2"], &xp, &[&c1, &c2])?;
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> Result<u8, Failure> {
    let (patch, point) = resolve_metric(&a.common)?;
    let cfg = pipeline_config(&a.overrides, &a.solver, a.epsilon, a.grid)?;
    let out = full_pipeline(&patch, point, &cfg)?;
    if let Some(dir) = &a.dump {
        let conv = Convention::parse(&a.solver.convention).expect("validated");
        dump(dir, &out, conv)?;
    }
    if let Some(h) = &out.report.hyperbolic {
        if h.eta_warning {
            eprintln!("warning: coefficient z-variation {:.3e} exceeds the threshold", h.eta);
        }
    }
    let env = Envelope {
        schema: None,
        command: "solve",
        metric: &a.common.metric,
        point,
        body: &out.report,
    };
    emit(&a.common.out, &to_json(&env))?;
    Ok(0)
}

fn cmd_study(a: &StudyArgs) -> Result<u8, Failure> {
    let (patch, point) = resolve_metric(&a.common)?;
    let eps: Vec<f64> = parse_list("--epsilon", &a.epsilon)?;
    let grids: Vec<usize> = parse_list("--grid", &a.grid)?;
    let cfg = pipeline_config(&a.overrides, &a.solver, eps[0], grids[0])?;
    let table = convergence_study(&patch, point, &eps, &grids, &cfg)?;
    let env = Envelope {
        schema: None,
        command: "study",
        metric: &a.common.metric,
        point,
        body: &table,
    };
    emit(&a.common.out, &to_json(&env))?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Classify(c) => cmd_classify(c),
        Command::Seed(a) => cmd_seed(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Study(a) => cmd_study(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
