//! End-to-end pipeline, residual reporting and convergence studies.
//!
//! Residuals are evaluated in the normalized chart at the solution grid nodes
//! with `|x~| <= 0.8`, i.e. on the physical patch `|x - x0| <= 0.8 eps^p`.

use serde::{Deserialize, Serialize};

use crate::elliptic::{picard_solve, EllipticConfig};
use crate::error::{Error, Result};
use crate::field::{Convention, FdAccuracy, GridField, Polynomial, ScalarField, VectorField2};
use crate::hyperbolic::{
    assemble_mixed, assemble_negk, flipped_split_control, march_cauchy, reconstruct_h, solve_split_bvp,
    theta_min_eig, BoundarySplit, CflRecord, HyperbolicConfig, SplitControl, StateGrid,
};
use crate::iteration::PicardLog;
use crate::metric::{classify, MetricPatch, CLASSIFY_TOL};
use crate::normalization::{normalize, pushforward_vector, ChartMap};
use crate::operator::{g_operator, ma_residual, stream_vector, vector_residuals};
use crate::seed::{
    rescale_chart, scale_problem, seed_elliptic, seed_hyperbolic, seed_mixed, CaseTag, ScaledProblem,
    SeedPolynomial,
};

pub const REPORT_SCHEMA: &str = "asymdir-report/1";
/// Fraction of the scaled domain on which residuals are measured.
pub const RESIDUAL_RADIUS: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub eps: f64,
    pub grid_n: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Target curvature slope for clean-sign-change normalization.
    pub target_r: f64,
    pub gamma: Option<f64>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    /// Upper end of the admissible `eps` range for the elliptic solver.
    pub eps0: f64,
    /// Also solve the flipped boundary assignment (clean sign change only).
    pub negative_control: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            eps: 0.05,
            grid_n: 65,
            tol: 1e-12,
            max_iter: 50,
            target_r: 4.0,
            gamma: None,
            r: None,
            eps0: 0.1,
            negative_control: false,
        }
    }
}

/// Regularity bookkeeping: solution in `H^m` for data in `H^r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sobolev {
    pub m: u32,
    pub r: u32,
}

impl Sobolev {
    pub fn for_case(case: CaseTag) -> Sobolev {
        match case {
            CaseTag::Elliptic => Sobolev { m: 4, r: 6 },
            CaseTag::Hyperbolic => Sobolev { m: 3, r: 8 },
            CaseTag::Mixed => Sobolev { m: 3, r: 9 },
        }
    }

    pub fn is_consistent(&self, case: CaseTag) -> bool {
        match case {
            CaseTag::Elliptic => self.r > 5 && self.m + 2 == self.r,
            CaseTag::Hyperbolic => self.r >= 8 && self.m + 5 == self.r,
            CaseTag::Mixed => self.r >= 9 && self.m + 6 == self.r,
        }
    }
}

/// `sup |div_g X|` and `sup |div_g(nabla_X X)|` for one stream-function convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorResiduals {
    pub div: f64,
    pub div_nabla: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `sup |G(f~)|`.
    pub shifted: f64,
    /// `sup |MA(f)|` with `f = x1 + f~`.
    pub monge_ampere: f64,
    pub metric_weighted: VectorResiduals,
    pub paper_coordinates: VectorResiduals,
    /// `sup |X|` (metric-weighted) of the solution and of the bare seed.
    pub x_sup: f64,
    pub seed_x_sup: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicDiagnostics {
    pub theta_min: f64,
    pub eta: f64,
    pub eta_warning: bool,
    pub compatibility_defect: f64,
    pub defect_bound: f64,
    pub cfl: Option<CflRecord>,
    pub energy: f64,
    pub negative_control: Option<SplitControl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema: String,
    pub config: PipelineConfig,
    pub case: CaseTag,
    pub x0: [f64; 2],
    pub normalization: ChartMap,
    pub seed: SeedPolynomial,
    pub eps: f64,
    pub grid: usize,
    pub p: i32,
    pub q: i32,
    pub iterations: usize,
    pub picard: PicardLog,
    pub h_sup: f64,
    pub hyperbolic: Option<HyperbolicDiagnostics>,
    pub residuals: Residuals,
    pub sobolev: Sobolev,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Report together with the fields it was computed from.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: SolveReport,
    /// Normalized patch the fields live on.
    pub patch: MetricPatch,
    /// Map from normalized to original coordinates.
    pub map: ChartMap,
    /// `h` on its grid in scaled coordinates.
    pub h: GridField,
    pub state: Option<StateGrid>,
    pub ftilde: ScalarField,
    pub f: ScalarField,
    pub x: VectorField2,
    /// Residual sample points (normalized chart).
    pub points: Vec<[f64; 2]>,
}

impl PipelineOutput {
    /// `X` at the residual points, pushed forward to the original chart.
    pub fn pushforward_x(&self) -> Result<Vec<([f64; 2], [f64; 2])>> {
        self.points
            .iter()
            .map(|&y| Ok(pushforward_vector(&self.map, y, self.x.value(y)?)))
            .collect()
    }
}

fn solution_field(h: &GridField, seed: &SeedPolynomial, eps: f64, p: i32, q: i32) -> ScalarField {
    let grid = ScalarField::Grid(h.clone().with_accuracy(FdAccuracy::Fourth));
    ScalarField::Sum(vec![
        seed.field(),
        ScalarField::Rescaled {
            inner: Box::new(grid),
            space: eps.powi(p),
            amp: eps.powi(q),
        },
    ])
}

/// Grid nodes of `h` inside `|x~| <= RESIDUAL_RADIUS`, mapped to `x = eps^p x~`.
fn residual_points(h: &GridField, scale: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for j in 0..h.shape[1] {
        for i in 0..h.shape[0] {
            let xt = h.node(i, j);
            if xt[0].hypot(xt[1]) <= RESIDUAL_RADIUS + 1e-12 {
                out.push([scale * xt[0], scale * xt[1]]);
            }
        }
    }
    out
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn residuals(
    ftilde: &ScalarField,
    seed: &SeedPolynomial,
    patch: &MetricPatch,
    points: &[[f64; 2]],
) -> Result<(Residuals, ScalarField, VectorField2)> {
    let f = ScalarField::Sum(vec![ScalarField::Poly(Polynomial::new(vec![(1, 0, 1.0)])), ftilde.clone()]);
    let shifted = g_operator(ftilde, patch, points)?.sup();
    let monge_ampere = ma_residual(&f, patch, points)?.sup();
    let mut conv = [VectorResiduals::default(); 2];
    for (c, convention) in conv.iter_mut().zip([Convention::MetricWeighted, Convention::PaperCoordinates]) {
        let x = stream_vector(&f, patch, convention);
        let (d, dd) = vector_residuals(&x, patch, points)?;
        *c = VectorResiduals {
            div: d.sup(),
            div_nabla: dd.sup(),
        };
    }
    let x = stream_vector(&f, patch, Convention::MetricWeighted);
    let seed_f = ScalarField::Sum(vec![ScalarField::Poly(Polynomial::new(vec![(1, 0, 1.0)])), seed.field()]);
    let seed_x = stream_vector(&seed_f, patch, Convention::MetricWeighted);
    let mut xs = Vec::with_capacity(points.len());
    let mut sxs = Vec::with_capacity(points.len());
    for &p in points {
        let v = x.value(p)?;
        let s = seed_x.value(p)?;
        xs.push(v[0].hypot(v[1]));
        sxs.push(s[0].hypot(s[1]));
    }
    Ok((
        Residuals {
            shifted,
            monge_ampere,
            metric_weighted: conv[0],
            paper_coordinates: conv[1],
            x_sup: sup_abs(&xs),
            seed_x_sup: sup_abs(&sxs),
            points: points.len(),
        },
        f,
        x,
    ))
}

struct Solved {
    h: GridField,
    log: PicardLog,
    state: Option<StateGrid>,
    hyperbolic: Option<HyperbolicDiagnostics>,
}

fn solve_elliptic(problem: &ScaledProblem, cfg: &PipelineConfig) -> Result<Solved> {
    let ecfg = EllipticConfig {
        grid_n: cfg.grid_n,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        eps: cfg.eps,
        eps0: cfg.eps0,
        ..Default::default()
    };
    let sol = picard_solve(problem, &ecfg)?;
    Ok(Solved {
        h: sol.h,
        log: sol.log,
        state: None,
        hyperbolic: None,
    })
}

fn solve_hyperbolic(problem: &ScaledProblem, cfg: &PipelineConfig) -> Result<Solved> {
    let hcfg = HyperbolicConfig {
        grid_n: cfg.grid_n,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        ..Default::default()
    };
    let (sol, sys) = if problem.case == CaseTag::Mixed {
        let sys = assemble_mixed(problem)?;
        (solve_split_bvp(&sys, &hcfg, BoundarySplit::Favourable)?, sys)
    } else {
        let sys = assemble_negk(problem)?;
        (march_cauchy(&sys, &hcfg)?, sys)
    };
    let rec = reconstruct_h(&sol.state, cfg.tol)?;
    let control = if cfg.negative_control && problem.case == CaseTag::Mixed {
        Some(flipped_split_control(&sys, &sol)?)
    } else {
        None
    };
    let diag = HyperbolicDiagnostics {
        theta_min: theta_min_eig(&sys, &sol.state)?,
        eta: sol.eta,
        eta_warning: sol.eta_warning,
        compatibility_defect: rec.defect,
        defect_bound: rec.bound,
        cfl: sol.cfl,
        energy: sol.weighted.energy(),
        negative_control: control,
    };
    Ok(Solved {
        h: rec.h,
        log: sol.log,
        state: Some(sol.state),
        hyperbolic: Some(diag),
    })
}

/// Runs classification, normalization, seeding, scaling, the case solver,
/// reconstruction and all residual checks.
pub fn full_pipeline(patch: &MetricPatch, x0: [f64; 2], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let cls = classify(patch, x0, CLASSIFY_TOL)?;
    let case = CaseTag::from_curvature(cls.tag)?;
    let norm = normalize(patch, x0, cfg.target_r)?;
    let seed = match case {
        CaseTag::Elliptic => seed_elliptic(&norm.patch, &norm.jet)?,
        CaseTag::Hyperbolic => seed_hyperbolic(&norm.patch, &norm.jet)?,
        CaseTag::Mixed => seed_mixed(&norm.patch, &norm.jet, cfg.gamma, cfg.r)?,
    };
    let (npatch, map) = if seed.chart_scale != 1.0 {
        let lambda = seed.chart_scale;
        (
            rescale_chart(&norm.patch, lambda),
            norm.map.then_linear(&ChartMap::metric_scaling(lambda))?,
        )
    } else {
        (norm.patch.clone(), norm.map.clone())
    };
    let problem = scale_problem(&seed, &npatch, cfg.eps)?;
    let solved = match case {
        CaseTag::Elliptic => solve_elliptic(&problem, cfg)?,
        _ => solve_hyperbolic(&problem, cfg)?,
    };
    let ftilde = solution_field(&solved.h, &seed, cfg.eps, problem.p, problem.q);
    let points = residual_points(&solved.h, cfg.eps.powi(problem.p));
    if points.is_empty() {
        return Err(Error::GridTooCoarse(cfg.grid_n));
    }
    let (res, f, x) = residuals(&ftilde, &seed, &npatch, &points)?;
    let report = SolveReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        case,
        x0,
        normalization: map.clone(),
        seed,
        eps: cfg.eps,
        grid: cfg.grid_n,
        p: problem.p,
        q: problem.q,
        iterations: solved.log.iterations(),
        picard: solved.log,
        h_sup: solved.h.sup_abs(),
        hyperbolic: solved.hyperbolic,
        residuals: res,
        sobolev: Sobolev::for_case(case),
    };
    Ok(PipelineOutput {
        report,
        patch: npatch,
        map,
        h: solved.h,
        state: solved.state,
        ftilde,
        f,
        x,
        points,
    })
}

/// One study cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub eps: f64,
    pub grid: usize,
    pub div_nabla: f64,
    pub shifted: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub schema: String,
    pub case: CaseTag,
    pub eps: Vec<f64>,
    pub grids: Vec<usize>,
    /// `cells[i * grids.len() + j]` for `eps[i]`, `grids[j]`.
    pub cells: Vec<StudyCell>,
}

impl StudyTable {
    pub fn cell(&self, eps_idx: usize, grid_idx: usize) -> &StudyCell {
        &self.cells[eps_idx * self.grids.len() + grid_idx]
    }

    /// Whether the residual is nonincreasing along the listed `eps` (assumed
    /// decreasing) at the finest grid, up to `slack`.
    pub fn monotone_in_eps(&self, slack: f64) -> bool {
        let g = self.grids.len() - 1;
        (1..self.eps.len()).all(|i| self.cell(i, g).div_nabla <= slack * self.cell(i - 1, g).div_nabla)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes")
    }
}

pub fn convergence_study(
    patch: &MetricPatch,
    x0: [f64; 2],
    eps_list: &[f64],
    grid_list: &[usize],
    base: &PipelineConfig,
) -> Result<StudyTable> {
    if eps_list.len() < 2 || grid_list.len() < 2 {
        return Err(Error::InvalidConfig("a study needs at least two eps values and two grids".into()));
    }
    let mut cells = Vec::with_capacity(eps_list.len() * grid_list.len());
    let mut case = None;
    for &eps in eps_list {
        for &grid_n in grid_list {
            let cfg = PipelineConfig {
                eps,
                grid_n,
                ..base.clone()
            };
            let out = full_pipeline(patch, x0, &cfg)?;
            case = Some(out.report.case);
            cells.push(StudyCell {
                eps,
                grid: grid_n,
                div_nabla: out.report.residuals.metric_weighted.div_nabla,
                shifted: out.report.residuals.shifted,
                iterations: out.report.iterations,
            });
        }
    }
    Ok(StudyTable {
        schema: REPORT_SCHEMA.into(),
        case: case.expect("nonempty study"),
        eps: eps_list.to_vec(),
        grids: grid_list.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::Preset;

    fn run(p: Preset, eps: f64, n: usize) -> PipelineOutput {
        let cfg = PipelineConfig {
            eps,
            grid_n: n,
            ..Default::default()
        };
        full_pipeline(&p.patch(), p.base_point(), &cfg).unwrap()
    }

    #[test]
    fn sphere_pipeline() {
        let out = run(Preset::Sphere, 0.05, 65);
        let r = &out.report;
        assert_eq!(r.case, CaseTag::Elliptic);
        assert!(r.picard.ratios.iter().all(|x| *x <= 0.5));
        assert!(r.residuals.metric_weighted.div <= 1e-8, "{:?}", r.residuals);
        assert!(r.residuals.metric_weighted.div_nabla.is_finite());
        assert!(r.residuals.x_sup >= 0.5 * r.residuals.seed_x_sup);
        assert!(r.sobolev.is_consistent(r.case));
        assert_eq!((r.p, r.q), (4, 11));
    }

    #[test]
    fn pseudosphere_pipeline() {
        let out = run(Preset::Pseudosphere, 0.05, 33);
        let r = &out.report;
        assert_eq!(r.case, CaseTag::Hyperbolic);
        assert!(r.hyperbolic.as_ref().unwrap().theta_min >= 1.9);
        assert!(r.residuals.metric_weighted.div <= 1e-8, "{:?}", r.residuals);
    }

    #[test]
    fn cleansign_pipeline() {
        let out = run(Preset::CleanSign, 0.05, 33);
        let r = &out.report;
        assert_eq!(r.case, CaseTag::Mixed);
        let h = r.hyperbolic.as_ref().unwrap();
        assert!(h.compatibility_defect <= h.defect_bound);
        assert!(h.cfl.is_none());
        assert_eq!((r.p, r.q), (2, 7));
    }

    #[test]
    fn both_routes_agree() {
        // MA(x1 + f~) and G(f~) are the same function computed two ways
        let out = run(Preset::Sphere, 0.05, 33);
        let r = &out.report.residuals;
        assert!((r.shifted - r.monge_ampere).abs() <= 1e-12 * (1.0 + r.shifted), "{r:?}");
    }

    #[test]
    fn degenerate_is_rejected() {
        let cfg = PipelineConfig::default();
        let e = full_pipeline(&Preset::Euclidean.patch(), [0.0, 0.0], &cfg).unwrap_err();
        assert_eq!(e, Error::DegenerateCase);
    }

    #[test]
    fn report_is_deterministic() {
        let a = run(Preset::Pseudosphere, 0.1, 17).report.to_json();
        let b = run(Preset::Pseudosphere, 0.1, 17).report.to_json();
        assert_eq!(a, b);
        assert!(a.contains(REPORT_SCHEMA));
    }

    #[test]
    fn pushforward_lands_in_original_chart() {
        let out = run(Preset::Sphere, 0.1, 33);
        let pf = out.pushforward_x().unwrap();
        let x0 = Preset::Sphere.base_point();
        for (x, _) in &pf {
            assert!((x[0] - x0[0]).hypot(x[1] - x0[1]) < 1e-3);
        }
    }

    #[test]
    fn sobolev_bookkeeping() {
        for c in [CaseTag::Elliptic, CaseTag::Hyperbolic, CaseTag::Mixed] {
            assert!(Sobolev::for_case(c).is_consistent(c));
        }
        assert!(!Sobolev { m: 3, r: 5 }.is_consistent(CaseTag::Elliptic));
    }

    #[test]
    fn study_needs_two_entries() {
        let p = Preset::Sphere;
        let e = convergence_study(&p.patch(), p.base_point(), &[0.1], &[33, 65], &PipelineConfig::default());
        assert!(matches!(e, Err(Error::InvalidConfig(_))));
    }
}
