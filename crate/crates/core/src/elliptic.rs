//! Constant-coefficient elliptic solves on the unit disc and the fixed-point
//! iteration for the positive-curvature case.
//!
//! The disc is invariant under rotation, so the grid is aligned with the
//! principal axes of the operator and the stencil has no cross term.

use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::error::{Error, Result};
use crate::field::{GridField, ScalarField};
use crate::iteration::{sup_diff, sup_norm, PicardControl, PicardLog};
use crate::seed::{CaseTag, HDerivs, ScaledProblem, SourceNode};

/// Coefficient matrix of the principal operator: `A : D^2 h = 5 h11 - 6 h12 + 2 h22`.
pub const ELLIPTIC_OPERATOR: [[f64; 2]; 2] = [[5.0, -3.0], [-3.0, 2.0]];

/// Nodes closer than this fraction of a cell to the circle are treated as boundary.
const MIN_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticConfig {
    pub grid_n: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub eps: f64,
    /// Cap on the sup norm of the iterates.
    #[serde(rename = "M")]
    pub m_cap: f64,
    pub eps0: f64,
}

impl Default for EllipticConfig {
    fn default() -> Self {
        EllipticConfig {
            grid_n: 65,
            tol: 1e-12,
            max_iter: 50,
            eps: 0.05,
            m_cap: 1.0,
            eps0: 0.1,
        }
    }
}

impl EllipticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 33 {
            return Err(Error::GridTooCoarse(self.grid_n));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.m_cap > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid elliptic config {self:?}")));
        }
        if !(self.eps > 0.0 && self.eps <= self.eps0 && self.eps < 1.0) {
            return Err(Error::EpsOutOfRange(self.eps));
        }
        Ok(())
    }

    pub fn control(&self) -> PicardControl {
        PicardControl {
            tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }
}

/// Principal axes `Q` (columns, proper rotation) and eigenvalues of `A`.
pub fn principal_axes(a: [[f64; 2]; 2]) -> ([[f64; 2]; 2], [f64; 2]) {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let l1 = 0.5 * tr + disc;
    let l2 = 0.5 * tr - disc;
    let (mut c, mut s) = if a[0][1].abs() > 0.0 {
        (a[0][1], l1 - a[0][0])
    } else if a[0][0] >= a[1][1] {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = c.hypot(s);
    c /= n;
    s /= n;
    ([[c, -s], [s, c]], [l1, l2])
}

#[derive(Clone, Copy, Debug)]
struct Arm {
    /// Distance to the neighbour or to the circle.
    h: f64,
    /// Unknown index of the neighbour, or `None` for a zero boundary value.
    idx: Option<usize>,
}

/// Cartesian grid aligned with the principal axes of the operator, masked to
/// the unit disc, with the factored operator.
///
/// In principal-axis coordinates `x = Q (xi, eta)` the operator is
/// `l1 d_xi^2 + l2 d_eta^2`, discretized with Shortley-Weller arms.
#[derive(Clone, Debug)]
pub struct DiscGrid {
    pub n: usize,
    pub spacing: f64,
    pub frame: [[f64; 2]; 2],
    pub eigenvalues: [f64; 2],
    /// Per grid node: unknown index if interior.
    interior: Vec<Option<usize>>,
    /// Interior nodes as `(i, j)`.
    nodes: Vec<(usize, usize)>,
    /// Arms `[E, W, N, S]` per interior node.
    arms: Vec<[Arm; 4]>,
    lu: BandLu,
}

impl DiscGrid {
    pub fn new(n: usize, operator: [[f64; 2]; 2]) -> Result<DiscGrid> {
        if n < 5 {
            return Err(Error::GridTooCoarse(n));
        }
        let (frame, eig) = principal_axes(operator);
        if !(eig[1] > 0.0) {
            return Err(Error::InvalidConfig("operator is not elliptic".into()));
        }
        let d = 2.0 / (n - 1) as f64;
        let coord = |k: usize| -1.0 + k as f64 * d;
        let dists = |i: usize, j: usize| {
            let (x, y) = (coord(i), coord(j));
            let cx = (1.0 - y * y).max(0.0).sqrt();
            let cy = (1.0 - x * x).max(0.0).sqrt();
            [cx - x, cx + x, cy - y, cy + y]
        };
        let mut interior = vec![None; n * n];
        let mut nodes = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (coord(i), coord(j));
                if x * x + y * y < 1.0 && dists(i, j).iter().all(|v| *v >= MIN_FRACTION * d) {
                    interior[j * n + i] = Some(nodes.len());
                    nodes.push((i, j));
                }
            }
        }
        let mut arms = Vec::with_capacity(nodes.len());
        for &(i, j) in &nodes {
            let ds = dists(i, j);
            let nb = [
                (i + 1 < n).then(|| (i + 1, j)),
                i.checked_sub(1).map(|im| (im, j)),
                (j + 1 < n).then(|| (i, j + 1)),
                j.checked_sub(1).map(|jm| (i, jm)),
            ];
            let mut a = [Arm { h: d, idx: None }; 4];
            for k in 0..4 {
                if ds[k] >= d * (1.0 - 1e-12) {
                    a[k].idx = nb[k].and_then(|(p, q)| interior[q * n + p]);
                } else {
                    a[k].h = ds[k];
                }
            }
            arms.push(a);
        }
        let mut bw = 1;
        for (k, a) in arms.iter().enumerate() {
            for arm in a {
                if let Some(m) = arm.idx {
                    bw = bw.max(k.abs_diff(m));
                }
            }
        }
        let mut mat = BandMatrix::zeros(nodes.len(), bw, bw);
        for (k, a) in arms.iter().enumerate() {
            for (axis, lam) in eig.iter().enumerate() {
                let (p, m) = (a[2 * axis], a[2 * axis + 1]);
                let s = p.h + m.h;
                mat.add(k, k, -2.0 * lam / (p.h * m.h));
                if let Some(q) = p.idx {
                    mat.add(k, q, 2.0 * lam / (p.h * s));
                }
                if let Some(q) = m.idx {
                    mat.add(k, q, 2.0 * lam / (m.h * s));
                }
            }
        }
        let lu = mat
            .factor()
            .map_err(|e| Error::SolverFailure(format!("disc operator factorization: {e}")))?;
        Ok(DiscGrid {
            n,
            spacing: d,
            frame,
            eigenvalues: eig,
            interior,
            nodes,
            arms,
            lu,
        })
    }

    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    /// Principal-axis coordinates of interior node `k`.
    pub fn local_point(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.nodes[k];
        [-1.0 + i as f64 * self.spacing, -1.0 + j as f64 * self.spacing]
    }

    /// Scaled-domain coordinates of interior node `k`.
    pub fn point(&self, k: usize) -> [f64; 2] {
        let l = self.local_point(k);
        let f = &self.frame;
        [f[0][0] * l[0] + f[0][1] * l[1], f[1][0] * l[0] + f[1][1] * l[1]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.unknowns()).map(|k| self.point(k)).collect()
    }

    /// Solves the operator equation for right-hand side values at the interior nodes.
    pub fn solve_values(&self, rhs: &[f64]) -> Vec<f64> {
        self.lu.solve(rhs)
    }

    /// Interior values to a full grid field (NaN outside the disc).
    pub fn to_field(&self, values: &[f64]) -> Result<GridField> {
        let mut all = vec![f64::NAN; self.n * self.n];
        for (k, &(i, j)) in self.nodes.iter().enumerate() {
            all[j * self.n + i] = values[k];
        }
        Ok(GridField::new([self.n, self.n], [-1.0, -1.0], [self.spacing, self.spacing], all)?
            .with_frame(self.frame))
    }

    /// Linear solve with `rhs` sampled at the interior nodes.
    pub fn solve_linear(&self, rhs: &ScalarField) -> Result<ScalarField> {
        let mut b = Vec::with_capacity(self.unknowns());
        for p in self.points() {
            b.push(rhs.value(p)?);
        }
        Ok(ScalarField::Grid(self.to_field(&self.solve_values(&b))?))
    }

    fn arm_value(values: &[f64], arm: &Arm) -> f64 {
        arm.idx.map_or(0.0, |q| values[q])
    }

    /// First and second derivatives along one local axis, with boundary zeros.
    fn axis_derivs(&self, values: &[f64], k: usize, axis: usize) -> (f64, f64) {
        let a = &self.arms[k];
        let (p, m) = (a[2 * axis], a[2 * axis + 1]);
        let (up, um, u0) = (Self::arm_value(values, &p), Self::arm_value(values, &m), values[k]);
        let (hp, hm) = (p.h, m.h);
        let d1 = (hm * hm * up - hp * hp * um + (hp * hp - hm * hm) * u0) / (hp * hm * (hp + hm));
        let d2 = 2.0 * (up / (hp * (hp + hm)) + um / (hm * (hp + hm)) - u0 / (hp * hm));
        (d1, d2)
    }

    /// Derivative along `axis` of a field known only at interior nodes.
    fn interior_derivative(&self, f: &[f64], k: usize, axis: usize) -> f64 {
        let (i, j) = self.nodes[k];
        let d = self.spacing;
        let at = |s: isize| -> Option<f64> {
            let (ii, jj) = if axis == 0 {
                (i as isize + s, j as isize)
            } else {
                (i as isize, j as isize + s)
            };
            if ii < 0 || jj < 0 || ii >= self.n as isize || jj >= self.n as isize {
                return None;
            }
            self.interior[jj as usize * self.n + ii as usize].map(|q| f[q])
        };
        match (at(-2), at(-1), at(1), at(2)) {
            (_, Some(m), Some(p), _) => (p - m) / (2.0 * d),
            (Some(mm), Some(m), None, _) => (3.0 * f[k] - 4.0 * m + mm) / (2.0 * d),
            (None, Some(m), None, _) => (f[k] - m) / d,
            (_, None, Some(p), Some(pp)) => (-3.0 * f[k] + 4.0 * p - pp) / (2.0 * d),
            (_, None, Some(p), None) => (p - f[k]) / d,
            _ => 0.0,
        }
    }

    /// Grid derivatives of `h` at every interior node, in scaled-domain coordinates.
    pub fn derivatives(&self, values: &[f64]) -> Vec<HDerivs> {
        let m = self.unknowns();
        let mut dxi = vec![[0.0; 2]; m];
        let mut dxx = vec![[0.0; 2]; m];
        for k in 0..m {
            for axis in 0..2 {
                let (a, b) = self.axis_derivs(values, k, axis);
                dxi[k][axis] = a;
                dxx[k][axis] = b;
            }
        }
        let eta: Vec<f64> = dxi.iter().map(|v| v[1]).collect();
        let f = &self.frame;
        (0..m)
            .map(|k| {
                let mixed = self.interior_derivative(&eta, k, 0);
                let g = dxi[k];
                let hl = [[dxx[k][0], mixed], [mixed, dxx[k][1]]];
                // grad = Q grad_local, Hess = Q H Q^T
                let d1 = [f[0][0] * g[0] + f[0][1] * g[1], f[1][0] * g[0] + f[1][1] * g[1]];
                let mut hw = [[0.0; 2]; 2];
                for a in 0..2 {
                    for b in 0..2 {
                        let mut s = 0.0;
                        for c in 0..2 {
                            for e in 0..2 {
                                s += f[a][c] * hl[c][e] * f[b][e];
                            }
                        }
                        hw[a][b] = s;
                    }
                }
                HDerivs {
                    d1,
                    d2: [hw[0][0], 0.5 * (hw[0][1] + hw[1][0]), hw[1][1]],
                }
            })
            .collect()
    }
}

/// Outcome of the elliptic fixed-point iteration.
#[derive(Clone, Debug)]
pub struct EllipticSolution {
    pub h: GridField,
    pub values: Vec<f64>,
    pub log: PicardLog,
    pub sup_norm: f64,
    /// Discrete `H^2` seminorm surrogate: RMS of the second derivatives over the disc.
    pub h2_norm: f64,
}

/// Picard iteration `h <- L^-1 (eps^3 G(h))` from `h = 0` with a caller-supplied source.
pub fn picard_with_source<F>(grid: &DiscGrid, cfg: &EllipticConfig, mut source: F) -> Result<EllipticSolution>
where
    F: FnMut(usize, &HDerivs) -> f64,
{
    let ctl = cfg.control();
    ctl.validate()?;
    let m = grid.unknowns();
    let mut h = vec![0.0; m];
    let mut log = PicardLog::default();
    loop {
        let derivs = grid.derivatives(&h);
        let rhs: Vec<f64> = (0..m).map(|k| source(k, &derivs[k])).collect();
        let next = grid.solve_values(&rhs);
        let diff = sup_diff(&next, &h);
        let norm = sup_norm(&next);
        h = next;
        let done = log.record(diff, norm, &ctl)?;
        if norm > cfg.m_cap {
            return Err(Error::SolverFailure(format!(
                "iterate norm {norm:e} exceeds the cap M = {}",
                cfg.m_cap
            )));
        }
        if done {
            break;
        }
    }
    let derivs = grid.derivatives(&h);
    let h2 = (derivs
        .iter()
        .map(|d| d.d2[0].powi(2) + 2.0 * d.d2[1].powi(2) + d.d2[2].powi(2))
        .sum::<f64>()
        / m.max(1) as f64)
        .sqrt();
    Ok(EllipticSolution {
        h: grid.to_field(&h)?,
        sup_norm: sup_norm(&h),
        h2_norm: h2,
        values: h,
        log,
    })
}

/// Fixed-point solve of the scaled elliptic problem.
pub fn picard_solve(problem: &ScaledProblem, cfg: &EllipticConfig) -> Result<EllipticSolution> {
    if problem.case != CaseTag::Elliptic {
        return Err(Error::CaseMismatch {
            expected: CaseTag::Elliptic.as_str().into(),
            got: problem.case.as_str().into(),
        });
    }
    cfg.validate()?;
    if (problem.eps - cfg.eps).abs() > 0.0 {
        return Err(Error::InvalidConfig(format!(
            "problem eps {} differs from config eps {}",
            problem.eps, cfg.eps
        )));
    }
    let grid = DiscGrid::new(cfg.grid_n, ELLIPTIC_OPERATOR)?;
    let nodes: Vec<SourceNode> = grid
        .points()
        .into_iter()
        .map(|p| problem.node(p))
        .collect::<Result<_>>()?;
    let e3 = problem.rhs_power();
    picard_with_source(&grid, cfg, |k, d| e3 * problem.source_at(&nodes[k], d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::metric::Preset;
    use crate::normalization::normalize;
    use crate::seed::{scale_problem, seed_elliptic};

    fn max_error(n: usize, exact: impl Fn([f64; 2]) -> f64, rhs: impl Fn([f64; 2]) -> f64) -> f64 {
        let g = DiscGrid::new(n, ELLIPTIC_OPERATOR).unwrap();
        let pts = g.points();
        let b: Vec<f64> = pts.iter().map(|p| rhs(*p)).collect();
        let h = g.solve_values(&b);
        pts.iter().zip(&h).fold(0.0, |m, (p, v)| m.max((v - exact(*p)).abs()))
    }

    #[test]
    fn axes_diagonalize_operator() {
        let (q, l) = principal_axes(ELLIPTIC_OPERATOR);
        let s = 45f64.sqrt();
        assert!((l[0] - (7.0 + s) / 2.0).abs() < 1e-14);
        assert!((l[1] - (7.0 - s) / 2.0).abs() < 1e-14);
        let a = ELLIPTIC_OPERATOR;
        for r in 0..2 {
            for c in 0..2 {
                let mut v = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        v += q[i][r] * a[i][j] * q[j][c];
                    }
                }
                let e = if r == c { l[r] } else { 0.0 };
                assert!((v - e).abs() < 1e-13);
            }
        }
        assert!((q[0][0] * q[1][1] - q[0][1] * q[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let g = DiscGrid::new(33, ELLIPTIC_OPERATOR).unwrap();
        let h = g.solve_values(&vec![0.0; g.unknowns()]);
        assert!(sup_norm(&h) <= 1e-12);
    }

    #[test]
    fn paraboloid_is_reproduced() {
        // 5(-2) - 6*0 + 2(-2) = -14; every stencil is exact on quadratics
        let e = |n| max_error(n, |p| 1.0 - p[0] * p[0] - p[1] * p[1], |_| -14.0);
        let (a, b) = (e(33), e(65));
        assert!(a < 1e-12 && b < 1e-12, "{a} {b}");
    }

    fn operator_rhs(h: &Expr) -> impl Fn([f64; 2]) -> f64 + '_ {
        move |p| {
            let j = h.jet_at(p, 2).unwrap();
            5.0 * j.derivative(2, 0) - 6.0 * j.derivative(1, 1) + 2.0 * j.derivative(0, 2)
        }
    }

    #[test]
    fn manufactured_solution_converges_second_order() {
        let h = Expr::parse("(1 - x1^2 - x2^2)*exp(x1 + x2/2)").unwrap();
        let exact = |p: [f64; 2]| h.eval(p).unwrap();
        let e65 = max_error(65, exact, operator_rhs(&h));
        let e129 = max_error(129, exact, operator_rhs(&h));
        let order = (e65 / e129).log2();
        assert!((1.7..=2.3).contains(&order), "order {order}: {e65} {e129}");
    }

    #[test]
    fn manufactured_cubic_converges_at_least_second_order() {
        // centred stencils are exact on cubics, so only the boundary arms contribute
        let h = Expr::parse("(1 - x1^2 - x2^2)*(1 + x1)").unwrap();
        let exact = |p: [f64; 2]| h.eval(p).unwrap();
        let e65 = max_error(65, exact, operator_rhs(&h));
        let e129 = max_error(129, exact, operator_rhs(&h));
        let order = (e65 / e129).log2();
        assert!(order >= 1.7, "order {order}: {e65} {e129}");
        assert!(e129 < 1e-5);
    }

    #[test]
    fn symmetric_rhs_gives_symmetric_solution() {
        let g = DiscGrid::new(65, ELLIPTIC_OPERATOR).unwrap();
        let pts = g.points();
        let b: Vec<f64> = pts.iter().map(|p| (p[0] * p[1]).cos() + p[0] * p[0]).collect();
        let h = g.solve_values(&b);
        let field = g.to_field(&h).unwrap();
        let mut worst: f64 = 0.0;
        for (k, p) in pts.iter().enumerate() {
            let (i, j) = field.locate([-p[0], -p[1]]).unwrap();
            worst = worst.max((field.at(i, j) - h[k]).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn grid_derivatives_of_quadratic() {
        let g = DiscGrid::new(65, ELLIPTIC_OPERATOR).unwrap();
        let f = |p: [f64; 2]| 1.0 - p[0] * p[0] - p[1] * p[1];
        let vals: Vec<f64> = g.points().iter().map(|p| f(*p)).collect();
        let d = g.derivatives(&vals);
        for (k, p) in g.points().iter().enumerate() {
            if p[0].hypot(p[1]) < 0.8 {
                assert!((d[k].d1[0] + 2.0 * p[0]).abs() < 1e-10);
                assert!((d[k].d2[0] + 2.0).abs() < 1e-8 && d[k].d2[1].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_source_converges_in_one_iteration() {
        let g = DiscGrid::new(33, ELLIPTIC_OPERATOR).unwrap();
        let sol = picard_with_source(&g, &EllipticConfig::default(), |_, _| 0.0).unwrap();
        assert_eq!(sol.log.iterations(), 1);
        assert_eq!(sol.sup_norm, 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = EllipticConfig {
            grid_n: 17,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(Error::GridTooCoarse(17)));
        let bad = EllipticConfig {
            eps: 0.2,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(Error::EpsOutOfRange(0.2)));
    }

    #[test]
    fn sphere_contracts_at_small_eps() {
        let n = normalize(&Preset::Sphere.patch(), [std::f64::consts::FRAC_PI_2, 0.0], 4.0).unwrap();
        let seed = seed_elliptic(&n.patch, &n.jet).unwrap();
        let problem = scale_problem(&seed, &n.patch, 0.05).unwrap();
        let sol = picard_solve(&problem, &EllipticConfig::default()).unwrap();
        assert!(sol.log.converged);
        assert!(sol.log.ratios.iter().all(|r| *r <= 0.5), "{:?}", sol.log.ratios);
        assert!(sol.sup_norm > 0.0 && sol.sup_norm < 1e-3);
    }

    #[test]
    fn large_eps_is_rejected_by_iteration() {
        let n = normalize(&Preset::Sphere.patch(), [std::f64::consts::FRAC_PI_2, 0.0], 4.0).unwrap();
        let seed = seed_elliptic(&n.patch, &n.jet).unwrap();
        let problem = scale_problem(&seed, &n.patch, 0.9).unwrap();
        let cfg = EllipticConfig {
            eps: 0.9,
            eps0: 1.0,
            grid_n: 33,
            max_iter: 30,
            ..Default::default()
        };
        let out = picard_solve(&problem, &cfg);
        assert!(
            matches!(out, Err(Error::NoContraction { .. }) | Err(Error::MaxIterExceeded(_))),
            "{:?}",
            out.map(|s| s.log)
        );
    }
}
