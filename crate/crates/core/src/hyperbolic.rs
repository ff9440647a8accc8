//! First-order systems for the negative-curvature and clean-sign-change cases.
//!
//! Unknowns `U = (u, v, u~, v~) = (h_t, h_z, h_zt, h_zz)` on `(z, t) in [-1, 1]^2`.
//! Both cases are written as
//!
//! `A^ d_t W + B^ d_z W + w A^ W = e^{-w t} eps^3 (G, 0, G~, 0)`,  `W = e^{-w t} U`,
//!
//! where `A^ = scale * A` and `B^ = scale * B`. `scale` is `1` (negative curvature)
//! or `eps^2` (clean sign change), and so is the weight `w`.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::iteration::{PicardControl, PicardLog};
use crate::seed::{CaseTag, HDerivs, ScaledProblem, SeedPolynomial, SourceNode};

/// Step for differencing the source in the state variables.
pub const STATE_STEP: f64 = 1e-3;
/// Step for differencing the source in `z` at fixed state.
pub const Z_STEP: f64 = 1e-3;
/// Default bound on the `z`-variation of the coefficients before a warning.
pub const ETA_THRESHOLD: f64 = 0.5;

/// Four component grids over a `(z, t)` rectangle, indexed `j * nz + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid {
    pub nz: usize,
    pub nt: usize,
    pub z0: f64,
    pub dz: f64,
    pub t0: f64,
    pub dt: f64,
    pub comps: [Vec<f64>; 4],
}

impl StateGrid {
    pub fn zeros(nz: usize, nt: usize, z: [f64; 2], t: [f64; 2]) -> Result<StateGrid> {
        if nz < 5 || nt < 5 {
            return Err(Error::GridTooCoarse(nz.min(nt)));
        }
        let n = nz * nt;
        Ok(StateGrid {
            nz,
            nt,
            z0: z[0],
            dz: (z[1] - z[0]) / (nz - 1) as f64,
            t0: t[0],
            dt: (t[1] - t[0]) / (nt - 1) as f64,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    /// `n x n` grid on `[-1, 1]^2`.
    pub fn unit(n: usize) -> Result<StateGrid> {
        StateGrid::zeros(n, n, [-1.0, 1.0], [-1.0, 1.0])
    }

    pub fn z(&self, i: usize) -> f64 {
        self.z0 + i as f64 * self.dz
    }

    pub fn t(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nz + i
    }

    pub fn state(&self, i: usize, j: usize) -> [f64; 4] {
        let k = self.idx(i, j);
        [self.comps[0][k], self.comps[1][k], self.comps[2][k], self.comps[3][k]]
    }

    pub fn set_state(&mut self, i: usize, j: usize, s: [f64; 4]) {
        let k = self.idx(i, j);
        for c in 0..4 {
            self.comps[c][k] = s[c];
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) })
    }

    pub fn sup_diff(&self, other: &StateGrid) -> f64 {
        let mut m: f64 = 0.0;
        for c in 0..4 {
            for (a, b) in self.comps[c].iter().zip(&other.comps[c]) {
                let d = (a - b).abs();
                if d.is_nan() {
                    return f64::NAN;
                }
                m = m.max(d);
            }
        }
        m
    }

    /// Discrete `L^2` energy `sum |U|^2 dz dt`.
    pub fn energy(&self) -> f64 {
        self.comps.iter().flat_map(|c| c.iter()).map(|v| v * v).sum::<f64>() * self.dz * self.dt
    }

    /// Multiplies every node by `exp(rate * t)`.
    pub fn reweighted(&self, rate: f64) -> StateGrid {
        let mut out = self.clone();
        for j in 0..self.nt {
            let f = (rate * self.t(j)).exp();
            for i in 0..self.nz {
                let k = self.idx(i, j);
                for c in 0..4 {
                    out.comps[c][k] *= f;
                }
            }
        }
        out
    }

    /// Sub-grid of the columns `first..first + nz`.
    pub fn columns(&self, first: usize, nz: usize) -> StateGrid {
        let mut out = StateGrid {
            nz,
            nt: self.nt,
            z0: self.z(first),
            dz: self.dz,
            t0: self.t0,
            dt: self.dt,
            comps: [vec![0.0; nz * self.nt], vec![0.0; nz * self.nt], vec![0.0; nz * self.nt], vec![0.0; nz * self.nt]],
        };
        for j in 0..self.nt {
            for i in 0..nz {
                out.set_state(i, j, self.state(first + i, j));
            }
        }
        out
    }

    pub fn component_field(&self, c: usize) -> Result<GridField> {
        GridField::new([self.nz, self.nt], [self.z0, self.t0], [self.dz, self.dt], self.comps[c].clone())
    }
}

/// Source-dependent terms at one node: `G`, `G~`, `dG/du~`, `dG/dv~`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SourceTerms {
    pub g: f64,
    pub g_tilde: f64,
    pub d_ut: f64,
    pub d_vt: f64,
}

/// Geometry cached at a node and its two `z` neighbours.
#[derive(Clone, Debug)]
pub struct NodeCache {
    center: SourceNode,
    plus: SourceNode,
    minus: SourceNode,
}

/// Coefficients `A^` (diagonal), the nonzero entries of `B^`, and the forcing at one node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeCoeffs {
    pub a: [f64; 4],
    /// `(B11, B12, B33, B34)`; `B21 = B12`, `B43 = B34`, all others zero.
    pub b: [f64; 4],
    /// Right-hand side `e^{-w t} eps^3 (G, 0, G~, 0)`.
    pub f: [f64; 4],
}

impl NodeCoeffs {
    pub fn a_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&self.a.into())
    }

    pub fn b_matrix(&self) -> Matrix4<f64> {
        let [b11, b12, b33, b34] = self.b;
        Matrix4::new(
            b11, b12, 0.0, 0.0, //
            b12, 0.0, 0.0, 0.0, //
            0.0, 0.0, b33, b34, //
            0.0, 0.0, b34, 0.0,
        )
    }

    /// Largest `|eigenvalue|` of `A^-1 B`.
    pub fn max_speed(&self) -> f64 {
        let block = |p: f64, q: f64, r: f64| {
            let disc = (p * p + 4.0 * q * r).max(0.0).sqrt();
            (0.5 * (p + disc)).abs().max((0.5 * (p - disc)).abs())
        };
        let [b11, b12, b33, b34] = self.b;
        let [a1, a2, a3, a4] = self.a;
        block(b11 / a1, b12 / a1, b12 / a2).max(block(b33 / a3, b34 / a3, b34 / a4))
    }
}

/// The first-order system of one of the two hyperbolic-type cases.
#[derive(Clone, Debug)]
pub struct FirstOrderSystem<'a> {
    pub case: CaseTag,
    pub eps: f64,
    /// Exponent `w` of the change of variables `W = e^{-w t} U`.
    pub weight: f64,
    /// `A = A^ / scale`, `B = B^ / scale`.
    pub scale: f64,
    /// `(c_tt, c_zt, c_zz)` at `t = 0`.
    pub c0: [f64; 3],
    /// Slopes of `(c_tt, c_zt, c_zz)` in `eps^2 t`.
    pub c1: [f64; 3],
    pub problem: Option<&'a ScaledProblem>,
}

pub fn assemble_negk(problem: &ScaledProblem) -> Result<FirstOrderSystem<'_>> {
    if problem.case != CaseTag::Hyperbolic {
        return Err(Error::CaseMismatch {
            expected: CaseTag::Hyperbolic.as_str().into(),
            got: problem.case.as_str().into(),
        });
    }
    Ok(FirstOrderSystem {
        problem: Some(problem),
        ..FirstOrderSystem::negk_unforced(problem.eps)
    })
}

pub fn assemble_mixed(problem: &ScaledProblem) -> Result<FirstOrderSystem<'_>> {
    if problem.case != CaseTag::Mixed {
        return Err(Error::CaseMismatch {
            expected: CaseTag::Mixed.as_str().into(),
            got: problem.case.as_str().into(),
        });
    }
    Ok(FirstOrderSystem {
        problem: Some(problem),
        ..FirstOrderSystem::mixed_unforced(&problem.seed, problem.eps)?
    })
}

impl<'a> FirstOrderSystem<'a> {
    /// Negative-curvature system without source terms (`eps = 0` allowed).
    pub fn negk_unforced(eps: f64) -> FirstOrderSystem<'static> {
        FirstOrderSystem {
            case: CaseTag::Hyperbolic,
            eps,
            weight: 1.0,
            scale: 1.0,
            c0: [1.0, 0.0, -1.0],
            c1: [0.0; 3],
            problem: None,
        }
    }

    /// Clean-sign-change system for a mixed seed, without source terms (`eps = 0` allowed).
    pub fn mixed_unforced(seed: &SeedPolynomial, eps: f64) -> Result<FirstOrderSystem<'static>> {
        if seed.case != CaseTag::Mixed {
            return Err(Error::CaseMismatch {
                expected: CaseTag::Mixed.as_str().into(),
                got: seed.case.as_str().into(),
            });
        }
        let m = seed.positivity_margins();
        if !(m[0] > 0.0 && m[1] > 0.0) {
            return Err(Error::PositivityFailure(format!("seed margins {m:?}")));
        }
        let g = seed.gamma;
        Ok(FirstOrderSystem {
            case: CaseTag::Mixed,
            eps,
            weight: eps * eps,
            scale: eps * eps,
            c0: [g * g, g, 1.0],
            c1: seed.mixed_slopes(),
            problem: None,
        })
    }

    fn is_mixed(&self) -> bool {
        self.case == CaseTag::Mixed
    }

    /// `eps^k / scale` without dividing by zero at `eps = 0`.
    pub fn eps_over_scale(&self, k: i32) -> f64 {
        if self.is_mixed() {
            self.eps.powi(k - 2)
        } else {
            self.eps.powi(k)
        }
    }

    /// `(c_tt, c_zt, c_zz)` at time `t`.
    pub fn principal(&self, t: f64) -> [f64; 3] {
        let s = self.eps * self.eps * t;
        [0, 1, 2].map(|k| self.c0[k] + self.c1[k] * s)
    }

    pub fn node_cache(&self, z: f64, t: f64) -> Result<Option<NodeCache>> {
        match self.problem {
            Some(p) if self.eps > 0.0 => Ok(Some(NodeCache {
                center: p.node([z, t])?,
                plus: p.node([z + Z_STEP, t])?,
                minus: p.node([z - Z_STEP, t])?,
            })),
            _ => Ok(None),
        }
    }

    /// Source terms at a node for the unweighted state `U`.
    pub fn source_terms(&self, cache: Option<&NodeCache>, u: [f64; 4]) -> SourceTerms {
        self.source_terms_with_step(cache, u, STATE_STEP)
    }

    fn source_terms_with_step(&self, cache: Option<&NodeCache>, u: [f64; 4], step: f64) -> SourceTerms {
        let (Some(p), Some(c)) = (self.problem, cache) else {
            return SourceTerms::default();
        };
        let hd = |s: [f64; 4]| HDerivs {
            d1: [s[1], s[0]],
            d2: [s[3], s[2], 0.0],
        };
        let g_at = |s: [f64; 4]| p.source_at(&c.center, &hd(s));
        let partial = |k: usize| {
            let mut a = u;
            let mut b = u;
            a[k] += step;
            b[k] -= step;
            (g_at(a) - g_at(b)) / (2.0 * step)
        };
        let g = g_at(u);
        let dz = (p.source_at(&c.plus, &hd(u)) - p.source_at(&c.minus, &hd(u))) / (2.0 * Z_STEP);
        let (du, dv, dut, dvt) = (partial(0), partial(1), partial(2), partial(3));
        SourceTerms {
            g,
            g_tilde: dz + u[2] * du + u[3] * dv,
            d_ut: dut,
            d_vt: dvt,
        }
    }

    /// Scaled coefficients `A^`, `B^` and forcing at time `t`.
    pub fn coeffs(&self, t: f64, s: &SourceTerms) -> NodeCoeffs {
        let [ctt, czt, czz] = self.principal(t);
        let e3 = self.eps.powi(3);
        let czz_g = czz - e3 * s.d_vt;
        let damp = (-self.weight * t).exp() * e3;
        NodeCoeffs {
            a: [ctt, -czz, ctt, -czz_g],
            b: [-2.0 * czt, czz, -(2.0 * czt + e3 * s.d_ut), czz_g],
            f: [damp * s.g, 0.0, damp * s.g_tilde, 0.0],
        }
    }

    /// Physical `A = A^ / scale` (for `eps > 0`).
    pub fn a_physical(&self, c: &NodeCoeffs) -> Matrix4<f64> {
        c.a_matrix() / self.scale
    }

    pub fn b_physical(&self, c: &NodeCoeffs) -> Matrix4<f64> {
        c.b_matrix() / self.scale
    }

    /// Physical `C = w A`.
    pub fn c_physical(&self, c: &NodeCoeffs) -> Matrix4<f64> {
        c.a_matrix() * (self.weight / self.scale)
    }

    fn caches(&self, grid: &StateGrid) -> Result<Vec<Option<NodeCache>>> {
        let mut out = Vec::with_capacity(grid.nz * grid.nt);
        for j in 0..grid.nt {
            for i in 0..grid.nz {
                out.push(self.node_cache(grid.z(i), grid.t(j))?);
            }
        }
        Ok(out)
    }

    /// Source terms at every node for the unweighted state `u`.
    fn all_terms(&self, grid: &StateGrid, caches: &[Option<NodeCache>]) -> Vec<SourceTerms> {
        (0..grid.nt)
            .flat_map(|j| (0..grid.nz).map(move |i| (i, j)))
            .map(|(i, j)| self.source_terms(caches[grid.idx(i, j)].as_ref(), grid.state(i, j)))
            .collect()
    }
}

/// `Theta = C + C^T - d_t A - d_z B` at every node of `state`, from centred
/// differences of the source-dependent parts and the exact `t`-slope of the rest.
pub fn theta_matrices(sys: &FirstOrderSystem, state: &StateGrid) -> Result<Vec<Matrix4<f64>>> {
    let caches = sys.caches(state)?;
    let terms = sys.all_terms(state, &caches);
    let (nz, nt) = (state.nz, state.nt);
    let e2s = sys.eps_over_scale(2);
    let e3s = sys.eps_over_scale(3);
    let ws = if sys.is_mixed() { 1.0 } else { sys.weight / sys.scale };
    let diff = |f: &dyn Fn(usize) -> f64, k: usize, n: usize, h: f64| -> f64 {
        if n < 2 {
            0.0
        } else if k == 0 {
            (f(1) - f(0)) / h
        } else if k == n - 1 {
            (f(n - 1) - f(n - 2)) / h
        } else {
            (f(k + 1) - f(k - 1)) / (2.0 * h)
        }
    };
    let mut out = Vec::with_capacity(nz * nt);
    for j in 0..nt {
        for i in 0..nz {
            let s = &terms[state.idx(i, j)];
            let [ctt, czt, czz] = sys.principal(state.t(j));
            let _ = czt;
            let a_g = |k: usize| -> f64 { terms[k].d_vt };
            let dt_dvt = diff(&|jj| a_g(state.idx(i, jj)), j, nt, state.dt);
            let dz_dut = diff(&|ii| terms[state.idx(ii, j)].d_ut, i, nz, state.dz);
            let dz_dvt = diff(&|ii| terms[state.idx(ii, j)].d_vt, i, nz, state.dz);
            let e3 = sys.eps.powi(3);
            let a_hat = [ctt, -czz, ctt, -(czz - e3 * s.d_vt)];
            let [k_tt, _, k_zz] = sys.c1;
            // (1/scale) d_t A^ and (1/scale) d_z B^
            let dta = [e2s * k_tt, -e2s * k_zz, e2s * k_tt, -e2s * k_zz + e3s * dt_dvt];
            let mut th = Matrix4::zeros();
            for c in 0..4 {
                // C + C^T = 2 (w / scale) A^
                th[(c, c)] = 2.0 * ws * a_hat[c] * if sys.is_mixed() { 1.0 } else { 1.0 } - dta[c];
            }
            th[(2, 2)] += e3s * dz_dut;
            th[(2, 3)] += e3s * dz_dvt;
            th[(3, 2)] += e3s * dz_dvt;
            out.push(th);
        }
    }
    Ok(out)
}

/// Smallest eigenvalue of `Theta` over the grid.
pub fn theta_min_eig(sys: &FirstOrderSystem, state: &StateGrid) -> Result<f64> {
    let mats = theta_matrices(sys, state)?;
    let mut m = f64::INFINITY;
    for th in mats {
        let e = th.symmetric_eigenvalues().min();
        m = m.min(e);
    }
    Ok(m)
}

/// Solver settings shared by the two hyperbolic paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicConfig {
    pub grid_n: usize,
    pub tol: f64,
    /// Relative stopping tolerance, above the roundoff floor of the global solves.
    pub rtol: f64,
    pub max_iter: usize,
    /// Extra `z` range on each side of the marching domain.
    pub pad: f64,
    pub eta_threshold: f64,
    /// CFL target `dt * max speed / dz`.
    pub cfl: f64,
}

impl Default for HyperbolicConfig {
    fn default() -> Self {
        HyperbolicConfig {
            grid_n: 65,
            tol: 1e-12,
            rtol: 1e-8,
            max_iter: 50,
            pad: 2.25,
            eta_threshold: ETA_THRESHOLD,
            cfl: 0.5,
        }
    }
}

impl HyperbolicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 9 || self.grid_n % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid_n must be odd and at least 9, got {}",
                self.grid_n
            )));
        }
        if !(self.tol > 0.0) || !(self.rtol >= 0.0) || self.max_iter == 0 || !(self.pad >= 0.0) || !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidConfig(format!("invalid hyperbolic config {self:?}")));
        }
        Ok(())
    }

    fn control(&self) -> PicardControl {
        PicardControl {
            tol: self.tol,
            rtol: self.rtol,
            max_iter: self.max_iter,
        }
    }
}

/// Marching diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CflRecord {
    pub dt_grid: f64,
    pub dt_step: f64,
    pub substeps: usize,
    pub max_speed: f64,
    pub cfl: f64,
}

/// Converged state of one of the hyperbolic solvers on `[-1, 1]^2`.
#[derive(Clone, Debug)]
pub struct HyperbolicSolution {
    /// Weighted unknowns `W = e^{-w t} U`.
    pub weighted: StateGrid,
    /// Unweighted `U`.
    pub state: StateGrid,
    pub log: PicardLog,
    pub cfl: Option<CflRecord>,
    /// `sup |d_z A| + sup |d_z B|` over the grid.
    pub eta: f64,
    pub eta_warning: bool,
}

fn coefficient_levels(sys: &FirstOrderSystem, grid: &StateGrid, terms: &[SourceTerms]) -> Vec<NodeCoeffs> {
    (0..grid.nt)
        .flat_map(|j| (0..grid.nz).map(move |i| (i, j)))
        .map(|(i, j)| sys.coeffs(grid.t(j), &terms[grid.idx(i, j)]))
        .collect()
}

fn eta_surrogate(sys: &FirstOrderSystem, grid: &StateGrid, coeffs: &[NodeCoeffs]) -> f64 {
    if sys.eps == 0.0 {
        return 0.0;
    }
    let mut da: f64 = 0.0;
    let mut db: f64 = 0.0;
    for j in 0..grid.nt {
        for i in 1..grid.nz - 1 {
            let p = &coeffs[grid.idx(i + 1, j)];
            let m = &coeffs[grid.idx(i - 1, j)];
            for c in 0..4 {
                da = da.max((p.a[c] - m.a[c]).abs() / (2.0 * grid.dz * sys.scale));
                db = db.max((p.b[c] - m.b[c]).abs() / (2.0 * grid.dz * sys.scale));
            }
        }
    }
    da + db
}

/// `A^-1 (B^ d) ` for the block structure, applied to a 4-vector difference.
#[inline]
fn flux(c: &NodeCoeffs, d: &[f64; 4]) -> [f64; 4] {
    let [b11, b12, b33, b34] = c.b;
    [
        (b11 * d[0] + b12 * d[1]) / c.a[0],
        (b12 * d[0]) / c.a[1],
        (b33 * d[2] + b34 * d[3]) / c.a[2],
        (b34 * d[2]) / c.a[3],
    ]
}

fn lerp_coeffs(a: &NodeCoeffs, b: &NodeCoeffs, s: f64) -> NodeCoeffs {
    let mix = |x: &[f64; 4], y: &[f64; 4]| [0, 1, 2, 3].map(|k| x[k] + s * (y[k] - x[k]));
    NodeCoeffs {
        a: mix(&a.a, &b.a),
        b: mix(&a.b, &b.b),
        f: mix(&a.f, &b.f),
    }
}

fn avg_coeffs(a: &NodeCoeffs, b: &NodeCoeffs) -> NodeCoeffs {
    lerp_coeffs(a, b, 0.5)
}

/// One linear Cauchy march with frozen coefficients, from `W(., t0) = 0`.
/// Richtmyer two-step Lax-Wendroff with the damping and forcing as sources.
fn march_linear(
    sys: &FirstOrderSystem,
    grid: &StateGrid,
    coeffs: &[NodeCoeffs],
    cfl_target: f64,
) -> Result<(StateGrid, CflRecord)> {
    let (nz, nt) = (grid.nz, grid.nt);
    let max_speed = coeffs.iter().fold(0.0f64, |m, c| m.max(c.max_speed()));
    if !max_speed.is_finite() {
        return Err(Error::CflViolation {
            dt: grid.dt,
            limit: 0.0,
        });
    }
    let limit = cfl_target * grid.dz / max_speed.max(1e-300);
    let substeps = ((grid.dt / limit).ceil() as usize).max(1);
    let tau = grid.dt / substeps as f64;
    if tau > limit * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt: tau, limit });
    }
    let w = sys.weight;
    let r = tau / grid.dz;
    let mut out = StateGrid { comps: Default::default(), ..grid.clone() };
    out.comps = [vec![0.0; nz * nt], vec![0.0; nz * nt], vec![0.0; nz * nt], vec![0.0; nz * nt]];
    let mut cur = vec![[0.0f64; 4]; nz];
    let mut half = vec![[0.0f64; 4]; nz - 1];
    for j in 0..nt - 1 {
        let lo = &coeffs[j * nz..(j + 1) * nz];
        let hi = &coeffs[(j + 1) * nz..(j + 2) * nz];
        for s in 0..substeps {
            let s0 = s as f64 / substeps as f64;
            let sh = (s as f64 + 0.5) / substeps as f64;
            // predictor at (i + 1/2, n + 1/2)
            for i in 0..nz - 1 {
                let c = avg_coeffs(&lerp_coeffs(&lo[i], &hi[i], s0), &lerp_coeffs(&lo[i + 1], &hi[i + 1], s0));
                let mut d = [0.0; 4];
                let mut m = [0.0; 4];
                for k in 0..4 {
                    d[k] = cur[i + 1][k] - cur[i][k];
                    m[k] = 0.5 * (cur[i][k] + cur[i + 1][k]);
                }
                let fl = flux(&c, &d);
                for k in 0..4 {
                    let src = -w * m[k] + c.f[k] / c.a[k];
                    half[i][k] = m[k] - 0.5 * r * fl[k] + 0.5 * tau * src;
                }
            }
            // corrector at (i, n + 1)
            let mut next = vec![[0.0f64; 4]; nz];
            for i in 1..nz - 1 {
                let c = lerp_coeffs(&lo[i], &hi[i], sh);
                let mut d = [0.0; 4];
                let mut m = [0.0; 4];
                for k in 0..4 {
                    d[k] = half[i][k] - half[i - 1][k];
                    m[k] = 0.5 * (half[i][k] + half[i - 1][k]);
                }
                let fl = flux(&c, &d);
                for k in 0..4 {
                    let src = -w * m[k] + c.f[k] / c.a[k];
                    next[i][k] = cur[i][k] - r * fl[k] + tau * src;
                }
            }
            next[0] = next[1];
            next[nz - 1] = next[nz - 2];
            cur = next;
        }
        for (i, v) in cur.iter().enumerate() {
            out.set_state(i, j + 1, *v);
        }
    }
    Ok((
        out,
        CflRecord {
            dt_grid: grid.dt,
            dt_step: tau,
            substeps,
            max_speed,
            cfl: tau * max_speed / grid.dz,
        },
    ))
}

/// Cauchy problem with zero data at `t = -1` for the negative-curvature system,
/// with an outer fixed-point loop over the nonlinear source. The `z` range is
/// padded by `cfg.pad` on each side so the edge closure stays outside the
/// domain of dependence of `[-1, 1]^2`.
pub fn march_cauchy(sys: &FirstOrderSystem, cfg: &HyperbolicConfig) -> Result<HyperbolicSolution> {
    cfg.validate()?;
    if sys.case != CaseTag::Hyperbolic {
        return Err(Error::CaseMismatch {
            expected: CaseTag::Hyperbolic.as_str().into(),
            got: sys.case.as_str().into(),
        });
    }
    if !(sys.eps > 0.0) {
        return Err(Error::EpsOutOfRange(sys.eps));
    }
    let n = cfg.grid_n;
    let dz = 2.0 / (n - 1) as f64;
    let pad_cells = (cfg.pad / dz).ceil() as usize;
    let nz = n + 2 * pad_cells;
    let zmax = 1.0 + pad_cells as f64 * dz;
    let mut u = StateGrid::zeros(nz, n, [-zmax, zmax], [-1.0, 1.0])?;
    let caches = sys.caches(&u)?;
    let ctl = cfg.control();
    let mut log = PicardLog::default();
    let mut cfl;
    let mut coeffs;
    loop {
        let terms = sys.all_terms(&u, &caches);
        coeffs = coefficient_levels(sys, &u, &terms);
        let (wgt, rec) = march_linear(sys, &u, &coeffs, cfg.cfl)?;
        cfl = rec;
        let next = wgt.reweighted(sys.weight);
        let core_next = next.columns(pad_cells, n);
        let core_prev = u.columns(pad_cells, n);
        let diff = core_next.sup_diff(&core_prev);
        let norm = core_next.sup_abs();
        u = next;
        if log.record(diff, norm, &ctl)? {
            break;
        }
    }
    let core = u.columns(pad_cells, n);
    let core_coeffs: Vec<NodeCoeffs> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| coeffs[j * nz + i + pad_cells])
        .collect();
    let eta = eta_surrogate(sys, &core, &core_coeffs);
    Ok(HyperbolicSolution {
        weighted: core.reweighted(-sys.weight),
        state: core,
        log,
        cfl: Some(cfl),
        eta,
        eta_warning: eta > cfg.eta_threshold,
    })
}

/// Which side of `[-1, 1]` carries the zero data of each component pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundarySplit {
    /// `u, u~` vanish at `t = -1`, `v, v~` at `t = +1`.
    Favourable,
    /// The reverse assignment, used as a negative control.
    Flipped,
}

/// Assembles the global system of one component pair.
/// `block` is 0 for `(u, v)` and 1 for `(u~, v~)`.
fn assemble_block(
    grid: &StateGrid,
    coeffs: &[NodeCoeffs],
    weight: f64,
    block: usize,
    split: BoundarySplit,
) -> BandMatrix {
    let n = grid.nz;
    let nt = grid.nt;
    let dim = 2 * n * nt;
    let bw = 2 * n + 5;
    let mut m = BandMatrix::zeros(dim, bw, bw);
    let row = |i: usize, j: usize, c: usize| 2 * (j * n + i) + c;
    let (ia, ib) = (2 * block, 2 * block + 1);
    // z-derivative weights at column i
    let dz_stencil = |i: usize| -> [(usize, f64); 3] {
        let h2 = 2.0 * grid.dz;
        if i == 0 {
            [(0, -3.0 / h2), (1, 4.0 / h2), (2, -1.0 / h2)]
        } else if i == n - 1 {
            [(n - 1, 3.0 / h2), (n - 2, -4.0 / h2), (n - 3, 1.0 / h2)]
        } else {
            [(i - 1, -1.0 / h2), (i + 1, 1.0 / h2), (i, 0.0)]
        }
    };
    let (a_first, b_first) = match split {
        BoundarySplit::Favourable => (true, false),
        BoundarySplit::Flipped => (false, true),
    };
    for j in 0..nt {
        for i in 0..n {
            let c = &coeffs[grid.idx(i, j)];
            let (aa, ab) = (c.a[ia], c.a[ib]);
            let (baa, bab) = if block == 0 { (c.b[0], c.b[1]) } else { (c.b[2], c.b[3]) };
            let dzs = dz_stencil(i);
            // component a: zero data on its inflow side, one-sided in t from it
            let r = row(i, j, 0);
            let a_boundary = if a_first { j == 0 } else { j == nt - 1 };
            if a_boundary {
                m.add(r, r, 1.0);
            } else {
                let jn = if a_first { j - 1 } else { j + 1 };
                let sgn = if a_first { 1.0 } else { -1.0 };
                m.add(r, row(i, j, 0), sgn * aa / grid.dt + weight * aa);
                m.add(r, row(i, jn, 0), -sgn * aa / grid.dt);
                for (ii, w) in dzs {
                    if w != 0.0 {
                        m.add(r, row(ii, j, 0), baa * w);
                        m.add(r, row(ii, j, 1), bab * w);
                    }
                }
            }
            let r = row(i, j, 1);
            let b_boundary = if b_first { j == 0 } else { j == nt - 1 };
            if b_boundary {
                m.add(r, r, 1.0);
            } else {
                let jn = if b_first { j - 1 } else { j + 1 };
                let sgn = if b_first { 1.0 } else { -1.0 };
                m.add(r, row(i, j, 1), sgn * ab / grid.dt + weight * ab);
                m.add(r, row(i, jn, 1), -sgn * ab / grid.dt);
                for (ii, w) in dzs {
                    if w != 0.0 {
                        m.add(r, row(ii, j, 0), bab * w);
                    }
                }
            }
        }
    }
    m
}

const REFINE_STEPS: usize = 1;

/// Factored block together with its matrix, for one step of iterative refinement.
struct BlockSolver {
    m: BandMatrix,
    lu: BandLu,
}

impl BlockSolver {
    fn new(m: BandMatrix) -> Result<BlockSolver> {
        let lu = m.clone().factor()?;
        Ok(BlockSolver { m, lu })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.lu.solve(b);
        for _ in 0..REFINE_STEPS {
            let ax = self.m.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let dx = self.lu.solve(&r);
            for (x, d) in x.iter_mut().zip(&dx) {
                *x += d;
            }
        }
        x
    }
}

fn block_rhs(grid: &StateGrid, coeffs: &[NodeCoeffs], block: usize, split: BoundarySplit) -> Vec<f64> {
    let n = grid.nz;
    let nt = grid.nt;
    let mut b = vec![0.0; 2 * n * nt];
    let a_bnd = match split {
        BoundarySplit::Favourable => 0,
        BoundarySplit::Flipped => nt - 1,
    };
    for j in 0..nt {
        if j == a_bnd {
            continue;
        }
        for i in 0..n {
            b[2 * (j * n + i)] = coeffs[grid.idx(i, j)].f[2 * block];
        }
    }
    b
}

fn check_mixed(sys: &FirstOrderSystem) -> Result<()> {
    if sys.case != CaseTag::Mixed {
        return Err(Error::CaseMismatch {
            expected: CaseTag::Mixed.as_str().into(),
            got: sys.case.as_str().into(),
        });
    }
    if !(sys.eps > 0.0) {
        return Err(Error::EpsOutOfRange(sys.eps));
    }
    Ok(())
}

/// One linear solve of both component pairs with frozen coefficients.
/// `uv` reuses a factored `(u, v)` block when given.
fn split_linear_solve(
    sys: &FirstOrderSystem,
    grid: &StateGrid,
    coeffs: &[NodeCoeffs],
    split: BoundarySplit,
    uv: &BlockSolver,
) -> Result<StateGrid> {
    let n = grid.nz;
    let x_uv = uv.solve(&block_rhs(grid, coeffs, 0, split));
    let tilde = BlockSolver::new(assemble_block(grid, coeffs, sys.weight, 1, split))?;
    let x_t = tilde.solve(&block_rhs(grid, coeffs, 1, split));
    let mut w = StateGrid::unit(n)?;
    for k in 0..n * n {
        w.comps[0][k] = x_uv[2 * k];
        w.comps[1][k] = x_uv[2 * k + 1];
        w.comps[2][k] = x_t[2 * k];
        w.comps[3][k] = x_t[2 * k + 1];
    }
    let (a_row, b_row) = match split {
        BoundarySplit::Favourable => (0, n - 1),
        BoundarySplit::Flipped => (n - 1, 0),
    };
    for i in 0..n {
        let (ka, kb) = (w.idx(i, a_row), w.idx(i, b_row));
        w.comps[0][ka] = 0.0;
        w.comps[2][ka] = 0.0;
        w.comps[1][kb] = 0.0;
        w.comps[3][kb] = 0.0;
    }
    Ok(w)
}

/// Two-sided boundary problem for the clean-sign-change system, solved as one
/// global linear system per component pair and fixed-point iteration:
/// centred differences in `z` (one-sided second order at `|z| = 1`), upwind
/// differences in `t` from the side carrying each component's zero data.
pub fn solve_split_bvp(
    sys: &FirstOrderSystem,
    cfg: &HyperbolicConfig,
    split: BoundarySplit,
) -> Result<HyperbolicSolution> {
    cfg.validate()?;
    check_mixed(sys)?;
    let n = cfg.grid_n;
    let mut u = StateGrid::unit(n)?;
    let caches = sys.caches(&u)?;
    let ctl = cfg.control();
    let mut log = PicardLog::default();
    let mut uv: Option<BlockSolver> = None;
    let mut coeffs;
    let mut weighted;
    loop {
        let terms = sys.all_terms(&u, &caches);
        coeffs = coefficient_levels(sys, &u, &terms);
        if uv.is_none() {
            uv = Some(BlockSolver::new(assemble_block(&u, &coeffs, sys.weight, 0, split))?);
        }
        weighted = split_linear_solve(sys, &u, &coeffs, split, uv.as_ref().unwrap())?;
        let next = weighted.reweighted(sys.weight);
        let diff = next.sup_diff(&u);
        let norm = next.sup_abs();
        u = next;
        if log.record(diff, norm, &ctl)? {
            break;
        }
    }
    let eta = eta_surrogate(sys, &u, &coeffs);
    Ok(HyperbolicSolution {
        weighted,
        state: u,
        log,
        cfl: None,
        eta,
        eta_warning: eta > cfg.eta_threshold,
    })
}

/// Energies of the favourable and the flipped boundary assignment, both solved
/// with the coefficients frozen at the converged favourable state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitControl {
    pub favourable: f64,
    pub flipped: f64,
}

impl SplitControl {
    pub fn ratio(&self) -> f64 {
        self.flipped / self.favourable
    }
}

pub fn flipped_split_control(sys: &FirstOrderSystem, solution: &HyperbolicSolution) -> Result<SplitControl> {
    check_mixed(sys)?;
    let grid = &solution.state;
    let caches = sys.caches(grid)?;
    let terms = sys.all_terms(grid, &caches);
    let coeffs = coefficient_levels(sys, grid, &terms);
    let mut energy = [0.0; 2];
    for (e, split) in energy.iter_mut().zip([BoundarySplit::Favourable, BoundarySplit::Flipped]) {
        let uv = BlockSolver::new(assemble_block(grid, &coeffs, sys.weight, 0, split))?;
        *e = split_linear_solve(sys, grid, &coeffs, split, &uv)?.energy();
    }
    Ok(SplitControl {
        favourable: energy[0],
        flipped: energy[1],
    })
}

/// Reconstructed `h` together with the compatibility defect `sup |d_z u - d_t v|`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub h: GridField,
    pub defect: f64,
    pub bound: f64,
}

/// `h(z, t) = int_0^z v(s, -1) ds + int_{-1}^t u(z, s) ds` by the trapezoidal rule,
/// for an unweighted state on `[-1, 1]^2` with a node at `z = 0`.
pub fn reconstruct_h(state: &StateGrid, tol: f64) -> Result<Reconstruction> {
    let (nz, nt) = (state.nz, state.nt);
    let i0 = (-state.z0 / state.dz).round();
    if i0 < 0.0 || i0 as usize >= nz || (state.z0 + i0 * state.dz).abs() > 1e-12 {
        return Err(Error::InvalidConfig("reconstruction needs a grid node at z = 0".into()));
    }
    let i0 = i0 as usize;
    let mut h = vec![0.0; nz * nt];
    let v = |i: usize, j: usize| state.comps[1][state.idx(i, j)];
    let u = |i: usize, j: usize| state.comps[0][state.idx(i, j)];
    for i in i0 + 1..nz {
        h[i] = h[i - 1] + 0.5 * state.dz * (v(i - 1, 0) + v(i, 0));
    }
    for i in (0..i0).rev() {
        h[i] = h[i + 1] - 0.5 * state.dz * (v(i, 0) + v(i + 1, 0));
    }
    for j in 1..nt {
        for i in 0..nz {
            h[j * nz + i] = h[(j - 1) * nz + i] + 0.5 * state.dt * (u(i, j - 1) + u(i, j));
        }
    }
    let mut defect: f64 = 0.0;
    for j in 1..nt - 1 {
        for i in 1..nz - 1 {
            let uz = (u(i + 1, j) - u(i - 1, j)) / (2.0 * state.dz);
            let vt = (v(i, j + 1) - v(i, j - 1)) / (2.0 * state.dt);
            defect = defect.max((uz - vt).abs());
        }
    }
    let bound = 10.0 * (state.dz * state.dz + tol);
    if !(defect <= bound) {
        return Err(Error::CompatibilityDefect { defect, bound });
    }
    Ok(Reconstruction {
        h: GridField::new([nz, nt], [state.z0, state.t0], [state.dz, state.dt], h)?,
        defect,
        bound,
    })
}
