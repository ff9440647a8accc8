//! Seed polynomials, the scaled problem, and the implicit reduced source.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Polynomial, ScalarField};
use crate::jet::Jet;
use crate::metric::{christoffel_jet, CurvatureTag, LocalGeometry, MetricJet, MetricPatch, Rect};
use crate::normalization::ChartMap;
use crate::operator::g_operator_jet;

/// Tolerance for the normalization checks done before building a seed.
pub const NORMALIZED_TOL: f64 = 1e-8;

/// Upper end of the doubling ladders used to pick `gamma` and `R`.
pub const LADDER_CAP: f64 = 1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    Elliptic,
    Hyperbolic,
    #[serde(rename = "CleanSignChange")]
    Mixed,
}

impl CaseTag {
    pub fn from_curvature(tag: CurvatureTag) -> Result<CaseTag> {
        match tag {
            CurvatureTag::Elliptic => Ok(CaseTag::Elliptic),
            CurvatureTag::Hyperbolic => Ok(CaseTag::Hyperbolic),
            CurvatureTag::CleanSignChange => Ok(CaseTag::Mixed),
            CurvatureTag::Degenerate => Err(Error::DegenerateCase),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::Elliptic => "Elliptic",
            CaseTag::Hyperbolic => "Hyperbolic",
            CaseTag::Mixed => "CleanSignChange",
        }
    }

    /// Space and amplitude powers `(p, q)` of `x = eps^p x~`, `f~ = h^ + eps^q h`.
    pub fn powers(self) -> (i32, i32) {
        match self {
            CaseTag::Elliptic | CaseTag::Hyperbolic => (4, 11),
            CaseTag::Mixed => (2, 7),
        }
    }
}

impl std::fmt::Display for CaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Approximate polynomial solution `h^` of the shifted equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPolynomial {
    pub case: CaseTag,
    /// Coefficients of `x1^2, x1 x2, x2^2`.
    pub quad: [f64; 3],
    /// `(a, b, c, d)`: coefficients of `x1^3, x1^2 x2, x1 x2^2, x2^3`.
    pub cubic: [f64; 4],
    /// Coefficients of `x1^4, x1^3 x2, x1^2 x2^2, x1 x2^3, x2^4`.
    pub quartic: [f64; 5],
    pub gamma: f64,
    #[serde(rename = "R")]
    pub r: f64,
    /// Extra metric scaling `lambda` the seed assumes on top of its input chart.
    pub chart_scale: f64,
    /// Linear Christoffel coefficients `(s1, t1, s2, t2, s4, t4)` of the chart the seed lives on.
    pub jets: [f64; 6],
    /// `g^11(0) det g(0)` of that chart.
    pub g11_det: f64,
}

impl SeedPolynomial {
    pub fn polynomial(&self) -> Polynomial {
        self.polynomial_from(2)
    }

    /// Terms of degree `>= min_degree`.
    pub fn polynomial_from(&self, min_degree: usize) -> Polynomial {
        let mut terms = Vec::new();
        let mut push = |deg: usize, coeffs: &[f64]| {
            if deg >= min_degree {
                for (k, c) in coeffs.iter().enumerate() {
                    if *c != 0.0 {
                        terms.push((deg - k, k, *c));
                    }
                }
            }
        };
        push(2, &self.quad);
        push(3, &self.cubic);
        push(4, &self.quartic);
        Polynomial::new(terms)
    }

    pub fn field(&self) -> ScalarField {
        ScalarField::Poly(self.polynomial())
    }

    pub fn jet_at(&self, p: [f64; 2], order: usize) -> Jet {
        self.polynomial().jet_at(p, order)
    }

    /// Hessian of the quadratic part.
    pub fn hessian0(&self) -> [[f64; 2]; 2] {
        [
            [2.0 * self.quad[0], self.quad[1]],
            [self.quad[1], 2.0 * self.quad[2]],
        ]
    }

    /// `(2b - t1, 2c - t2, 6d - t4)`: slopes in `x2` of the mixed principal coefficients.
    pub fn mixed_slopes(&self) -> [f64; 3] {
        let [_, b, c, d] = self.cubic;
        let [_, t1, _, t2, _, t4] = self.jets;
        [2.0 * b - t1, 2.0 * c - t2, 6.0 * d - t4]
    }

    /// Margins of `2 gamma^2 - (2b - t1) > 0` and `(6d - t4) - 2 > 0`.
    pub fn positivity_margins(&self) -> [f64; 2] {
        let s = self.mixed_slopes();
        [2.0 * self.gamma * self.gamma - s[0], s[2] - 2.0]
    }
}

fn jets_of(jet: &MetricJet) -> [f64; 6] {
    [jet.s1, jet.t1, jet.s2, jet.t2, jet.s4, jet.t4]
}

fn check_christoffel_free(jet: &MetricJet) -> Result<()> {
    let n = jet.gamma0_norm();
    if n > NORMALIZED_TOL {
        return Err(Error::NotNormalized(format!("max |Gamma(0)| = {n:e}")));
    }
    Ok(())
}

fn check_constant_curvature_form(jet: &MetricJet, expected: CurvatureTag) -> Result<()> {
    check_christoffel_free(jet)?;
    let sign_ok = match expected {
        CurvatureTag::Elliptic => jet.k0 > 0.0 && jet.r > 0.0,
        _ => jet.k0 < 0.0 && jet.r < 0.0,
    };
    if !sign_ok {
        return Err(Error::NotNormalized(format!(
            "curvature sign does not match the {expected} case (K(0) = {}, R = {})",
            jet.k0, jet.r
        )));
    }
    let r = if expected == CurvatureTag::Elliptic {
        1.0 / jet.g11_det()
    } else {
        -1.0 / jet.g11_det()
    };
    if (jet.k0 - 2.0 * r).abs() > NORMALIZED_TOL * jet.k0.abs() {
        return Err(Error::NotNormalized(format!("K(0) = {} but 2R = {}", jet.k0, 2.0 * r)));
    }
    Ok(())
}

/// Taylor coefficients of `G(h^)` at the origin, as a jet of `order`.
pub fn seed_residual_jet(seed: &SeedPolynomial, patch: &MetricPatch, order: usize) -> Result<Jet> {
    let geo = LocalGeometry::at(patch, [0.0, 0.0], order + 2)?;
    Ok(g_operator_jet(&seed.jet_at([0.0, 0.0], order + 2), &geo))
}

/// Minimum-norm solution of the affine system `v(c) = 0`, where `v` maps the
/// unknown coefficients to selected Taylor coefficients of `G(h^)`.
fn min_norm_affine<F>(n_unknowns: usize, mut residual: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let zero = vec![0.0; n_unknowns];
    let v0 = residual(&zero)?;
    let m = v0.len();
    let mut mat = DMatrix::<f64>::zeros(m, n_unknowns);
    for k in 0..n_unknowns {
        let mut e = zero.clone();
        e[k] = 1.0;
        let vk = residual(&e)?;
        for i in 0..m {
            mat[(i, k)] = vk[i] - v0[i];
        }
    }
    let rhs = -DVector::from_vec(v0);
    let svd = mat.svd(true, true);
    let smax = svd.singular_values.max();
    let sol = svd
        .solve(&rhs, 1e-12 * smax.max(1e-300))
        .map_err(|e| Error::SolverFailure(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

fn solve_cubic(seed: &mut SeedPolynomial, patch: &MetricPatch) -> Result<()> {
    let geo = LocalGeometry::at(patch, [0.0, 0.0], 3)?;
    let base = seed.clone();
    let c = min_norm_affine(4, |c| {
        let mut s = base.clone();
        s.cubic.copy_from_slice(c);
        let r = g_operator_jet(&s.jet_at([0.0, 0.0], 3), &geo);
        Ok(vec![r.coeff(1, 0), r.coeff(0, 1)])
    })?;
    seed.cubic.copy_from_slice(&c);
    Ok(())
}

fn base_seed(case: CaseTag, quad: [f64; 3], jet: &MetricJet) -> SeedPolynomial {
    SeedPolynomial {
        case,
        quad,
        cubic: [0.0; 4],
        quartic: [0.0; 5],
        gamma: 0.0,
        r: jet.r,
        chart_scale: 1.0,
        jets: jets_of(jet),
        g11_det: jet.g11_det(),
    }
}

/// Elliptic seed `x1^2 + 3 x1 x2 + 5/2 x2^2 + P3` on a normalized chart.
pub fn seed_elliptic(patch: &MetricPatch, jet: &MetricJet) -> Result<SeedPolynomial> {
    check_constant_curvature_form(jet, CurvatureTag::Elliptic)?;
    let mut seed = base_seed(CaseTag::Elliptic, [1.0, 3.0, 2.5], jet);
    solve_cubic(&mut seed, patch)?;
    Ok(seed)
}

/// Hyperbolic seed `x1^2/2 - x2^2/2 + P3` on a normalized chart.
pub fn seed_hyperbolic(patch: &MetricPatch, jet: &MetricJet) -> Result<SeedPolynomial> {
    check_constant_curvature_form(jet, CurvatureTag::Hyperbolic)?;
    let mut seed = base_seed(CaseTag::Hyperbolic, [0.5, 0.0, -0.5], jet);
    solve_cubic(&mut seed, patch)?;
    Ok(seed)
}

fn ladder(given: Option<f64>, start: f64) -> Vec<f64> {
    match given {
        Some(v) => vec![v],
        None => {
            let mut out = Vec::new();
            let mut v = start;
            while v <= LADDER_CAP {
                out.push(v);
                v *= 2.0;
            }
            out
        }
    }
}

/// Cubic coefficients `(a, b, c, d)` of the mixed seed for given jets.
fn mixed_cubic(jets: &[f64; 6], g11_det: f64, gamma: f64, r: f64) -> [f64; 4] {
    let [s1, t1, s2, t2, s4, t4] = *jets;
    let a = s1 / 6.0;
    let b = s2 / 2.0;
    let c = s4 / 2.0;
    let rhs = r * g11_det - (2.0 * b - t1) + 2.0 * gamma * (2.0 * c - t2);
    let d = (rhs / (gamma * gamma) + t4) / 6.0;
    [a, b, c, d]
}

/// Chooses `(gamma, R)` for the mixed seed. Rescaling the chart so that the
/// curvature slope becomes `R` multiplies the linear Christoffel coefficients
/// by `lambda^2` with `lambda = (R / R_jet)^(1/3)`.
pub fn select_mixed_parameters(jet: &MetricJet, gamma: Option<f64>, r: Option<f64>) -> Result<(f64, f64)> {
    for v in [gamma, r].into_iter().flatten() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma and R must be positive, got {v}")));
        }
    }
    let base = jets_of(jet);
    let gd = jet.g11_det();
    let mut last = String::new();
    for rc in ladder(r, 4.0) {
        let lambda2 = (rc / jet.r).cbrt().powi(2);
        let jets = base.map(|v| v * lambda2);
        for gc in ladder(gamma, 1.0) {
            let [_, b, _, d] = mixed_cubic(&jets, gd, gc, rc);
            let m1 = 2.0 * gc * gc - (2.0 * b - jets[1]);
            if m1 <= 0.0 {
                last = format!("2 gamma^2 - (2b - t1) = {m1:e} at gamma = {gc}, R = {rc}");
                continue;
            }
            let m2 = 6.0 * d - jets[5] - 2.0;
            if m2 > 0.0 {
                return Ok((gc, rc));
            }
            last = format!("(6d - t4) - 2 = {m2:e} at gamma = {gc}, R = {rc}");
            break;
        }
    }
    Err(Error::PositivityFailure(last))
}

/// Mixed seed `gamma^2/2 x1^2 + gamma x1 x2 + x2^2/2 + P3 + P4` on a
/// normalized clean-sign-change chart.
///
/// If the selected `R` differs from the chart's, the seed is built on the
/// chart rescaled by `chart_scale`, which callers must apply as well.
pub fn seed_mixed(
    patch: &MetricPatch,
    jet: &MetricJet,
    gamma: Option<f64>,
    r: Option<f64>,
) -> Result<SeedPolynomial> {
    check_christoffel_free(jet)?;
    let [k1, k2] = jet.grad_k0;
    if jet.tag != CurvatureTag::CleanSignChange || !(k2 > 0.0) || k1.abs() > NORMALIZED_TOL * k2 {
        return Err(Error::NotNormalized(format!(
            "curvature gradient {:?} is not aligned with +x2",
            jet.grad_k0
        )));
    }
    if (jet.r - 0.5 * k2).abs() > NORMALIZED_TOL * jet.r.abs() {
        return Err(Error::NotNormalized(format!("R = {} but dK/dx2 / 2 = {}", jet.r, 0.5 * k2)));
    }
    let (g, rr) = select_mixed_parameters(jet, gamma, r)?;
    let lambda = (rr / jet.r).cbrt();
    let (patch, jet) = if (lambda - 1.0).abs() > 1e-12 {
        let scaled = rescale_chart(patch, lambda);
        let j = christoffel_jet(&scaled, [0.0, 0.0])?;
        (scaled, j)
    } else {
        (patch.clone(), jet.clone())
    };
    let mut seed = base_seed(CaseTag::Mixed, [0.5 * g * g, g, 0.5], &jet);
    seed.gamma = g;
    seed.r = rr;
    seed.chart_scale = if (lambda - 1.0).abs() > 1e-12 { lambda } else { 1.0 };
    seed.cubic = mixed_cubic(&seed.jets, seed.g11_det, g, rr);
    let m = seed.positivity_margins();
    if !(m[0] > 0.0 && m[1] > 0.0) {
        return Err(Error::PositivityFailure(format!("margins {m:?} at gamma = {g}, R = {rr}")));
    }
    let geo = LocalGeometry::at(&patch, [0.0, 0.0], 4)?;
    let base = seed.clone();
    let p4 = min_norm_affine(5, |c| {
        let mut s = base.clone();
        s.quartic.copy_from_slice(c);
        let res = g_operator_jet(&s.jet_at([0.0, 0.0], 4), &geo);
        Ok(vec![res.coeff(2, 0), res.coeff(1, 1), res.coeff(0, 2)])
    })?;
    seed.quartic.copy_from_slice(&p4);
    Ok(seed)
}

/// `x = lambda x~` with `g -> lambda^-2 g`.
pub fn rescale_chart(patch: &MetricPatch, lambda: f64) -> MetricPatch {
    let d = patch.domain();
    let dom = Rect::new(d.min.map(|v| v / lambda), d.max.map(|v| v / lambda));
    patch.pullback(ChartMap::metric_scaling(lambda), dom)
}

/// Log-log slope of `sup_{|x| <= r} |G(h^)|` over `r in {1e-2, 5e-3, 2.5e-3}`.
pub fn seed_order_check(seed: &SeedPolynomial, patch: &MetricPatch) -> Result<f64> {
    let radii = [1e-2, 5e-3, 2.5e-3];
    let mut logs = Vec::with_capacity(3);
    for &r in &radii {
        let mut sup: f64 = 0.0;
        for k in 0..64 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
            for frac in [0.5, 1.0] {
                let p = [frac * r * th.cos(), frac * r * th.sin()];
                let geo = LocalGeometry::at(patch, p, 2)?;
                let v = g_operator_jet(&seed.jet_at(p, 2), &geo).value();
                sup = sup.max(v.abs());
            }
        }
        logs.push((r.ln(), sup.ln()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|l| l.0).sum::<f64>() / n;
    let my = logs.iter().map(|l| l.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|l| (l.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Principal coefficients of the linearization of `G` at `h^` (origin),
/// by central differencing along `x1^2/2`, `x1 x2`, `x2^2/2`.
pub fn linearized_principal(seed: &SeedPolynomial, patch: &MetricPatch, tau: f64) -> Result<[f64; 3]> {
    let geo = LocalGeometry::at(patch, [0.0, 0.0], 2)?;
    let base = seed.jet_at([0.0, 0.0], 2);
    let dirs = [
        Polynomial::new(vec![(2, 0, 0.5)]),
        Polynomial::new(vec![(1, 1, 1.0)]),
        Polynomial::new(vec![(0, 2, 0.5)]),
    ];
    let mut out = [0.0; 3];
    for (o, d) in out.iter_mut().zip(&dirs) {
        let dj = d.jet_at([0.0, 0.0], 2).scale(tau);
        let plus = g_operator_jet(&(&base + &dj), &geo).value();
        let minus = g_operator_jet(&(&base - &dj), &geo).value();
        *o = (plus - minus) / (2.0 * tau);
    }
    Ok(out)
}

/// Scaled problem `x = eps^p x~`, `f~ = h^ + eps^q h(x~)` on `[-1, 1]^2`.
#[derive(Clone, Debug)]
pub struct ScaledProblem {
    pub eps: f64,
    pub p: i32,
    pub q: i32,
    pub omega: Rect,
    pub case: CaseTag,
    pub seed: SeedPolynomial,
    pub patch: MetricPatch,
}

pub fn scale_problem(seed: &SeedPolynomial, patch: &MetricPatch, eps: f64) -> Result<ScaledProblem> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::EpsOutOfRange(eps));
    }
    let (p, q) = seed.case.powers();
    Ok(ScaledProblem {
        eps,
        p,
        q,
        omega: Rect::square(1.0),
        case: seed.case,
        seed: seed.clone(),
        patch: patch.clone(),
    })
}

/// Everything the source needs at one scaled point, independent of `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceNode {
    /// `G(h^)` at the physical point.
    pub g0: f64,
    pub gamma: [[[f64; 2]; 2]; 2],
    pub ginv: [[f64; 2]; 2],
    /// `K det g / 2`.
    pub half_k_det: f64,
    /// `e1 + D h^`.
    pub w0: [f64; 2],
    /// `S + L`: seed Hessian plus the part of `M0 - S` linear in `x` (mixed case only).
    pub principal: [[f64; 2]; 2],
    /// Remainder `M0 - S - L`.
    pub dm: [[f64; 2]; 2],
}

/// `cof(A) : B` for symmetric 2x2 `A`.
fn cof_dot(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    a[1][1] * b[0][0] - a[0][1] * b[1][0] - a[1][0] * b[0][1] + a[0][0] * b[1][1]
}

fn det(a: &[[f64; 2]; 2]) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn quad_form(g: &[[f64; 2]; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    g[0][0] * a[0] * b[0] + g[0][1] * a[0] * b[1] + g[1][0] * a[1] * b[0] + g[1][1] * a[1] * b[1]
}

/// Derivatives of `h` in scaled coordinates: `[h_1, h_2]` and `[h_11, h_12, h_22]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HDerivs {
    pub d1: [f64; 2],
    pub d2: [f64; 3],
}

impl HDerivs {
    pub fn from_jet(j: &Jet) -> HDerivs {
        HDerivs {
            d1: [j.derivative(1, 0), j.derivative(0, 1)],
            d2: [j.derivative(2, 0), j.derivative(1, 1), j.derivative(0, 2)],
        }
    }
}

impl ScaledProblem {
    pub fn physical(&self, xt: [f64; 2]) -> [f64; 2] {
        let s = self.eps.powi(self.p);
        [s * xt[0], s * xt[1]]
    }

    /// Source factor: the equation reads `P(h) = eps^3 G`.
    pub fn rhs_power(&self) -> f64 {
        self.eps.powi(self.q - 2 * self.p)
    }

    pub fn node(&self, xt: [f64; 2]) -> Result<SourceNode> {
        let x = self.physical(xt);
        let geo = LocalGeometry::at(&self.patch, x, 2)?;
        let gamma = geo.gamma_values();
        let ginv = [
            [geo.ginv[0][0].value(), geo.ginv[0][1].value()],
            [geo.ginv[1][0].value(), geo.ginv[1][1].value()],
        ];
        let half_k_det = 0.5 * geo.curvature.value() * geo.detg.value();
        let full = self.seed.jet_at(x, 2);
        let w0 = [1.0 + full.derivative(1, 0), full.derivative(0, 1)];
        let s = self.seed.hessian0();
        // exact Hessian of the cubic and quartic parts, no subtraction
        let hi = self.seed.polynomial_from(3).jet_at(x, 2);
        let hess_hi = [
            [hi.derivative(2, 0), hi.derivative(1, 1)],
            [hi.derivative(1, 1), hi.derivative(0, 2)],
        ];
        let dh = [full.derivative(1, 0), full.derivative(0, 1)];
        let mut m0_minus_s = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m0_minus_s[i][j] =
                    hess_hi[i][j] - gamma[0][i][j] - gamma[0][i][j] * dh[0] - gamma[1][i][j] * dh[1];
            }
        }
        let m0 = [
            [s[0][0] + m0_minus_s[0][0], s[0][1] + m0_minus_s[0][1]],
            [s[1][0] + m0_minus_s[1][0], s[1][1] + m0_minus_s[1][1]],
        ];
        let g0 = det(&m0) - half_k_det * quad_form(&ginv, &w0, &w0);
        let (principal, dm) = match self.case {
            CaseTag::Mixed => {
                let [s1, t1, s2, t2, s4, t4] = self.seed.jets;
                let lin_gamma = [
                    [s1 * x[0] + t1 * x[1], s2 * x[0] + t2 * x[1]],
                    [s2 * x[0] + t2 * x[1], s4 * x[0] + t4 * x[1]],
                ];
                let [a, b, c, d] = self.seed.cubic;
                let cubic_hess = [
                    [6.0 * a * x[0] + 2.0 * b * x[1], 2.0 * b * x[0] + 2.0 * c * x[1]],
                    [2.0 * b * x[0] + 2.0 * c * x[1], 2.0 * c * x[0] + 6.0 * d * x[1]],
                ];
                let q = self.seed.polynomial_from(4).jet_at(x, 2);
                let quartic_hess = [
                    [q.derivative(2, 0), q.derivative(1, 1)],
                    [q.derivative(1, 1), q.derivative(0, 2)],
                ];
                let mut p = [[0.0; 2]; 2];
                let mut r = [[0.0; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        p[i][j] = s[i][j] + cubic_hess[i][j] - lin_gamma[i][j];
                        r[i][j] = quartic_hess[i][j] + (lin_gamma[i][j] - gamma[0][i][j])
                            - gamma[0][i][j] * dh[0]
                            - gamma[1][i][j] * dh[1];
                    }
                }
                (p, r)
            }
            _ => (s, m0_minus_s),
        };
        Ok(SourceNode {
            g0,
            gamma,
            ginv,
            half_k_det,
            w0,
            principal,
            dm,
        })
    }

    /// `G(f~) - eps^3 P(h)`, the part of the operator not in the principal term.
    fn remainder(&self, n: &SourceNode, h: &HDerivs) -> f64 {
        let e = self.eps;
        let a = e.powi(self.q - self.p);
        let b = self.rhs_power();
        let dp = [a * h.d1[0], a * h.d1[1]];
        let gdp = |i: usize, j: usize| n.gamma[0][i][j] * dp[0] + n.gamma[1][i][j] * dp[1];
        let lower = [[gdp(0, 0), gdp(0, 1)], [gdp(1, 0), gdp(1, 1)]];
        let dm_h = [
            [b * h.d2[0] - lower[0][0], b * h.d2[1] - lower[0][1]],
            [b * h.d2[1] - lower[1][0], b * h.d2[2] - lower[1][1]],
        ];
        n.g0 - cof_dot(&n.principal, &lower) + cof_dot(&n.dm, &dm_h) + det(&dm_h)
            - n.half_k_det * (2.0 * quad_form(&n.ginv, &n.w0, &dp) + quad_form(&n.ginv, &dp, &dp))
    }

    /// `G(f~)` at a node, cancellation free.
    pub fn operator_value(&self, n: &SourceNode, h: &HDerivs) -> f64 {
        let p = cof_dot(
            &n.principal,
            &[[h.d2[0], h.d2[1]], [h.d2[1], h.d2[2]]],
        );
        self.rhs_power() * p + self.remainder(n, h)
    }

    /// Principal operator `cof(S + L) : D^2 h` at a node.
    pub fn principal_value(&self, n: &SourceNode, h: &HDerivs) -> f64 {
        cof_dot(&n.principal, &[[h.d2[0], h.d2[1]], [h.d2[1], h.d2[2]]])
    }

    /// The source `G` with `P(h) = eps^3 G`. In the hyperbolic and mixed cases
    /// `h_22` is eliminated by solving the equation for it, so `h.d2[2]` is ignored.
    pub fn source_at(&self, n: &SourceNode, h: &HDerivs) -> f64 {
        let e3 = self.rhs_power();
        let e6 = e3 * e3;
        match self.case {
            CaseTag::Elliptic => -self.remainder(n, h) / e6,
            CaseTag::Hyperbolic | CaseTag::Mixed => {
                let h0 = HDerivs {
                    d1: h.d1,
                    d2: [h.d2[0], h.d2[1], 0.0],
                };
                let rho0 = self.remainder(n, &h0);
                let lower11 = n.gamma[0][0][0] * h.d1[0] + n.gamma[1][0][0] * h.d1[1];
                let dm11 = e3 * h.d2[0] - self.eps.powi(self.q - self.p) * lower11;
                let kappa = n.dm[0][0] + dm11;
                let p0 = self.principal_value(n, &h0);
                let htt = -(e3 * p0 + rho0) / (e3 * (n.principal[0][0] + kappa));
                -(rho0 + e3 * kappa * htt) / e6
            }
        }
    }

    /// `h_22` that makes the full operator vanish (hyperbolic and mixed cases).
    pub fn solved_htt(&self, n: &SourceNode, h: &HDerivs) -> f64 {
        let e3 = self.rhs_power();
        let h0 = HDerivs {
            d1: h.d1,
            d2: [h.d2[0], h.d2[1], 0.0],
        };
        let rho0 = self.remainder(n, &h0);
        let lower11 = n.gamma[0][0][0] * h.d1[0] + n.gamma[1][0][0] * h.d1[1];
        let kappa = n.dm[0][0] + e3 * h.d2[0] - self.eps.powi(self.q - self.p) * lower11;
        -(e3 * self.principal_value(n, &h0) + rho0) / (e3 * (n.principal[0][0] + kappa))
    }
}

/// Evaluates the reduced source for a field `h` at a scaled point.
pub fn reduced_source(problem: &ScaledProblem, h: &ScalarField, xt: [f64; 2]) -> Result<f64> {
    let node = problem.node(xt)?;
    let hd = HDerivs::from_jet(&h.jet_at(xt, 2)?);
    Ok(problem.source_at(&node, &hd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::Preset;
    use crate::normalization::normalize;
    use std::f64::consts::PI;

    fn sphere() -> crate::normalization::Normalized {
        normalize(&Preset::Sphere.patch(), [PI / 2.0, 0.0], 4.0).unwrap()
    }

    fn pseudo() -> crate::normalization::Normalized {
        normalize(&Preset::Pseudosphere.patch(), [0.0, 0.0], 4.0).unwrap()
    }

    fn clean() -> crate::normalization::Normalized {
        normalize(&Preset::CleanSign.patch(), [0.0, 0.0], 4.0).unwrap()
    }

    #[test]
    fn elliptic_seed_on_sphere() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        assert_eq!(s.quad, [1.0, 3.0, 2.5]);
        let r = seed_residual_jet(&s, &n.patch, 1).unwrap();
        assert!(r.value().abs() <= 1e-10);
        assert!(r.coeff(1, 0).abs() <= 1e-10 && r.coeff(0, 1).abs() <= 1e-10, "{r:?}");
        let again = seed_elliptic(&n.patch, &n.jet).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn elliptic_cubic_is_orthogonal_to_kernel() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let geo = LocalGeometry::at(&n.patch, [0.0, 0.0], 3).unwrap();
        let lin = |c: [f64; 4]| {
            let mut t = s.clone();
            t.cubic = c;
            let r = g_operator_jet(&t.jet_at([0.0, 0.0], 3), &geo);
            [r.coeff(1, 0), r.coeff(0, 1)]
        };
        let v0 = lin([0.0; 4]);
        let mut m = [[0.0; 4]; 2];
        for k in 0..4 {
            let mut e = [0.0; 4];
            e[k] = 1.0;
            let v = lin(e);
            m[0][k] = v[0] - v0[0];
            m[1][k] = v[1] - v0[1];
        }
        // project the cubic onto the row space of m and compare
        let mmt = |i: usize, j: usize| (0..4).map(|k| m[i][k] * m[j][k]).sum::<f64>();
        let (a, b, d) = (mmt(0, 0), mmt(0, 1), mmt(1, 1));
        let det = a * d - b * b;
        let mc = [
            (0..4).map(|k| m[0][k] * s.cubic[k]).sum::<f64>(),
            (0..4).map(|k| m[1][k] * s.cubic[k]).sum::<f64>(),
        ];
        let y = [(d * mc[0] - b * mc[1]) / det, (a * mc[1] - b * mc[0]) / det];
        for k in 0..4 {
            let proj = m[0][k] * y[0] + m[1][k] * y[1];
            assert!((proj - s.cubic[k]).abs() < 1e-10, "{k}: {proj} {}", s.cubic[k]);
        }
    }

    #[test]
    fn not_normalized_inputs() {
        let raw = christoffel_jet(&Preset::Sphere.patch(), [PI / 3.0, 0.0]).unwrap();
        assert!(matches!(
            seed_elliptic(&Preset::Sphere.patch(), &raw),
            Err(Error::NotNormalized(_))
        ));
        let n = sphere();
        assert!(matches!(seed_hyperbolic(&n.patch, &n.jet), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn hyperbolic_seed_on_pseudosphere() {
        let n = pseudo();
        let s = seed_hyperbolic(&n.patch, &n.jet).unwrap();
        assert_eq!(s.quad, [0.5, 0.0, -0.5]);
        let r = seed_residual_jet(&s, &n.patch, 1).unwrap();
        assert!(r.value().abs() <= 1e-10);
        assert!(r.coeff(1, 0).abs() <= 1e-10 && r.coeff(0, 1).abs() <= 1e-10);
    }

    #[test]
    fn mixed_seed_on_cleansign() {
        let n = clean();
        let s = seed_mixed(&n.patch, &n.jet, Some(1.0), Some(4.0)).unwrap();
        assert_eq!(s.quad, [0.5, 1.0, 0.5]);
        assert!(s.cubic[..3].iter().all(|v| v.abs() < 1e-14));
        assert!((s.cubic[3] - 2.0 / 3.0).abs() < 1e-12);
        let m = s.positivity_margins();
        assert!((m[0] - 2.0).abs() < 1e-12 && (m[1] - 2.0).abs() < 1e-12);
        let r = seed_residual_jet(&s, &n.patch, 2).unwrap();
        for (i, j) in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)] {
            assert!(r.coeff(i, j).abs() < 1e-10, "{i}{j}: {}", r.coeff(i, j));
        }
        let auto = seed_mixed(&n.patch, &n.jet, None, None).unwrap();
        assert_eq!((auto.gamma, auto.r), (1.0, 4.0));
    }

    #[test]
    fn mixed_b_from_s2() {
        let mut jet = clean().jet;
        jet.s2 = 1.0;
        let [_, b, _, _] = mixed_cubic(&jets_of(&jet), jet.g11_det(), 1.0, 4.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn mixed_positivity_failure_when_unreachable() {
        // 2 gamma^2 - (s2 - t1) stays negative for every gamma on the ladder
        let mut jet = clean().jet;
        jet.s2 = 1e7;
        assert!(matches!(
            select_mixed_parameters(&jet, None, None),
            Err(Error::PositivityFailure(_))
        ));
        // large t4 cancels out of (6d - t4) - 2, so it never blocks positivity
        let mut jet = clean().jet;
        jet.t4 = 1e6;
        assert_eq!(select_mixed_parameters(&jet, None, None).unwrap(), (1.0, 4.0));
    }

    #[test]
    fn mixed_ladder_rescales_chart() {
        let n = normalize(&Preset::CleanSign.patch(), [0.0, 0.0], 0.5).unwrap();
        assert!((n.jet.r - 0.5).abs() < 1e-12);
        let s = seed_mixed(&n.patch, &n.jet, None, None).unwrap();
        assert_eq!(s.r, 4.0);
        assert!((s.chart_scale - 2.0).abs() < 1e-12);
        assert!((s.cubic[3] - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn scale_problem_powers() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let p = scale_problem(&s, &n.patch, 0.1).unwrap();
        assert_eq!((p.p, p.q), (4, 11));
        assert_eq!(p.omega, Rect::square(1.0));
        let c = clean();
        let m = seed_mixed(&c.patch, &c.jet, Some(1.0), Some(4.0)).unwrap();
        let p = scale_problem(&m, &c.patch, 0.1).unwrap();
        assert_eq!((p.p, p.q), (2, 7));
        assert_eq!(scale_problem(&s, &n.patch, 1.5).unwrap_err(), Error::EpsOutOfRange(1.5));
    }

    #[test]
    fn source_with_zero_h_matches_seed_residual() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let eps = 0.1;
        let p = scale_problem(&s, &n.patch, eps).unwrap();
        let zero = ScalarField::expr("0").unwrap();
        let mut sup: f64 = 0.0;
        for xt in [[0.5, 0.5], [-0.9, 0.1], [0.0, -1.0], [0.3, 0.3]] {
            let g = reduced_source(&p, &zero, xt).unwrap();
            let x = p.physical(xt);
            let geo = LocalGeometry::at(&n.patch, x, 2).unwrap();
            let direct = g_operator_jet(&s.jet_at(x, 2), &geo).value();
            assert!((g + direct / eps.powi(6)).abs() < 1e-6 * g.abs().max(1e-3), "{g} {direct}");
            sup = sup.max(g.abs());
        }
        assert!(sup.is_finite() && sup < 1.0);
    }

    #[test]
    fn operator_value_matches_direct_evaluation() {
        for (n, mixed) in [(sphere(), false), (pseudo(), false), (clean(), true)] {
            let s = if mixed {
                seed_mixed(&n.patch, &n.jet, Some(1.0), Some(4.0)).unwrap()
            } else if n.jet.k0 > 0.0 {
                seed_elliptic(&n.patch, &n.jet).unwrap()
            } else {
                seed_hyperbolic(&n.patch, &n.jet).unwrap()
            };
            let eps = 0.3;
            let p = scale_problem(&s, &n.patch, eps).unwrap();
            let h = ScalarField::expr("0.3*x1^2 - 0.2*x1*x2 + 0.5*x2^3 + 0.1*x1").unwrap();
            let xt = [0.4, -0.6];
            let node = p.node(xt).unwrap();
            let hd = HDerivs::from_jet(&h.jet_at(xt, 2).unwrap());
            let fast = p.operator_value(&node, &hd);
            let ft = ScalarField::Sum(vec![
                s.field(),
                ScalarField::Rescaled {
                    inner: Box::new(h.clone()),
                    space: eps.powi(p.p),
                    amp: eps.powi(p.q),
                },
            ]);
            let x = p.physical(xt);
            let geo = LocalGeometry::at(&n.patch, x, 2).unwrap();
            let direct = g_operator_jet(&ft.jet_at(x, 2).unwrap(), &geo).value();
            assert!((fast - direct).abs() < 1e-14, "{fast} {direct}");
        }
    }

    #[test]
    fn eliminated_htt_zeroes_operator() {
        let n = pseudo();
        let s = seed_hyperbolic(&n.patch, &n.jet).unwrap();
        let p = scale_problem(&s, &n.patch, 0.2).unwrap();
        let node = p.node([0.3, 0.7]).unwrap();
        let mut hd = HDerivs {
            d1: [0.1, -0.2],
            d2: [0.5, 0.3, 0.0],
        };
        hd.d2[2] = p.solved_htt(&node, &hd);
        assert!(p.operator_value(&node, &hd).abs() < 1e-15);
        // and then P(h) = eps^3 G
        let lhs = p.principal_value(&node, &hd);
        let g = p.source_at(&node, &hd);
        assert!((lhs - p.rhs_power() * g).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn source_is_lipschitz_in_h() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let p = scale_problem(&s, &n.patch, 0.05).unwrap();
        let h = ScalarField::expr("x1^2 - x2^2").unwrap();
        let hd = ScalarField::expr("x1^2 - x2^2 + 0.01*(x1*x2 + x2^2)").unwrap();
        let mut c: f64 = 0.0;
        for xt in [[0.1, 0.2], [-0.5, 0.5], [0.7, -0.1]] {
            let a = reduced_source(&p, &h, xt).unwrap();
            let b = reduced_source(&p, &hd, xt).unwrap();
            c = c.max((a - b).abs() / 0.01);
        }
        assert!(c <= 10.0, "{c}");
    }

    #[test]
    fn residual_orders() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let k = seed_order_check(&s, &n.patch).unwrap();
        assert!((1.8..=2.2).contains(&k), "{k}");
        let n = pseudo();
        let s = seed_hyperbolic(&n.patch, &n.jet).unwrap();
        let k = seed_order_check(&s, &n.patch).unwrap();
        assert!((1.8..=2.2).contains(&k), "{k}");
        let n = clean();
        let s = seed_mixed(&n.patch, &n.jet, Some(1.0), Some(4.0)).unwrap();
        let k = seed_order_check(&s, &n.patch).unwrap();
        assert!((2.8..=3.2).contains(&k), "{k}");
    }

    #[test]
    fn linearization_matches_cofactor() {
        let n = sphere();
        let s = seed_elliptic(&n.patch, &n.jet).unwrap();
        let c = linearized_principal(&s, &n.patch, 1e-4).unwrap();
        for (a, b) in c.iter().zip([5.0, -6.0, 2.0]) {
            assert!((a - b).abs() < 1e-6, "{c:?}");
        }
        let n = pseudo();
        let s = seed_hyperbolic(&n.patch, &n.jet).unwrap();
        let c = linearized_principal(&s, &n.patch, 1e-4).unwrap();
        for (a, b) in c.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-6, "{c:?}");
        }
        let n = clean();
        let s = seed_mixed(&n.patch, &n.jet, Some(2.0), Some(16.0)).unwrap();
        let c = linearized_principal(&s, &n.patch, 1e-4).unwrap();
        for (a, b) in c.iter().zip([1.0, -4.0, 4.0]) {
            assert!((a - b).abs() < 1e-6, "{c:?}");
        }
    }
}
