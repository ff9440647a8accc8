//! Metric patches, Christoffel symbols, Gaussian curvature and their jets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jet::{det2, Jet};
use crate::normalization::ChartMap;

/// Default tolerance for curvature classification.
pub const CLASSIFY_TOL: f64 = 1e-8;

/// Threshold on `max |Gamma(0)|` for a chart to count as normalized.
pub const NORMALIZED_GAMMA_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Rect { min, max }
    }

    pub fn square(half: f64) -> Self {
        Rect::new([-half, -half], [half, half])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let tol = 1e-12;
        (0..2).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    /// Distance from an interior point to the nearest edge.
    pub fn inner_distance(&self, p: [f64; 2]) -> f64 {
        (0..2)
            .map(|i| (p[i] - self.min[i]).min(self.max[i] - p[i]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A 2x2 metric given by expressions in the base chart, optionally pulled back
/// through a chain of quadratic chart maps with constant metric rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricPatch {
    base: [Expr; 3],
    maps: Vec<ChartMap>,
    domain: Rect,
}

impl MetricPatch {
    pub fn new(g11: Expr, g12: Expr, g22: Expr, domain: Rect) -> Self {
        MetricPatch {
            base: [g11, g12, g22],
            maps: Vec::new(),
            domain,
        }
    }

    /// Parses `"g11=...;g12=...;g22=..."` (any order, all three required).
    pub fn parse(text: &str, domain: Rect) -> Result<Self> {
        let mut parts: [Option<Expr>; 3] = [None, None, None];
        for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, val) = item.split_once('=').ok_or_else(|| Error::Parse {
                pos: 0,
                msg: format!("expected 'gij=<expr>', found '{item}'"),
            })?;
            let slot = match key.trim() {
                "g11" => 0,
                "g12" => 1,
                "g22" => 2,
                other => {
                    return Err(Error::Parse {
                        pos: 0,
                        msg: format!("unknown metric component '{other}'"),
                    })
                }
            };
            let expr = Expr::parse(val).map_err(|e| match e {
                Error::Parse { pos, msg } => Error::Parse {
                    pos,
                    msg: format!("in {}: {msg}", key.trim()),
                },
                other => other,
            })?;
            parts[slot] = Some(expr);
        }
        let [a, b, c] = parts;
        match (a, b, c) {
            (Some(a), Some(b), Some(c)) => Ok(MetricPatch::new(a, b, c, domain)),
            _ => Err(Error::Parse {
                pos: 0,
                msg: "metric needs g11, g12 and g22".into(),
            }),
        }
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn maps(&self) -> &[ChartMap] {
        &self.maps
    }

    pub fn base_components(&self) -> &[Expr; 3] {
        &self.base
    }

    /// The patch seen through `map`: coordinates `y` with `x = map(y)` and
    /// metric multiplied by `map.metric_scale^-2`.
    pub fn pullback(&self, map: ChartMap, domain: Rect) -> MetricPatch {
        let mut maps = self.maps.clone();
        maps.push(map);
        MetricPatch {
            base: self.base.clone(),
            maps,
            domain,
        }
    }

    /// The same coordinates with the metric replaced by `lambda^-2 g`.
    pub fn scaled_metric(&self, lambda: f64) -> MetricPatch {
        let map = ChartMap {
            metric_scale: lambda,
            ..ChartMap::identity()
        };
        self.pullback(map, self.domain)
    }

    pub fn check_domain(&self, p: [f64; 2]) -> Result<()> {
        if self.domain.contains(p) {
            Ok(())
        } else {
            Err(Error::DomainError { x: p[0], y: p[1] })
        }
    }

    /// Constant factor `c` such that the metric is `c` times [`Self::unscaled_metric_jets`].
    pub fn metric_factor(&self) -> f64 {
        self.maps
            .iter()
            .fold(1.0, |c, m| c / (m.metric_scale * m.metric_scale))
    }

    /// Taylor jets of `g_ij` at `p` up to `order`.
    pub fn metric_jets(&self, p: [f64; 2], order: usize) -> Result<[[Jet; 2]; 2]> {
        let c = self.metric_factor();
        let g = self.unscaled_metric_jets(p, order)?;
        if c == 1.0 {
            return Ok(g);
        }
        Ok([
            [g[0][0].scale(c), g[0][1].scale(c)],
            [g[1][0].scale(c), g[1][1].scale(c)],
        ])
    }

    /// Metric jets with the constant rescalings of the chart maps left out.
    pub fn unscaled_metric_jets(&self, p: [f64; 2], order: usize) -> Result<[[Jet; 2]; 2]> {
        self.check_domain(p)?;
        if self.maps.iter().all(|m| m.is_pure_scaling()) {
            let vars = [Jet::variable(0, p[0], order), Jet::variable(1, p[1], order)];
            let g11 = self.base[0].eval_jet(&vars)?;
            let g12 = self.base[1].eval_jet(&vars)?;
            let g22 = self.base[2].eval_jet(&vars)?;
            return Ok([[g11, g12.clone()], [g12, g22]]);
        }
        let mut x = [
            Jet::variable(0, p[0], order + 1),
            Jet::variable(1, p[1], order + 1),
        ];
        for m in self.maps.iter().rev() {
            x = m.apply_jets(&x);
        }
        let g = [
            self.base[0].eval_jet(&x)?.truncate(order),
            self.base[1].eval_jet(&x)?.truncate(order),
            self.base[2].eval_jet(&x)?.truncate(order),
        ];
        let gm = [[&g[0], &g[1]], [&g[1], &g[2]]];
        let jac = [[x[0].diff(0), x[0].diff(1)], [x[1].diff(0), x[1].diff(1)]];
        let comp = |a: usize, b: usize| -> Jet {
            let mut acc = Jet::zero(order);
            for k in 0..2 {
                for l in 0..2 {
                    acc = acc + &(&jac[k][a] * gm[k][l]) * &jac[l][b];
                }
            }
            acc
        };
        let g11 = comp(0, 0);
        let g12 = comp(0, 1);
        let g22 = comp(1, 1);
        Ok([[g11, g12.clone()], [g12, g22]])
    }

    pub fn metric_at(&self, p: [f64; 2]) -> Result<[[f64; 2]; 2]> {
        let g = self.metric_jets(p, 0)?;
        Ok([[g[0][0].value(), g[0][1].value()], [g[1][0].value(), g[1][1].value()]])
    }
}

/// Jets of every geometric quantity at one point: `g`, `g^-1`, `det g` to
/// `order`, Christoffel symbols to `order - 1`, curvature to `order - 2`.
#[derive(Clone, Debug)]
pub struct LocalGeometry {
    pub point: [f64; 2],
    pub g: [[Jet; 2]; 2],
    pub ginv: [[Jet; 2]; 2],
    pub detg: Jet,
    /// `gamma[k][i][j] = Gamma^k_ij`.
    pub gamma: [[[Jet; 2]; 2]; 2],
    pub curvature: Jet,
}

impl LocalGeometry {
    pub fn at(patch: &MetricPatch, p: [f64; 2], order: usize) -> Result<Self> {
        assert!(order >= 2, "curvature needs metric jets of order >= 2");
        // Christoffel symbols are computed from the unscaled metric so they are
        // bit-identical under constant rescaling.
        let c = patch.metric_factor();
        let g = patch.unscaled_metric_jets(p, order)?;
        let detg = det2(&g);
        if !(detg.value() > 0.0 && g[0][0].value() > 0.0) {
            return Err(Error::SingularMetric {
                x: p[0],
                y: p[1],
                det: detg.value(),
            });
        }
        let inv_det = detg.recip();
        let ginv = [
            [&g[1][1] * &inv_det, -(&g[0][1] * &inv_det)],
            [-(&g[1][0] * &inv_det), &g[0][0] * &inv_det],
        ];
        let dg: [[[Jet; 2]; 2]; 2] = [
            [[g[0][0].diff(0), g[0][1].diff(0)], [g[1][0].diff(0), g[1][1].diff(0)]],
            [[g[0][0].diff(1), g[0][1].diff(1)], [g[1][0].diff(1), g[1][1].diff(1)]],
        ];
        // first-kind symbols [ij, l] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
        let first = |i: usize, j: usize, l: usize| -> Jet {
            (&(&dg[i][j][l] + &dg[j][i][l]) - &dg[l][i][j]).scale(0.5)
        };
        let mut gamma: [[[Jet; 2]; 2]; 2] = Default::default();
        for (k, gk) in gamma.iter_mut().enumerate() {
            for i in 0..2 {
                for j in i..2 {
                    let val = &ginv[k][0] * &first(i, j, 0) + &ginv[k][1] * &first(i, j, 1);
                    gk[i][j] = val.clone();
                    gk[j][i] = val;
                }
            }
        }
        let mut curvature = brioschi(&g, &detg);
        let (g, ginv, detg) = if c == 1.0 {
            (g, ginv, detg)
        } else {
            curvature = curvature.scale(1.0 / c);
            let sc = |m: [[Jet; 2]; 2], s: f64| -> [[Jet; 2]; 2] {
                let [[a, b], [d, e]] = m;
                [[a.scale(s), b.scale(s)], [d.scale(s), e.scale(s)]]
            };
            (sc(g, c), sc(ginv, 1.0 / c), detg.scale(c * c))
        };
        Ok(LocalGeometry {
            point: p,
            g,
            ginv,
            detg,
            gamma,
            curvature,
        })
    }

    pub fn gamma_values(&self) -> [[[f64; 2]; 2]; 2] {
        let mut out = [[[0.0; 2]; 2]; 2];
        for (k, o) in out.iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    o[i][j] = self.gamma[k][i][j].value();
                }
            }
        }
        out
    }
}

impl Default for Jet {
    fn default() -> Self {
        Jet::zero(0)
    }
}

/// Brioschi formula with `E = g11, F = g12, G = g22`, `u = x1, v = x2`.
fn brioschi(g: &[[Jet; 2]; 2], detg: &Jet) -> Jet {
    let (e, f, gg) = (&g[0][0], &g[0][1], &g[1][1]);
    let (eu, ev) = (e.diff(0), e.diff(1));
    let (fu, fv) = (f.diff(0), f.diff(1));
    let (gu, gv) = (gg.diff(0), gg.diff(1));
    let evv = ev.diff(1);
    let fuv = fu.diff(1);
    let guu = gu.diff(0);
    let half = |j: &Jet| j.scale(0.5);

    let m11 = &(&fuv - &half(&evv)) - &half(&guu);
    let m12 = half(&eu);
    let m13 = &fu - &half(&ev);
    let m21 = &fv - &half(&gu);
    let m31 = half(&gv);
    // det of [[m11, m12, m13], [m21, E, F], [m31, F, G]]
    let minor1 = e * gg - f * f;
    let det1 = &(&m11 * &minor1) - &(&m12 * &(&(&m21 * gg) - &(f * &m31)))
        + &m13 * &(&(&m21 * f) - &(e * &m31));
    let a = half(&ev);
    let b = half(&gu);
    // det of [[0, a, b], [a, E, F], [b, F, G]]
    let det2m = -(&a * &(&(&a * gg) - &(f * &b))) + &b * &(&(&a * f) - &(e * &b));
    (det1 - det2m).div(&(detg * detg))
}

pub fn christoffel(patch: &MetricPatch, p: [f64; 2]) -> Result<[[[f64; 2]; 2]; 2]> {
    Ok(LocalGeometry::at(patch, p, 2)?.gamma_values())
}

pub fn gaussian_curvature(patch: &MetricPatch, p: [f64; 2]) -> Result<f64> {
    Ok(LocalGeometry::at(patch, p, 2)?.curvature.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurvatureTag {
    Elliptic,
    Hyperbolic,
    CleanSignChange,
    Degenerate,
}

impl CurvatureTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CurvatureTag::Elliptic => "Elliptic",
            CurvatureTag::Hyperbolic => "Hyperbolic",
            CurvatureTag::CleanSignChange => "CleanSignChange",
            CurvatureTag::Degenerate => "Degenerate",
        }
    }
}

impl std::fmt::Display for CurvatureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureClass {
    pub tag: CurvatureTag,
    pub k0: f64,
    pub grad_k0: [f64; 2],
}

pub fn classify(patch: &MetricPatch, x0: [f64; 2], tol: f64) -> Result<CurvatureClass> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let geo = LocalGeometry::at(patch, x0, 3)?;
    let k = &geo.curvature;
    let k0 = k.value();
    let grad = [k.derivative(1, 0), k.derivative(0, 1)];
    let tag = if k0 > tol {
        CurvatureTag::Elliptic
    } else if k0 < -tol {
        CurvatureTag::Hyperbolic
    } else if grad[0].hypot(grad[1]) > tol {
        CurvatureTag::CleanSignChange
    } else {
        CurvatureTag::Degenerate
    };
    Ok(CurvatureClass {
        tag,
        k0,
        grad_k0: grad,
    })
}

/// Pointwise metric data at the base point of a (usually normalized) chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricJet {
    pub g0: [[f64; 2]; 2],
    pub ginv0: [[f64; 2]; 2],
    pub detg0: f64,
    pub gamma0: [[[f64; 2]; 2]; 2],
    /// Linear Taylor coefficients of `Gamma^1_11`, `Gamma^1_12`, `Gamma^1_22`.
    pub s1: f64,
    pub t1: f64,
    pub s2: f64,
    pub t2: f64,
    pub s4: f64,
    pub t4: f64,
    pub k0: f64,
    pub grad_k0: [f64; 2],
    pub r: f64,
    pub tag: CurvatureTag,
    pub normalized: bool,
}

impl MetricJet {
    pub fn gamma0_norm(&self) -> f64 {
        self.gamma0
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `g^11(0) det g(0)`, which equals `g22(0)`.
    pub fn g11_det(&self) -> f64 {
        self.ginv0[0][0] * self.detg0
    }
}

pub fn christoffel_jet(patch: &MetricPatch, p: [f64; 2]) -> Result<MetricJet> {
    let geo = LocalGeometry::at(patch, p, 3)?;
    let c = classify(patch, p, CLASSIFY_TOL)?;
    let val = |j: &Jet| j.value();
    let g0 = [[val(&geo.g[0][0]), val(&geo.g[0][1])], [val(&geo.g[1][0]), val(&geo.g[1][1])]];
    let ginv0 = [
        [val(&geo.ginv[0][0]), val(&geo.ginv[0][1])],
        [val(&geo.ginv[1][0]), val(&geo.ginv[1][1])],
    ];
    let detg0 = geo.detg.value();
    let gamma0 = geo.gamma_values();
    let g1 = &geo.gamma[0];
    let slope = |j: &Jet| (j.derivative(1, 0), j.derivative(0, 1));
    let (s1, t1) = slope(&g1[0][0]);
    let (s2, t2) = slope(&g1[0][1]);
    let (s4, t4) = slope(&g1[1][1]);
    let g11det = ginv0[0][0] * detg0;
    let r = match c.tag {
        CurvatureTag::Elliptic => 1.0 / g11det,
        CurvatureTag::Hyperbolic => -1.0 / g11det,
        CurvatureTag::CleanSignChange => 0.5 * c.grad_k0[1],
        CurvatureTag::Degenerate => 0.0,
    };
    let mut jet = MetricJet {
        g0,
        ginv0,
        detg0,
        gamma0,
        s1,
        t1,
        s2,
        t2,
        s4,
        t4,
        k0: c.k0,
        grad_k0: c.grad_k0,
        r,
        tag: c.tag,
        normalized: false,
    };
    jet.normalized = jet.gamma0_norm() <= NORMALIZED_GAMMA_TOL;
    Ok(jet)
}

/// Named metric presets with their base points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Euclidean,
    Sphere,
    Pseudosphere,
    CleanSign,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Euclidean,
        Preset::Sphere,
        Preset::Pseudosphere,
        Preset::CleanSign,
    ];

    pub fn by_name(name: &str) -> Option<Preset> {
        match name.to_ascii_lowercase().as_str() {
            "euclidean" => Some(Preset::Euclidean),
            "sphere" => Some(Preset::Sphere),
            "pseudosphere" => Some(Preset::Pseudosphere),
            "cleansign" => Some(Preset::CleanSign),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Euclidean => "euclidean",
            Preset::Sphere => "sphere",
            Preset::Pseudosphere => "pseudosphere",
            Preset::CleanSign => "cleansign",
        }
    }

    pub fn patch(self) -> MetricPatch {
        let p = |s: &str| Expr::parse(s).expect("preset expression");
        match self {
            Preset::Euclidean => MetricPatch::new(p("1"), p("0"), p("1"), Rect::square(10.0)),
            Preset::Sphere => MetricPatch::new(
                p("1"),
                p("0"),
                p("sin(x1)^2"),
                Rect::new([0.05, -3.0], [std::f64::consts::PI - 0.05, 3.0]),
            ),
            Preset::Pseudosphere => {
                MetricPatch::new(p("1"), p("0"), p("cosh(x1)^2"), Rect::square(2.0))
            }
            Preset::CleanSign => {
                let c = "exp(-x2^3/3)";
                MetricPatch::new(p(c), p("0"), p(c), Rect::square(2.0))
            }
        }
    }

    pub fn base_point(self) -> [f64; 2] {
        match self {
            Preset::Sphere => [std::f64::consts::FRAC_PI_2, 0.0],
            _ => [0.0, 0.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn euclidean_is_flat() {
        let patch = Preset::Euclidean.patch();
        let g = christoffel(&patch, [0.3, -1.2]).unwrap();
        assert!(g.iter().flatten().flatten().all(|v| *v == 0.0));
        assert_eq!(gaussian_curvature(&patch, [0.3, -1.2]).unwrap(), 0.0);
    }

    #[test]
    fn sphere_christoffel_at_pi_over_three() {
        let patch = Preset::Sphere.patch();
        let g = christoffel(&patch, [PI / 3.0, 0.0]).unwrap();
        assert!((g[1][0][1] - 0.5773502691896258).abs() < 1e-12);
        assert!((g[1][1][0] - 0.5773502691896258).abs() < 1e-12);
        assert!((g[0][1][1] + 0.4330127018922193).abs() < 1e-12);
        for (k, i, j) in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)] {
            assert!(g[k][i][j].abs() < 1e-15, "{k}{i}{j}");
        }
        let g = christoffel(&patch, [PI / 2.0, 0.0]).unwrap();
        assert!(g.iter().flatten().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn curvature_of_presets() {
        let k = gaussian_curvature(&Preset::Sphere.patch(), [PI / 2.0, 0.0]).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
        let k = gaussian_curvature(&Preset::Pseudosphere.patch(), [0.0, 0.0]).unwrap();
        assert!((k + 1.0).abs() < 1e-12);
        let k = gaussian_curvature(&Preset::CleanSign.patch(), [0.0, 0.1]).unwrap();
        assert!((k - 0.1000333388890432).abs() < 1e-12, "{k}");
    }

    #[test]
    fn jet_of_linear_christoffel() {
        let patch = MetricPatch::parse("g11=1+x2^2;g12=0;g22=1", Rect::square(1.0)).unwrap();
        let j = christoffel_jet(&patch, [0.0, 0.0]).unwrap();
        assert!((j.t2 - 1.0).abs() < 1e-14);
        for v in [j.s1, j.t1, j.s2, j.s4, j.t4] {
            assert!(v.abs() < 1e-14);
        }
        let j = christoffel_jet(&Preset::CleanSign.patch(), [0.0, 0.0]).unwrap();
        for v in [j.s1, j.t1, j.s2, j.t2, j.s4, j.t4] {
            assert!(v.abs() < 1e-14);
        }
        assert!(j.normalized);
    }

    #[test]
    fn classification_of_presets() {
        let c = classify(&Preset::Sphere.patch(), [PI / 2.0, 0.0], 1e-8).unwrap();
        assert_eq!(c.tag, CurvatureTag::Elliptic);
        let c = classify(&Preset::Pseudosphere.patch(), [0.0, 0.0], 1e-8).unwrap();
        assert_eq!(c.tag, CurvatureTag::Hyperbolic);
        let c = classify(&Preset::CleanSign.patch(), [0.0, 0.0], 1e-8).unwrap();
        assert_eq!(c.tag, CurvatureTag::CleanSignChange);
        assert!(c.k0.abs() < 1e-15);
        assert!((c.grad_k0[1] - 1.0).abs() < 1e-13 && c.grad_k0[0].abs() < 1e-15);
        let c = classify(&Preset::Euclidean.patch(), [0.0, 0.0], 1e-8).unwrap();
        assert_eq!(c.tag, CurvatureTag::Degenerate);
    }

    #[test]
    fn singular_and_out_of_domain() {
        let patch = MetricPatch::parse("g11=x1;g12=0;g22=1", Rect::square(1.0)).unwrap();
        assert!(matches!(
            christoffel(&patch, [-0.5, 0.0]),
            Err(Error::SingularMetric { .. })
        ));
        assert!(matches!(
            christoffel(&patch, [5.0, 0.0]),
            Err(Error::DomainError { .. })
        ));
    }

    #[test]
    fn metric_scaling_keeps_christoffel_bits() {
        let patch = Preset::Sphere.patch();
        let scaled = patch.scaled_metric(3.0);
        for p in [[1.0, 0.2], [0.4, -0.7], [2.5, 1.1]] {
            assert_eq!(christoffel(&patch, p).unwrap(), christoffel(&scaled, p).unwrap());
            let k = gaussian_curvature(&patch, p).unwrap();
            let ks = gaussian_curvature(&scaled, p).unwrap();
            assert!((ks - 9.0 * k).abs() < 1e-12 * k.abs().max(1.0));
        }
    }
}
