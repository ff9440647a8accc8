//! Chart normalization: kill the Christoffel symbols at the base point, then
//! align and scale so the curvature takes the form each solver expects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::metric::{
    christoffel, christoffel_jet, CurvatureClass, CurvatureTag, MetricJet, MetricPatch, Rect,
    CLASSIFY_TOL,
};

/// `x = x0 + T y + 1/2 Q[y, y]` together with the metric rescaling `g -> metric_scale^-2 g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartMap {
    pub x0: [f64; 2],
    #[serde(rename = "T")]
    pub linear: [[f64; 2]; 2],
    /// `quadratic[k][i][j]`, symmetric in `(i, j)`.
    #[serde(rename = "Q")]
    pub quadratic: [[[f64; 2]; 2]; 2],
    #[serde(rename = "lambda")]
    pub metric_scale: f64,
}

impl Default for ChartMap {
    fn default() -> Self {
        ChartMap::identity()
    }
}

impl ChartMap {
    pub fn identity() -> Self {
        ChartMap {
            x0: [0.0; 2],
            linear: [[1.0, 0.0], [0.0, 1.0]],
            quadratic: [[[0.0; 2]; 2]; 2],
            metric_scale: 1.0,
        }
    }

    pub fn linear(t: [[f64; 2]; 2]) -> Self {
        ChartMap {
            linear: t,
            ..ChartMap::identity()
        }
    }

    /// `x = lambda y` with `g -> lambda^-2 g`, so `g~(y) = g(lambda y)`.
    pub fn metric_scaling(lambda: f64) -> Self {
        ChartMap {
            linear: [[lambda, 0.0], [0.0, lambda]],
            metric_scale: lambda,
            ..ChartMap::identity()
        }
    }

    pub fn det_linear(&self) -> f64 {
        let t = &self.linear;
        t[0][0] * t[1][1] - t[0][1] * t[1][0]
    }

    /// True if the map only rescales the metric (no coordinate change).
    pub fn is_pure_scaling(&self) -> bool {
        self.x0 == [0.0; 2]
            && self.linear == [[1.0, 0.0], [0.0, 1.0]]
            && self.quadratic == [[[0.0; 2]; 2]; 2]
    }

    pub fn is_identity(&self) -> bool {
        *self == ChartMap::identity()
    }

    pub fn apply(&self, y: [f64; 2]) -> [f64; 2] {
        let mut x = self.x0;
        for (k, xk) in x.iter_mut().enumerate() {
            *xk += self.linear[k][0] * y[0] + self.linear[k][1] * y[1];
            let q = &self.quadratic[k];
            *xk += 0.5
                * (q[0][0] * y[0] * y[0] + 2.0 * q[0][1] * y[0] * y[1] + q[1][1] * y[1] * y[1]);
        }
        x
    }

    /// `jac[k][a] = d x^k / d y^a`.
    pub fn jacobian(&self, y: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = self.linear;
        for (k, row) in j.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                *v += self.quadratic[k][a][0] * y[0] + self.quadratic[k][a][1] * y[1];
            }
        }
        j
    }

    pub fn apply_jets(&self, y: &[Jet; 2]) -> [Jet; 2] {
        let quad = |k: usize| -> Jet {
            let q = &self.quadratic[k];
            let yy00 = &y[0] * &y[0];
            let yy01 = &y[0] * &y[1];
            let yy11 = &y[1] * &y[1];
            (yy00.scale(q[0][0]) + yy01.scale(2.0 * q[0][1]) + yy11.scale(q[1][1])).scale(0.5)
        };
        let lin = |k: usize| -> Jet {
            (y[0].scale(self.linear[k][0]) + y[1].scale(self.linear[k][1])).add_scalar(self.x0[k])
        };
        [lin(0) + quad(0), lin(1) + quad(1)]
    }

    /// Composes `self` (outer) with a linear, centred `inner` map: `x = self(inner(z))`.
    pub fn then_linear(&self, inner: &ChartMap) -> Result<ChartMap> {
        if inner.x0 != [0.0; 2] || inner.quadratic != [[[0.0; 2]; 2]; 2] {
            return Err(Error::InvalidConfig("inner chart map must be linear".into()));
        }
        let t2 = &inner.linear;
        let mut linear = [[0.0; 2]; 2];
        for k in 0..2 {
            for a in 0..2 {
                linear[k][a] = self.linear[k][0] * t2[0][a] + self.linear[k][1] * t2[1][a];
            }
        }
        let mut quadratic = [[[0.0; 2]; 2]; 2];
        for k in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            s += self.quadratic[k][i][j] * t2[i][a] * t2[j][b];
                        }
                    }
                    quadratic[k][a][b] = s;
                }
            }
        }
        Ok(ChartMap {
            x0: self.x0,
            linear,
            quadratic,
            metric_scale: self.metric_scale * inner.metric_scale,
        })
    }

    /// Solves `apply(y) = x` by Newton iteration started at the linear inverse.
    pub fn invert(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        let det = self.det_linear();
        if det == 0.0 {
            return Err(Error::InvalidConfig("chart map has singular linear part".into()));
        }
        let solve = |j: &[[f64; 2]; 2], r: [f64; 2]| -> Option<[f64; 2]> {
            let d = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            (d != 0.0).then(|| {
                [
                    (j[1][1] * r[0] - j[0][1] * r[1]) / d,
                    (-j[1][0] * r[0] + j[0][0] * r[1]) / d,
                ]
            })
        };
        let rhs = [x[0] - self.x0[0], x[1] - self.x0[1]];
        let mut y = solve(&self.linear, rhs).expect("nonzero determinant");
        for _ in 0..50 {
            let fx = self.apply(y);
            let r = [x[0] - fx[0], x[1] - fx[1]];
            let scale = 1.0 + x[0].abs().max(x[1].abs());
            if r[0].abs().max(r[1].abs()) <= 1e-15 * scale {
                return Ok(y);
            }
            let step = solve(&self.jacobian(y), r).ok_or(Error::DomainError { x: x[0], y: x[1] })?;
            y = [y[0] + step[0], y[1] + step[1]];
        }
        let fx = self.apply(y);
        if (fx[0] - x[0]).abs().max((fx[1] - x[1]).abs()) <= 1e-12 * (1.0 + x[0].abs().max(x[1].abs())) {
            Ok(y)
        } else {
            Err(Error::DomainError { x: x[0], y: x[1] })
        }
    }
}

fn linear_norm(t: &[[f64; 2]; 2]) -> f64 {
    (t[0][0].abs() + t[0][1].abs()).max(t[1][0].abs() + t[1][1].abs())
}

fn quadratic_norm(q: &[[[f64; 2]; 2]; 2]) -> f64 {
    q.iter()
        .map(|qk| qk.iter().flatten().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest centred square in `y` whose image stays inside `domain`.
fn pulled_back_square(map: &ChartMap, domain: Rect) -> Result<Rect> {
    let d = domain.inner_distance(map.x0);
    if !(d > 0.0) {
        return Err(Error::DomainError {
            x: map.x0[0],
            y: map.x0[1],
        });
    }
    let tn = linear_norm(&map.linear);
    let qn = quadratic_norm(&map.quadratic);
    let mut r = d / tn;
    while r * (tn + 0.5 * qn * r) > d {
        r *= 0.9;
    }
    Ok(Rect::square(r))
}

/// Pulls the patch back through `y -> x0 + y - 1/2 Gamma(x0)[y, y]`, which
/// makes the Christoffel symbols vanish at `y = 0`.
pub fn kill_christoffel(patch: &MetricPatch, x0: [f64; 2]) -> Result<(MetricPatch, ChartMap)> {
    let gamma = christoffel(patch, x0)?;
    let mut quadratic = [[[0.0; 2]; 2]; 2];
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                quadratic[k][i][j] = -gamma[k][i][j];
            }
        }
    }
    let map = ChartMap {
        x0,
        quadratic,
        ..ChartMap::identity()
    };
    let domain = pulled_back_square(&map, patch.domain())?;
    Ok((patch.pullback(map.clone(), domain), map))
}

/// Aligns an already Christoffel-free chart (base point at the origin).
///
/// Elliptic and hyperbolic charts get `T = diag(1, beta)` so that
/// `g^11(0) det g(0) = 2 / |K(0)|`. Clean sign changes are rotated so that
/// `grad K(0)` points along `+x2`, then rescaled by `x = lambda x~`,
/// `g -> lambda^-2 g` until `R = dK/dx2(0) / 2 >= target_r`.
pub fn align_and_scale(
    patch: &MetricPatch,
    cls: &CurvatureClass,
    target_r: f64,
) -> Result<(MetricPatch, ChartMap, MetricJet)> {
    let origin = [0.0, 0.0];
    let map = match cls.tag {
        CurvatureTag::Degenerate => return Err(Error::DegenerateCase),
        CurvatureTag::Elliptic | CurvatureTag::Hyperbolic => {
            if cls.k0.abs() <= CLASSIFY_TOL {
                return Err(Error::DegenerateCase);
            }
            let g22 = patch.metric_at(origin)?[1][1];
            let beta = (2.0 / (cls.k0.abs() * g22)).sqrt();
            ChartMap::linear([[1.0, 0.0], [0.0, beta]])
        }
        CurvatureTag::CleanSignChange => {
            let gn = cls.grad_k0[0].hypot(cls.grad_k0[1]);
            if gn <= CLASSIFY_TOL {
                return Err(Error::DegenerateCase);
            }
            if !(target_r > 0.0) {
                return Err(Error::InvalidConfig(format!("target R must be positive, got {target_r}")));
            }
            let (c, s) = (cls.grad_k0[0] / gn, cls.grad_k0[1] / gn);
            let rot = [[s, c], [-c, s]];
            let r_raw = 0.5 * gn;
            let lambda = if r_raw < target_r {
                (target_r / r_raw).cbrt()
            } else {
                1.0
            };
            ChartMap {
                linear: [
                    [lambda * rot[0][0], lambda * rot[0][1]],
                    [lambda * rot[1][0], lambda * rot[1][1]],
                ],
                metric_scale: lambda,
                ..ChartMap::identity()
            }
        }
    };
    let domain = pulled_back_square(&map, patch.domain())?;
    let aligned = patch.pullback(map.clone(), domain);
    let jet = christoffel_jet(&aligned, origin)?;
    Ok((aligned, map, jet))
}

/// Composite normalization of `patch` about `x0`.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub patch: MetricPatch,
    /// Maps normalized coordinates to the original chart.
    pub map: ChartMap,
    pub jet: MetricJet,
    pub class: CurvatureClass,
}

pub fn normalize(patch: &MetricPatch, x0: [f64; 2], target_r: f64) -> Result<Normalized> {
    let (killed, kmap) = kill_christoffel(patch, x0)?;
    let cls = crate::metric::classify(&killed, [0.0, 0.0], CLASSIFY_TOL)?;
    let (_, amap, jet) = align_and_scale(&killed, &cls, target_r)?;
    let map = kmap.then_linear(&amap)?;
    let domain = pulled_back_square(&map, patch.domain())?;
    let normalized = patch.pullback(map.clone(), domain);
    let jet = MetricJet {
        normalized: jet.normalized,
        ..jet
    };
    Ok(Normalized {
        patch: normalized,
        map,
        jet,
        class: cls,
    })
}

/// Transports a vector sampled at `y` in the normalized chart to the original chart.
pub fn pushforward_vector(map: &ChartMap, y: [f64; 2], v: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let j = map.jacobian(y);
    (
        map.apply(y),
        [j[0][0] * v[0] + j[0][1] * v[1], j[1][0] * v[0] + j[1][1] * v[1]],
    )
}

/// Inverse of [`pushforward_vector`].
pub fn pullback_vector(map: &ChartMap, x: [f64; 2], w: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
    let y = map.invert(x)?;
    let j = map.jacobian(y);
    let d = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if d == 0.0 {
        return Err(Error::DomainError { x: x[0], y: x[1] });
    }
    Ok((
        y,
        [
            (j[1][1] * w[0] - j[0][1] * w[1]) / d,
            (-j[1][0] * w[0] + j[0][0] * w[1]) / d,
        ],
    ))
}

/// Pushes sampled vectors forward, failing if any image leaves `domain`.
pub fn pushforward_field(
    map: &ChartMap,
    samples: &[([f64; 2], [f64; 2])],
    domain: Rect,
) -> Result<Vec<([f64; 2], [f64; 2])>> {
    samples
        .iter()
        .map(|&(y, v)| {
            let (x, w) = pushforward_vector(map, y, v);
            if domain.contains(x) {
                Ok((x, w))
            } else {
                Err(Error::DomainError { x: x[0], y: x[1] })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{classify, gaussian_curvature, Preset};
    use std::f64::consts::PI;

    fn gamma_norm(patch: &MetricPatch, p: [f64; 2]) -> f64 {
        christoffel(patch, p)
            .unwrap()
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn euclidean_needs_no_correction() {
        let (_, map) = kill_christoffel(&Preset::Euclidean.patch(), [0.4, -0.3]).unwrap();
        assert_eq!(map.quadratic, [[[0.0; 2]; 2]; 2]);
    }

    #[test]
    fn kills_christoffel_symbols() {
        let sphere = Preset::Sphere.patch();
        assert!(gamma_norm(&sphere, [PI / 3.0, 0.0]) > 0.5);
        let (killed, _) = kill_christoffel(&sphere, [PI / 3.0, 0.0]).unwrap();
        assert!(gamma_norm(&killed, [0.0, 0.0]) <= 1e-10);

        let polar = MetricPatch::parse("g11=1;g12=0;g22=x1^2", Rect::new([0.5, -1.0], [1.5, 1.0])).unwrap();
        let (killed, _) = kill_christoffel(&polar, [1.0, 0.2]).unwrap();
        assert!(gamma_norm(&killed, [0.0, 0.0]) <= 1e-10);
    }

    #[test]
    fn linear_change_keeps_christoffel_zero() {
        let (killed, _) = kill_christoffel(&Preset::Sphere.patch(), [1.1, 0.3]).unwrap();
        let t = ChartMap::linear([[0.7, -0.4], [0.2, 1.3]]);
        let moved = killed.pullback(t, Rect::square(0.1));
        assert!(gamma_norm(&moved, [0.0, 0.0]) <= 1e-10);
    }

    #[test]
    fn sphere_alignment() {
        let (killed, _) = kill_christoffel(&Preset::Sphere.patch(), [PI / 2.0, 0.0]).unwrap();
        let cls = classify(&killed, [0.0, 0.0], 1e-8).unwrap();
        let (_, map, jet) = align_and_scale(&killed, &cls, 4.0).unwrap();
        assert!((map.linear[1][1] - 2f64.sqrt()).abs() < 1e-15);
        assert!((jet.g0[1][1] - 2.0).abs() < 1e-14);
        assert!((jet.g11_det() - 2.0).abs() < 1e-14);
        assert!((jet.r - 0.5).abs() < 1e-14);
        assert!((jet.k0 - 2.0 * jet.r).abs() < 1e-10 * jet.k0.abs());
        assert!(jet.normalized);
    }

    #[test]
    fn pseudosphere_alignment() {
        let n = normalize(&Preset::Pseudosphere.patch(), [0.0, 0.0], 4.0).unwrap();
        assert_eq!(n.jet.tag, CurvatureTag::Hyperbolic);
        assert!((n.jet.r + 0.5).abs() < 1e-14);
        assert!((n.jet.k0 - 2.0 * n.jet.r).abs() < 1e-10);
    }

    #[test]
    fn cleansign_scaling() {
        let n = normalize(&Preset::CleanSign.patch(), [0.0, 0.0], 4.0).unwrap();
        assert!((n.map.metric_scale - 2.0).abs() < 1e-15);
        assert!((n.jet.r - 4.0).abs() < 1e-12, "{}", n.jet.r);
        assert!(n.jet.grad_k0[0].abs() < 1e-13);
        assert!(n.jet.gamma0_norm() <= 1e-10);
    }

    #[test]
    fn rotated_gradient_is_aligned() {
        // K changes sign along a tilted line
        let patch = MetricPatch::parse(
            "g11=exp(-(x1+x2)^3/3);g12=0;g22=exp(-(x1+x2)^3/3)",
            Rect::square(1.0),
        )
        .unwrap();
        let n = normalize(&patch, [0.0, 0.0], 4.0).unwrap();
        assert_eq!(n.class.tag, CurvatureTag::CleanSignChange);
        assert!(n.jet.grad_k0[0].abs() < 1e-12);
        assert!(n.jet.grad_k0[1] > 0.0);
        assert!((n.jet.r - 4.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_is_rejected() {
        let cls = CurvatureClass {
            tag: CurvatureTag::Elliptic,
            k0: 0.0,
            grad_k0: [0.0, 0.0],
        };
        let flat = Preset::Euclidean.patch();
        assert_eq!(align_and_scale(&flat, &cls, 4.0).unwrap_err(), Error::DegenerateCase);
        let cls = classify(&flat, [0.0, 0.0], 1e-8).unwrap();
        assert_eq!(align_and_scale(&flat, &cls, 4.0).unwrap_err(), Error::DegenerateCase);
    }

    #[test]
    fn curvature_scales_by_lambda_squared() {
        let patch = Preset::CleanSign.patch();
        let scaled = patch.pullback(ChartMap::metric_scaling(2.0), Rect::square(0.5));
        let k = gaussian_curvature(&scaled, [0.0, 0.1]).unwrap();
        let k_raw = gaussian_curvature(&patch, [0.0, 0.2]).unwrap();
        assert!((k - 4.0 * k_raw).abs() < 1e-13);
    }

    #[test]
    fn pushforward_of_linear_map() {
        let map = ChartMap::linear([[1.0, 0.0], [0.0, 2f64.sqrt()]]);
        let (_, w) = pushforward_vector(&map, [0.3, 0.1], [0.0, 1.0]);
        assert_eq!(w, [0.0, 2f64.sqrt()]);
        let (x, w) = pushforward_vector(&ChartMap::identity(), [0.3, 0.1], [0.5, -1.0]);
        assert_eq!((x, w), ([0.3, 0.1], [0.5, -1.0]));
        assert!(pushforward_field(&map, &[([0.0, 5.0], [1.0, 0.0])], Rect::square(1.0)).is_err());
    }

    #[test]
    fn composed_map_matches_sequential_application() {
        let outer = ChartMap {
            x0: [0.2, -0.1],
            linear: [[1.0, 0.0], [0.0, 1.0]],
            quadratic: [[[0.3, -0.2], [-0.2, 0.1]], [[0.05, 0.4], [0.4, -0.6]]],
            metric_scale: 1.0,
        };
        let inner = ChartMap {
            linear: [[0.0, 2.0], [-2.0, 0.0]],
            metric_scale: 2.0,
            ..ChartMap::identity()
        };
        let c = outer.then_linear(&inner).unwrap();
        let z = [0.13, -0.07];
        let direct = outer.apply(inner.apply(z));
        let composed = c.apply(z);
        assert!((direct[0] - composed[0]).abs() < 1e-15 && (direct[1] - composed[1]).abs() < 1e-15);
        assert_eq!(c.metric_scale, 2.0);
    }
}
