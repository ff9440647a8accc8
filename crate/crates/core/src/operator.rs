//! The Monge-Ampere residual, its shifted form, the Darboux comparison
//! residual, and the vector-field form of the equations.

use crate::error::{Error, Result};
use crate::field::{Convention, Samples, ScalarField, VectorField2};
use crate::jet::{det2, Jet};
use crate::metric::{LocalGeometry, MetricPatch};

fn gradient(f: &Jet) -> [Jet; 2] {
    [f.diff(0), f.diff(1)]
}

/// `g^ij a_i b_j`.
fn contract(ginv: &[[Jet; 2]; 2], a: &[Jet; 2], b: &[Jet; 2]) -> Jet {
    let mut acc = &(&ginv[0][0] * &a[0]) * &b[0];
    acc = acc + &(&ginv[0][1] * &a[0]) * &b[1];
    acc = acc + &(&ginv[1][0] * &a[1]) * &b[0];
    acc + &(&ginv[1][1] * &a[1]) * &b[1]
}

/// `d_ij f - Gamma^k_ij w_k` for a given covector `w` and Hessian source `f`.
fn covariant_hessian(df: &[Jet; 2], w: &[Jet; 2], geo: &LocalGeometry) -> [[Jet; 2]; 2] {
    let entry = |i: usize, j: usize| -> Jet {
        let g = &geo.gamma;
        let hij = df[i].diff(j);
        hij - &(&g[0][i][j] * &w[0]) - &(&g[1][i][j] * &w[1])
    };
    let m01 = entry(0, 1);
    [[entry(0, 0), m01.clone()], [m01, entry(1, 1)]]
}

/// `det(d_ij f - Gamma^k_ij d_k f) - K/2 det g g^ij d_i f d_j f` as a jet of
/// order `min(f.order, geo order) - 2`.
pub fn ma_residual_jet(f: &Jet, geo: &LocalGeometry) -> Jet {
    let df = gradient(f);
    let m = covariant_hessian(&df, &df, geo);
    let grad_sq = contract(&geo.ginv, &df, &df);
    det2(&m) - &(&(&geo.curvature * &geo.detg) * &grad_sq).scale(0.5)
}

/// The shifted operator with `w = e1 + D f~`.
pub fn g_operator_jet(ftilde: &Jet, geo: &LocalGeometry) -> Jet {
    let df = gradient(ftilde);
    let w = [df[0].add_scalar(1.0), df[1].clone()];
    let m = covariant_hessian(&df, &w, geo);
    let grad_sq = contract(&geo.ginv, &w, &w);
    det2(&m) - &(&(&geo.curvature * &geo.detg) * &grad_sq).scale(0.5)
}

fn sample<F>(patch: &MetricPatch, points: &[[f64; 2]], mut eval: F) -> Result<Samples>
where
    F: FnMut([f64; 2], &LocalGeometry) -> Result<f64>,
{
    let mut values = Vec::with_capacity(points.len());
    for &p in points {
        let geo = LocalGeometry::at(patch, p, 2)?;
        values.push(eval(p, &geo)?);
    }
    Ok(Samples {
        points: points.to_vec(),
        values,
        cell_area: 1.0 / points.len().max(1) as f64,
    })
}

pub fn ma_residual(f: &ScalarField, patch: &MetricPatch, points: &[[f64; 2]]) -> Result<Samples> {
    sample(patch, points, |p, geo| Ok(ma_residual_jet(&f.jet_at(p, 2)?, geo).value()))
}

pub fn g_operator(ftilde: &ScalarField, patch: &MetricPatch, points: &[[f64; 2]]) -> Result<Samples> {
    sample(patch, points, |p, geo| Ok(g_operator_jet(&ftilde.jet_at(p, 2)?, geo).value()))
}

/// `det(Hess_g f) - K det g (1 - |grad f|_g^2)`, defined for `|grad f|_g < 1`.
pub fn darboux_residual(f: &ScalarField, patch: &MetricPatch, points: &[[f64; 2]]) -> Result<Samples> {
    sample(patch, points, |p, geo| {
        let fj = f.jet_at(p, 2)?;
        let df = gradient(&fj);
        let grad_sq = contract(&geo.ginv, &df, &df).value();
        if grad_sq >= 1.0 {
            return Err(Error::GradientTooLarge(grad_sq.sqrt()));
        }
        let m = covariant_hessian(&df, &df, geo);
        Ok(det2(&m).value() - geo.curvature.value() * geo.detg.value() * (1.0 - grad_sq))
    })
}

pub fn stream_vector(f: &ScalarField, patch: &MetricPatch, convention: Convention) -> VectorField2 {
    VectorField2::Stream {
        f: f.clone(),
        patch: patch.clone(),
        convention,
    }
}

/// `div_g Y = d_i Y^i + Gamma^k_ki Y^i` at the jet base point.
fn divergence(y: &[Jet; 2], geo: &LocalGeometry) -> f64 {
    let g = &geo.gamma;
    let mut d = y[0].derivative(1, 0) + y[1].derivative(0, 1);
    for i in 0..2 {
        let trace = g[0][0][i].value() + g[1][1][i].value();
        d += trace * y[i].value();
    }
    d
}

/// `div_g X` and `div_g(nabla_X X)` at a single point.
pub fn vector_residuals_at(x: &VectorField2, patch: &MetricPatch, p: [f64; 2]) -> Result<(f64, f64)> {
    let geo = LocalGeometry::at(patch, p, 2)?;
    let xj = x.jets_at(p, 2)?;
    let first = divergence(&xj, &geo);
    let dx = [[xj[0].diff(0), xj[0].diff(1)], [xj[1].diff(0), xj[1].diff(1)]];
    let x1 = [xj[0].truncate(1), xj[1].truncate(1)];
    let mut cov = [Jet::zero(1), Jet::zero(1)];
    for (k, ck) in cov.iter_mut().enumerate() {
        let mut acc = &x1[0] * &dx[k][0] + &x1[1] * &dx[k][1];
        for i in 0..2 {
            for j in 0..2 {
                acc = acc + &(&geo.gamma[k][i][j] * &x1[i]) * &x1[j];
            }
        }
        *ck = acc;
    }
    Ok((first, divergence(&cov, &geo)))
}

pub fn vector_residuals(
    x: &VectorField2,
    patch: &MetricPatch,
    points: &[[f64; 2]],
) -> Result<(Samples, Samples)> {
    let mut a = Vec::with_capacity(points.len());
    let mut b = Vec::with_capacity(points.len());
    for &p in points {
        let (d, dd) = vector_residuals_at(x, patch, p)?;
        a.push(d);
        b.push(dd);
    }
    let area = 1.0 / points.len().max(1) as f64;
    Ok((
        Samples {
            points: points.to_vec(),
            values: a,
            cell_area: area,
        },
        Samples {
            points: points.to_vec(),
            values: b,
            cell_area: area,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridField;
    use crate::metric::{Preset, Rect};
    use crate::normalization::normalize;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pts() -> Vec<[f64; 2]> {
        vec![[0.1, 0.2], [-0.3, 0.5], [0.7, -0.4]]
    }

    #[test]
    fn ma_residual_examples() {
        let flat = Preset::Euclidean.patch();
        let sphere = Preset::Sphere.patch();
        let c = ScalarField::expr("3.5").unwrap();
        let sp = vec![[1.2, 0.3], [2.0, -1.0]];
        assert!(ma_residual(&c, &sphere, &sp).unwrap().sup() == 0.0);
        let x1 = ScalarField::expr("x1").unwrap();
        assert_eq!(ma_residual(&x1, &flat, &pts()).unwrap().sup(), 0.0);
        let q = ScalarField::expr("(x1^2 + x2^2)/2").unwrap();
        for v in ma_residual(&q, &flat, &pts()).unwrap().values {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shifted_operator_on_normalized_charts() {
        let n = normalize(&Preset::Sphere.patch(), [PI / 2.0, 0.0], 4.0).unwrap();
        let seed = ScalarField::expr("x1^2 + 3*x1*x2 + 5/2*x2^2").unwrap();
        let v = g_operator(&seed, &n.patch, &[[0.0, 0.0]]).unwrap().values[0];
        assert!(v.abs() < 1e-14, "{v}");
        let n = normalize(&Preset::Pseudosphere.patch(), [0.0, 0.0], 4.0).unwrap();
        let seed = ScalarField::expr("x1^2/2 - x2^2/2").unwrap();
        let v = g_operator(&seed, &n.patch, &[[0.0, 0.0]]).unwrap().values[0];
        assert!(v.abs() < 1e-14, "{v}");
        let zero = ScalarField::expr("0").unwrap();
        assert_eq!(g_operator(&zero, &Preset::Euclidean.patch(), &pts()).unwrap().sup(), 0.0);
    }

    #[test]
    fn darboux_examples() {
        let zero = ScalarField::expr("0").unwrap();
        assert_eq!(darboux_residual(&zero, &Preset::Euclidean.patch(), &pts()).unwrap().sup(), 0.0);
        let v = darboux_residual(&zero, &Preset::Sphere.patch(), &[[PI / 2.0, 0.0]]).unwrap();
        assert!((v.values[0] + 1.0).abs() < 1e-14);
        let half = ScalarField::expr("x1/2").unwrap();
        assert_eq!(darboux_residual(&half, &Preset::Euclidean.patch(), &pts()).unwrap().sup(), 0.0);
        let steep = ScalarField::expr("2*x1").unwrap();
        assert!(matches!(
            darboux_residual(&steep, &Preset::Euclidean.patch(), &pts()),
            Err(Error::GradientTooLarge(_))
        ));
    }

    #[test]
    fn stream_vector_examples() {
        let flat = Preset::Euclidean.patch();
        let f = ScalarField::expr("x2").unwrap();
        for c in [Convention::PaperCoordinates, Convention::MetricWeighted] {
            assert_eq!(stream_vector(&f, &flat, c).value([0.3, 0.4]).unwrap(), [1.0, 0.0]);
        }
        let q = ScalarField::expr("(x1^2 + x2^2)/2").unwrap();
        assert_eq!(
            stream_vector(&q, &flat, Convention::MetricWeighted).value([0.3, 0.4]).unwrap(),
            [0.4, -0.3]
        );
        let stretched = MetricPatch::parse("g11=1;g12=0;g22=4", Rect::square(1.0)).unwrap();
        assert_eq!(
            stream_vector(&f, &stretched, Convention::MetricWeighted).value([0.0, 0.0]).unwrap(),
            [0.5, 0.0]
        );
        assert_eq!(
            stream_vector(&f, &stretched, Convention::PaperCoordinates).value([0.0, 0.0]).unwrap(),
            [1.0, 0.0]
        );
    }

    #[test]
    fn vector_residual_examples() {
        let flat = Preset::Euclidean.patch();
        let one = ScalarField::expr("1").unwrap();
        let zero = ScalarField::expr("0").unwrap();
        let x = VectorField2::Components(one, zero.clone());
        let (a, b) = vector_residuals(&x, &flat, &pts()).unwrap();
        assert_eq!((a.sup(), b.sup()), (0.0, 0.0));
        let x = VectorField2::Components(ScalarField::expr("x1").unwrap(), zero);
        let (a, _) = vector_residuals(&x, &flat, &pts()).unwrap();
        assert!(a.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn shift_identity_holds() {
        let patch = Preset::Sphere.patch();
        let ft = ScalarField::expr("0.3*x1^2 - x1*x2 + 0.2*sin(x2) + x1^3/7").unwrap();
        let f = ScalarField::Sum(vec![ScalarField::expr("x1").unwrap(), ft.clone()]);
        let points = [[1.0, 0.1], [1.4, -0.6], [2.2, 0.9]];
        let a = g_operator(&ft, &patch, &points).unwrap();
        let b = ma_residual(&f, &patch, &points).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_reduction() {
        // K = 0 on the flat metric, so only the Hessian determinant survives
        let flat = Preset::Euclidean.patch();
        let ft = ScalarField::expr("x1^3 + x1*x2^2 - 2*x2").unwrap();
        for p in pts() {
            let v = g_operator(&ft, &flat, &[p]).unwrap().values[0];
            let h = [[6.0 * p[0], 2.0 * p[1]], [2.0 * p[1], 2.0 * p[0]]];
            assert!((v - (h[0][0] * h[1][1] - h[0][1] * h[1][0])).abs() < 1e-13);
        }
    }

    #[test]
    fn grid_matches_exact_on_quadratics() {
        let patch = MetricPatch::parse("g11=2;g12=0.3;g22=1.5", Rect::square(2.0)).unwrap();
        let exact = ScalarField::expr("0.4*x1^2 - 0.7*x1*x2 + 1.1*x2^2 + 0.2*x1 - x2").unwrap();
        let grid = GridField::sample(33, |p| exact.value(p).unwrap()).unwrap();
        let points: Vec<[f64; 2]> = [(0, 0), (5, 9), (16, 16), (32, 20)]
            .iter()
            .map(|&(i, j)| grid.node(i, j))
            .collect();
        let gf = ScalarField::Grid(grid);
        let a = ma_residual(&exact, &patch, &points).unwrap();
        let b = ma_residual(&gf, &patch, &points).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10, "{x} {y}");
        }
    }

    #[test]
    fn grid_stream_field_is_nearly_divergence_free() {
        let sphere = Preset::Sphere.patch();
        let f = |p: [f64; 2]| (p[0] - 1.5).powi(2) * p[1] + (0.5 * p[1]).sin();
        let err = |n: usize| {
            let mut g = GridField::sample(n, |_| 0.0).unwrap();
            g.origin = [1.0, -0.5];
            g.spacing = [1.0 / (n - 1) as f64; 2];
            for j in 0..n {
                for i in 0..n {
                    let p = g.node(i, j);
                    g.values[j * n + i] = f(p);
                }
            }
            let c = (n - 1) / 2;
            let p = g.node(c + 1, c - 1);
            let x = stream_vector(&ScalarField::Grid(g), &sphere, Convention::MetricWeighted);
            vector_residuals_at(&x, &sphere, p).unwrap().0.abs()
        };
        assert!(err(33) < 1e-12);
        assert!(err(65) < 1e-12);
    }

    fn random_poly(c: &[f64]) -> ScalarField {
        ScalarField::expr(&format!(
            "{}*x1 + {}*x2 + {}*x1^2 + {}*x1*x2 + {}*x2^2 + {}*x1^3 + {}*x1^2*x2 + {}*x2^3",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]
        ))
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn weighted_stream_fields_are_divergence_free(
            c in proptest::collection::vec(-2.0f64..2.0, 8),
            u in 0.0f64..1.0,
            v in 0.0f64..1.0,
        ) {
            let f = random_poly(&c);
            for preset in Preset::ALL {
                let patch = preset.patch();
                let d = patch.domain();
                let p = [
                    d.min[0] + (0.25 + 0.5 * u) * (d.max[0] - d.min[0]),
                    d.min[1] + (0.25 + 0.5 * v) * (d.max[1] - d.min[1]),
                ];
                let x = stream_vector(&f, &patch, Convention::MetricWeighted);
                let (div, _) = vector_residuals_at(&x, &patch, p).unwrap();
                prop_assert!(div.abs() <= 1e-10, "{} at {:?}: {}", preset.name(), p, div);
            }
        }

        #[test]
        fn christoffel_symmetry(u in 0.1f64..3.0, v in -2.0f64..2.0) {
            let g = crate::metric::christoffel(&Preset::Sphere.patch(), [u, v]).unwrap();
            for k in 0..2 {
                prop_assert_eq!(g[k][0][1], g[k][1][0]);
            }
        }
    }
}
