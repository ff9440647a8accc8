//! Fixtures shared by the benchmarks.

use asymdir::banded::BandMatrix;
use asymdir::{normalize, scale_problem, seed_elliptic, seed_hyperbolic, Preset, ScaledProblem};

/// Five-point Laplacian with Dirichlet rows on an `n x n` grid.
pub fn laplacian(n: usize) -> BandMatrix {
    let mut m = BandMatrix::zeros(n * n, n, n);
    for j in 0..n {
        for i in 0..n {
            let k = j * n + i;
            if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                m.add(k, k, 1.0);
                continue;
            }
            m.add(k, k, -4.0);
            for l in [k - 1, k + 1, k - n, k + n] {
                m.add(k, l, 1.0);
            }
        }
    }
    m
}

pub fn sphere_problem(eps: f64) -> ScaledProblem {
    let p = Preset::Sphere;
    let n = normalize(&p.patch(), p.base_point(), 4.0).unwrap();
    let seed = seed_elliptic(&n.patch, &n.jet).unwrap();
    scale_problem(&seed, &n.patch, eps).unwrap()
}

pub fn pseudosphere_problem(eps: f64) -> ScaledProblem {
    let p = Preset::Pseudosphere;
    let n = normalize(&p.patch(), p.base_point(), 4.0).unwrap();
    let seed = seed_hyperbolic(&n.patch, &n.jet).unwrap();
    scale_problem(&seed, &n.patch, eps).unwrap()
}
