//! Scalar and vector fields that can produce Taylor jets at sample points.

use std::io::Write;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jet::Jet;
use crate::metric::MetricPatch;

/// Minimum number of grid points per axis.
pub const MIN_GRID_POINTS: usize = 5;

/// Finite-difference weights for the derivatives of order `0..=m` at `z`
/// from samples at `xs` (Fornberg's recursion). Returns `w[k][i]`.
pub fn fd_weights(z: f64, xs: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - z;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Formal accuracy of grid derivative stencils.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdAccuracy {
    Second,
    Fourth,
}

impl FdAccuracy {
    fn order(self) -> usize {
        match self {
            FdAccuracy::Second => 2,
            FdAccuracy::Fourth => 4,
        }
    }
}

/// Stencil window `[start, start + len)` for derivative `d` at index `i` of `n`.
fn stencil_window(i: usize, n: usize, d: usize, acc: FdAccuracy) -> Result<(usize, usize)> {
    if d == 0 {
        return Ok((i, 1));
    }
    let p = acc.order();
    let centred = 2 * ((d + p - 1) / 2) + 1;
    let half = centred / 2;
    if i >= half && i + half < n {
        return Ok((i - half, centred));
    }
    let len = d + p;
    if len > n {
        return Err(Error::GridTooCoarse(n));
    }
    let start = if i < half { 0 } else { n - len };
    Ok((start, len))
}

/// Samples on a uniform tensor grid, optionally in a rotated frame:
/// world point `x = frame * (xi, eta)` with orthonormal `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub shape: [usize; 2],
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    /// Row-major in the second axis: `values[j * shape[0] + i]`.
    pub values: Vec<f64>,
    pub frame: Option<[[f64; 2]; 2]>,
    pub accuracy: FdAccuracy,
}

impl GridField {
    pub fn new(shape: [usize; 2], origin: [f64; 2], spacing: [f64; 2], values: Vec<f64>) -> Result<Self> {
        if shape[0] < MIN_GRID_POINTS || shape[1] < MIN_GRID_POINTS {
            return Err(Error::GridTooCoarse(shape[0].min(shape[1])));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
            return Err(Error::InvalidConfig("grid spacing must be positive".into()));
        }
        if values.len() != shape[0] * shape[1] {
            return Err(Error::InvalidConfig(format!(
                "expected {} grid values, got {}",
                shape[0] * shape[1],
                values.len()
            )));
        }
        Ok(GridField {
            shape,
            origin,
            spacing,
            values,
            frame: None,
            accuracy: FdAccuracy::Second,
        })
    }

    /// `n x n` nodes covering `[-1, 1]^2`.
    pub fn unit_square(n: usize, values: Vec<f64>) -> Result<Self> {
        let h = 2.0 / (n.max(2) - 1) as f64;
        GridField::new([n, n], [-1.0, -1.0], [h, h], values)
    }

    pub fn sample(n: usize, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let mut g = GridField::unit_square(n, vec![0.0; n * n])?;
        for j in 0..n {
            for i in 0..n {
                let p = g.node(i, j);
                g.values[j * n + i] = f(p);
            }
        }
        Ok(g)
    }

    pub fn with_frame(mut self, frame: [[f64; 2]; 2]) -> Self {
        self.frame = Some(frame);
        self
    }

    pub fn with_accuracy(mut self, accuracy: FdAccuracy) -> Self {
        self.accuracy = accuracy;
        self
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.shape[0] + i]
    }

    pub fn local_node(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    /// World coordinates of node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let l = self.local_node(i, j);
        match &self.frame {
            None => l,
            Some(f) => [f[0][0] * l[0] + f[0][1] * l[1], f[1][0] * l[0] + f[1][1] * l[1]],
        }
    }

    fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        match &self.frame {
            None => p,
            Some(f) => [f[0][0] * p[0] + f[1][0] * p[1], f[0][1] * p[0] + f[1][1] * p[1]],
        }
    }

    /// Node indices of a world point lying on the grid.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, usize)> {
        let l = self.to_local(p);
        let mut idx = [0usize; 2];
        for a in 0..2 {
            let s = (l[a] - self.origin[a]) / self.spacing[a];
            let r = s.round();
            if (s - r).abs() > 1e-6 || r < 0.0 || r as usize >= self.shape[a] {
                return Err(Error::Eval(format!(
                    "point ({:.6}, {:.6}) is not a grid node",
                    p[0], p[1]
                )));
            }
            idx[a] = r as usize;
        }
        Ok((idx[0], idx[1]))
    }

    /// Mixed partial `d^a/dxi^a d^b/deta^b` at node `(i, j)` in the local frame.
    pub fn partial(&self, i: usize, j: usize, a: usize, b: usize) -> Result<f64> {
        let (s0, l0) = stencil_window(i, self.shape[0], a, self.accuracy)?;
        let (s1, l1) = stencil_window(j, self.shape[1], b, self.accuracy)?;
        let xs0: Vec<f64> = (s0..s0 + l0).map(|k| (k as f64 - i as f64) * self.spacing[0]).collect();
        let xs1: Vec<f64> = (s1..s1 + l1).map(|k| (k as f64 - j as f64) * self.spacing[1]).collect();
        let w0 = &fd_weights(0.0, &xs0, a)[a];
        let w1 = &fd_weights(0.0, &xs1, b)[b];
        let mut acc = 0.0;
        for (q, wq) in w1.iter().enumerate() {
            if *wq == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (k, wk) in w0.iter().enumerate() {
                row += wk * self.at(s0 + k, s1 + q);
            }
            acc += wq * row;
        }
        Ok(acc)
    }

    /// Taylor jet at node `(i, j)` in world coordinates.
    pub fn jet_at_node(&self, i: usize, j: usize, order: usize) -> Result<Jet> {
        let mut local = Jet::zero(order);
        let mut fact = vec![1.0; order + 1];
        for k in 1..=order {
            fact[k] = fact[k - 1] * k as f64;
        }
        for d in 0..=order {
            for b in 0..=d {
                let a = d - b;
                let v = self.partial(i, j, a, b)?;
                local.set_coeff(a, b, v / (fact[a] * fact[b]));
            }
        }
        let f = match &self.frame {
            None => return Ok(local),
            Some(f) => f,
        };
        // local coordinates as linear jets of the world offsets
        let xi = Jet::variable(0, 0.0, order).scale(f[0][0]) + Jet::variable(1, 0.0, order).scale(f[1][0]);
        let eta = Jet::variable(0, 0.0, order).scale(f[0][1]) + Jet::variable(1, 0.0, order).scale(f[1][1]);
        let mut out = Jet::constant(local.value(), order);
        let mut xi_pows = vec![Jet::constant(1.0, order)];
        let mut eta_pows = vec![Jet::constant(1.0, order)];
        for k in 1..=order {
            xi_pows.push(&xi_pows[k - 1] * &xi);
            eta_pows.push(&eta_pows[k - 1] * &eta);
        }
        for d in 1..=order {
            for b in 0..=d {
                let a = d - b;
                let c = local.coeff(a, b);
                if c != 0.0 {
                    out = out + (&xi_pows[a] * &eta_pows[b]).scale(c);
                }
            }
        }
        Ok(out)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Sparse polynomial `sum c x1^i x2^j`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Polynomial {
    pub terms: Vec<(usize, usize, f64)>,
}

impl Polynomial {
    pub fn new(terms: Vec<(usize, usize, f64)>) -> Self {
        Polynomial { terms }
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|&(i, j, c)| c * p[0].powi(i as i32) * p[1].powi(j as i32))
            .sum()
    }

    pub fn jet_at(&self, p: [f64; 2], order: usize) -> Jet {
        let x = Jet::variable(0, p[0], order);
        let y = Jet::variable(1, p[1], order);
        let deg = self.terms.iter().map(|t| t.0.max(t.1)).max().unwrap_or(0);
        let mut xp = vec![Jet::constant(1.0, order)];
        let mut yp = vec![Jet::constant(1.0, order)];
        for k in 1..=deg {
            xp.push(&xp[k - 1] * &x);
            yp.push(&yp[k - 1] * &y);
        }
        let mut out = Jet::zero(order);
        for &(i, j, c) in &self.terms {
            out = out + (&xp[i] * &yp[j]).scale(c);
        }
        out
    }
}

/// A scalar field that can be differentiated at sample points.
#[derive(Clone, Debug)]
pub enum ScalarField {
    Expr(Expr),
    Poly(Polynomial),
    /// Derivatives by finite differences; only defined at grid nodes.
    Grid(GridField),
    Sum(Vec<ScalarField>),
    /// `amp * inner(x / space)`.
    Rescaled {
        inner: Box<ScalarField>,
        space: f64,
        amp: f64,
    },
}

impl ScalarField {
    pub fn expr(src: &str) -> Result<Self> {
        Ok(ScalarField::Expr(Expr::parse(src)?))
    }

    pub fn jet_at(&self, p: [f64; 2], order: usize) -> Result<Jet> {
        match self {
            ScalarField::Expr(e) => e.jet_at(p, order),
            ScalarField::Poly(q) => Ok(q.jet_at(p, order)),
            ScalarField::Grid(g) => {
                let (i, j) = g.locate(p)?;
                g.jet_at_node(i, j, order)
            }
            ScalarField::Sum(parts) => {
                let mut acc = Jet::zero(order);
                for f in parts {
                    acc = acc + f.jet_at(p, order)?;
                }
                Ok(acc)
            }
            ScalarField::Rescaled { inner, space, amp } => {
                let q = [p[0] / space, p[1] / space];
                Ok(inner.jet_at(q, order)?.rescale_variable(1.0 / space).scale(*amp))
            }
        }
    }

    pub fn value(&self, p: [f64; 2]) -> Result<f64> {
        Ok(self.jet_at(p, 0)?.value())
    }
}

/// Convention for turning a stream function into a vector field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Convention {
    /// `(d2 f, -d1 f)`.
    PaperCoordinates,
    /// `(det g)^-1/2 (d2 f, -d1 f)`, divergence free in any chart.
    #[default]
    MetricWeighted,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::PaperCoordinates => "paper_coordinates",
            Convention::MetricWeighted => "metric_weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Convention> {
        match s {
            "paper_coordinates" | "paper" => Some(Convention::PaperCoordinates),
            "metric_weighted" | "weighted" => Some(Convention::MetricWeighted),
            _ => None,
        }
    }
}

/// A planar vector field given either componentwise or as the rotated gradient
/// of a stream function.
#[derive(Clone, Debug)]
pub enum VectorField2 {
    Components(ScalarField, ScalarField),
    Stream {
        f: ScalarField,
        patch: MetricPatch,
        convention: Convention,
    },
}

impl VectorField2 {
    pub fn jets_at(&self, p: [f64; 2], order: usize) -> Result<[Jet; 2]> {
        match self {
            VectorField2::Components(a, b) => Ok([a.jet_at(p, order)?, b.jet_at(p, order)?]),
            VectorField2::Stream { f, patch, convention } => {
                let fj = f.jet_at(p, order + 1)?;
                let x1 = fj.diff(1);
                let x2 = -fj.diff(0);
                match convention {
                    Convention::PaperCoordinates => Ok([x1, x2]),
                    Convention::MetricWeighted => {
                        let g = patch.metric_jets(p, order)?;
                        let det = crate::jet::det2(&g);
                        if !(det.value() > 0.0) {
                            return Err(Error::SingularMetric {
                                x: p[0],
                                y: p[1],
                                det: det.value(),
                            });
                        }
                        let w = det.sqrt().recip();
                        Ok([&x1 * &w, &x2 * &w])
                    }
                }
            }
        }
    }

    pub fn value(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let j = self.jets_at(p, 0)?;
        Ok([j[0].value(), j[1].value()])
    }
}

/// Values of a field at a list of points, with the cell area used for the
/// grid-weighted L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub cell_area: f64,
}

impl Samples {
    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| {
            if v.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(v.abs())
            }
        })
    }

    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_area).sqrt()
    }
}

/// Writes `x1,x2,<names...>` rows with 17 significant digits.
pub fn write_csv<W: Write>(
    mut out: W,
    names: &[&str],
    points: &[[f64; 2]],
    columns: &[&[f64]],
) -> Result<()> {
    write!(out, "x1,x2")?;
    for n in names {
        write!(out, ",{n}")?;
    }
    writeln!(out)?;
    for (r, p) in points.iter().enumerate() {
        write!(out, "{:.16e},{:.16e}", p[0], p[1])?;
        for c in columns {
            write!(out, ",{:.16e}", c[r])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
