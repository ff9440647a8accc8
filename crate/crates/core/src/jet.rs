//! Truncated bivariate Taylor polynomials.
//!
//! A [`Jet`] of order `n` holds the Taylor coefficients `c[i][j]` of a
//! function `f(x0 + dx)` in the monomials `dx1^i dx2^j` with `i + j <= n`.
//! Arithmetic on jets is exact up to floating point rounding, which gives
//! forward-mode differentiation of arbitrary order for expression trees.
//!
//! Binary operations between jets of different orders truncate to the smaller
//! order, so derived quantities (derivatives of jets) compose naturally.

use std::ops::{Add, Mul, Neg, Sub};

/// Number of coefficients of a jet of the given order.
#[inline]
pub const fn len_for_order(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Graded index of the monomial `x1^i x2^j`.
#[inline]
pub const fn index(i: usize, j: usize) -> usize {
    let d = i + j;
    d * (d + 1) / 2 + j
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    order: usize,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn zero(order: usize) -> Self {
        Jet {
            order,
            coeffs: vec![0.0; len_for_order(order)],
        }
    }

    pub fn constant(value: f64, order: usize) -> Self {
        let mut j = Jet::zero(order);
        j.coeffs[0] = value;
        j
    }

    /// The coordinate function `x_axis` expanded about `base`.
    pub fn variable(axis: usize, base: f64, order: usize) -> Self {
        assert!(axis < 2, "axis must be 0 or 1");
        let mut j = Jet::constant(base, order);
        if order >= 1 {
            let k = if axis == 0 { index(1, 0) } else { index(0, 1) };
            j.coeffs[k] = 1.0;
        }
        j
    }

    /// Builds a jet from a list of `(i, j, coefficient)` monomials; terms of
    /// total degree above `order` are dropped.
    pub fn from_monomials(order: usize, terms: &[(usize, usize, f64)]) -> Self {
        let mut j = Jet::zero(order);
        for &(a, b, c) in terms {
            if a + b <= order {
                j.coeffs[index(a, b)] += c;
            }
        }
        j
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    #[inline]
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Taylor coefficient of `x1^i x2^j` (zero above the order).
    #[inline]
    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        if i + j > self.order {
            0.0
        } else {
            self.coeffs[index(i, j)]
        }
    }

    pub fn set_coeff(&mut self, i: usize, j: usize, value: f64) {
        assert!(i + j <= self.order);
        self.coeffs[index(i, j)] = value;
    }

    /// Partial derivative `d^(i+j) f / dx1^i dx2^j` at the base point.
    pub fn derivative(&self, i: usize, j: usize) -> f64 {
        self.coeff(i, j) * factorial(i) * factorial(j)
    }

    pub fn truncate(&self, order: usize) -> Jet {
        if order >= self.order {
            return self.clone();
        }
        Jet {
            order,
            coeffs: self.coeffs[..len_for_order(order)].to_vec(),
        }
    }

    /// Jet of the partial derivative along `axis`; the order drops by one.
    pub fn diff(&self, axis: usize) -> Jet {
        assert!(self.order >= 1, "cannot differentiate an order-0 jet");
        let n = self.order - 1;
        let mut out = Jet::zero(n);
        for d in 0..=n {
            for j in 0..=d {
                let i = d - j;
                out.coeffs[index(i, j)] = if axis == 0 {
                    (i + 1) as f64 * self.coeffs[index(i + 1, j)]
                } else {
                    (j + 1) as f64 * self.coeffs[index(i, j + 1)]
                };
            }
        }
        out
    }

    /// Evaluates the truncated polynomial at the offset `d` from the base point.
    pub fn eval_offset(&self, d: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for deg in (0..=self.order).rev() {
            let mut row = 0.0;
            for j in 0..=deg {
                let i = deg - j;
                row += self.coeffs[index(i, j)] * d[0].powi(i as i32) * d[1].powi(j as i32);
            }
            acc += row;
        }
        acc
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            order: self.order,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.coeffs[0] += s;
        out
    }

    /// Rescales the expansion variable: returns the jet of `y -> f(s * y)`.
    pub fn rescale_variable(&self, s: f64) -> Jet {
        let mut out = self.clone();
        for d in 0..=self.order {
            let f = s.powi(d as i32);
            for j in 0..=d {
                out.coeffs[index(d - j, j)] *= f;
            }
        }
        out
    }

    pub fn recip(&self) -> Jet {
        Jet::constant(1.0, self.order).div(self)
    }

    /// Truncated quotient; panics only through the resulting non-finite values
    /// if the constant term of `other` vanishes.
    pub fn div(&self, other: &Jet) -> Jet {
        let n = self.order.min(other.order);
        let b0 = other.coeffs[0];
        let mut out = Jet::zero(n);
        for d in 0..=n {
            for j in 0..=d {
                let i = d - j;
                let mut acc = self.coeffs[index(i, j)];
                for p in 0..=i {
                    for q in 0..=j {
                        if p == 0 && q == 0 {
                            continue;
                        }
                        acc -= other.coeffs[index(p, q)] * out.coeffs[index(i - p, j - q)];
                    }
                }
                out.coeffs[index(i, j)] = acc / b0;
            }
        }
        out
    }

    /// Composes a scalar function with this jet given the derivatives
    /// `f(a0), f'(a0), f''(a0), ...` (at least `order + 1` of them).
    pub fn compose(&self, derivs: &[f64]) -> Jet {
        let n = self.order;
        let mut delta = self.clone();
        delta.coeffs[0] = 0.0;
        let mut out = Jet::constant(derivs[0], n);
        let mut power = Jet::constant(1.0, n);
        let mut fact = 1.0;
        for (k, dk) in derivs.iter().enumerate().take(n + 1).skip(1) {
            power = &power * &delta;
            fact *= k as f64;
            let c = dk / fact;
            if c != 0.0 {
                for (o, p) in out.coeffs.iter_mut().zip(&power.coeffs) {
                    *o += c * p;
                }
            }
        }
        out
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        self.compose(&vec![e; self.order + 1])
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let d: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&d)
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let d: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&d)
    }

    pub fn sinh(&self) -> Jet {
        let a = self.value();
        let (s, c) = (a.sinh(), a.cosh());
        let d: Vec<f64> = (0..=self.order).map(|k| if k % 2 == 0 { s } else { c }).collect();
        self.compose(&d)
    }

    pub fn cosh(&self) -> Jet {
        let a = self.value();
        let (s, c) = (a.sinh(), a.cosh());
        let d: Vec<f64> = (0..=self.order).map(|k| if k % 2 == 0 { c } else { s }).collect();
        self.compose(&d)
    }

    /// Natural logarithm; the constant term must be positive.
    pub fn ln(&self) -> Jet {
        let a = self.value();
        let mut d = Vec::with_capacity(self.order + 1);
        d.push(a.ln());
        let mut fact = 1.0;
        for k in 1..=self.order {
            if k > 1 {
                fact *= (k - 1) as f64;
            }
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            d.push(sign * fact / a.powi(k as i32));
        }
        self.compose(&d)
    }

    pub fn powi(&self, p: i32) -> Jet {
        if p < 0 {
            return self.powi(-p).recip();
        }
        let mut out = Jet::constant(1.0, self.order);
        let mut base = self.clone();
        let mut e = p as u32;
        while e > 0 {
            if e & 1 == 1 {
                out = &out * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        out
    }

    /// Real power; the constant term must be positive.
    pub fn powf(&self, p: f64) -> Jet {
        let a = self.value();
        let mut d = Vec::with_capacity(self.order + 1);
        let mut c = 1.0;
        for k in 0..=self.order {
            d.push(c * a.powf(p - k as f64));
            c *= p - k as f64;
        }
        self.compose(&d)
    }

    pub fn sqrt(&self) -> Jet {
        self.powf(0.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

impl<'a> Add<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn add(self, rhs: &'a Jet) -> Jet {
        let n = self.order.min(rhs.order);
        let len = len_for_order(n);
        Jet {
            order: n,
            coeffs: (0..len).map(|k| self.coeffs[k] + rhs.coeffs[k]).collect(),
        }
    }
}

impl<'a> Sub<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn sub(self, rhs: &'a Jet) -> Jet {
        let n = self.order.min(rhs.order);
        let len = len_for_order(n);
        Jet {
            order: n,
            coeffs: (0..len).map(|k| self.coeffs[k] - rhs.coeffs[k]).collect(),
        }
    }
}

impl<'a> Mul<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn mul(self, rhs: &'a Jet) -> Jet {
        let n = self.order.min(rhs.order);
        let mut out = Jet::zero(n);
        for d1 in 0..=n {
            for j1 in 0..=d1 {
                let a = self.coeffs[index(d1 - j1, j1)];
                if a == 0.0 {
                    continue;
                }
                for d2 in 0..=(n - d1) {
                    for j2 in 0..=d2 {
                        out.coeffs[index(d1 - j1 + d2 - j2, j1 + j2)] +=
                            a * rhs.coeffs[index(d2 - j2, j2)];
                    }
                }
            }
        }
        out
    }
}

impl<'a> Neg for &'a Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Jet> for Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                (&self).$m(&rhs)
            }
        }
        impl<'a> $tr<&'a Jet> for Jet {
            type Output = Jet;
            fn $m(self, rhs: &'a Jet) -> Jet {
                (&self).$m(rhs)
            }
        }
        impl<'a> $tr<Jet> for &'a Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

/// Determinant of a symmetric-or-not 2x2 matrix of jets.
pub fn det2(m: &[[Jet; 2]; 2]) -> Jet {
    &m[0][0] * &m[1][1] - &m[0][1] * &m[1][0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(order: usize, base: [f64; 2]) -> (Jet, Jet) {
        (Jet::variable(0, base[0], order), Jet::variable(1, base[1], order))
    }

    #[test]
    fn product_matches_polynomial_expansion() {
        let (a, b) = x(4, [0.0, 0.0]);
        let p = (&a + &b).powi(3);
        // (x + y)^3 = x^3 + 3x^2y + 3xy^2 + y^3
        assert_eq!(p.coeff(3, 0), 1.0);
        assert_eq!(p.coeff(2, 1), 3.0);
        assert_eq!(p.coeff(1, 2), 3.0);
        assert_eq!(p.coeff(0, 3), 1.0);
        assert_eq!(p.coeff(0, 0), 0.0);
    }

    #[test]
    fn division_inverts_multiplication() {
        let (a, b) = x(4, [0.3, -0.7]);
        let num = (&a * &b).exp();
        let den = a.cosh() + b.sin().scale(0.1);
        let q = num.div(&den);
        let back = &q * &den;
        for (u, v) in back.coeffs().iter().zip(num.coeffs()) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn exp_derivatives() {
        let (a, _) = x(4, [0.5, 0.0]);
        let e = a.scale(2.0).exp();
        for k in 0..=4 {
            let expected = 2f64.powi(k as i32) * 1f64.exp();
            assert!((e.derivative(k, 0) - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn trig_and_log_derivatives() {
        let (a, _) = x(4, [0.4, 0.0]);
        let s = a.sin();
        assert!((s.derivative(3, 0) + 0.4f64.cos()).abs() < 1e-14);
        let l = a.ln();
        // d^4/dx^4 ln x = -6 / x^4
        assert!((l.derivative(4, 0) + 6.0 / 0.4f64.powi(4)).abs() < 1e-9);
        let r = a.powf(2.5);
        assert!((r.derivative(2, 0) - 2.5 * 1.5 * 0.4f64.powf(0.5)).abs() < 1e-13);
    }

    #[test]
    fn diff_lowers_order() {
        let (a, b) = x(3, [0.0, 0.0]);
        let f = &(&a * &a) * &b; // x^2 y
        let fx = f.diff(0);
        assert_eq!(fx.order(), 2);
        assert_eq!(fx.coeff(1, 1), 2.0);
        let fy = f.diff(1);
        assert_eq!(fy.coeff(2, 0), 1.0);
    }

    #[test]
    fn mixed_orders_truncate() {
        let a = Jet::variable(0, 1.0, 4);
        let b = Jet::variable(1, 1.0, 2);
        assert_eq!((&a * &b).order(), 2);
    }
}
