//! Banded LU factorization with partial pivoting.

use crate::error::{Error, Result};

/// Square band matrix with `kl` sub- and `ku` super-diagonals, stored column-major
/// with `kl` extra rows for pivoting fill.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> BandMatrix {
        let ld = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            ld,
            data: vec![0.0; ld * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ld + (self.kl + self.ku + i - j)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i <= j + self.kl && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    /// Adds `v` to entry `(i, j)`. Panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band {}/{}", self.kl, self.ku);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi += self.data[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    /// In-place LU with row pivoting.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > 1e-14 * scale) {
                return Err(Error::SingularLinearSystem { pivot: k });
            }
            piv[k] = p;
            let jmax = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            let col = self.idx(k + 1, k);
            let cnt = last - k;
            for v in &mut self.data[col..col + cnt] {
                *v /= pivot;
            }
            for j in k + 1..=jmax {
                let akj = self.data[self.idx(k, j)];
                if akj == 0.0 {
                    continue;
                }
                let dst = self.idx(k + 1, j);
                for r in 0..cnt {
                    let l = self.data[col + r];
                    self.data[dst + r] -= l * akj;
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Clone, Debug)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let n = m.n;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                let last = (k + m.kl).min(n - 1);
                let col = m.idx(k, k);
                for i in k + 1..=last {
                    x[i] -= m.data[col + (i - k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let xk = x[k] / m.data[m.idx(k, k)];
            x[k] = xk;
            if xk != 0.0 {
                let first = k.saturating_sub(m.kl + m.ku);
                for i in first..k {
                    x[i] -= m.data[m.idx(i, k)] * xk;
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dense(m: &BandMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(m.dim(), m.dim(), |i, j| m.get(i, j))
    }

    #[test]
    fn tridiagonal_solve() {
        let n = 6;
        let mut m = BandMatrix::zeros(n, 1, 1);
        for i in 0..n {
            m.add(i, i, 2.0);
            if i > 0 {
                m.add(i, i - 1, -1.0);
                m.add(i - 1, i, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let b = m.mul_vec(&x);
        let lu = m.factor().unwrap();
        let y = lu.solve(&b);
        for (a, e) in y.iter().zip(&x) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn needs_pivoting() {
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.add(0, 1, 1.0);
        m.add(1, 0, 1.0);
        m.add(1, 2, 1.0);
        m.add(2, 1, 1.0);
        m.add(2, 2, 1.0);
        let lu = m.clone().factor().unwrap();
        let x = lu.solve(&[1.0, 2.0, 3.0]);
        let back = m.mul_vec(&x);
        for (a, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_detected() {
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.add(0, 0, 1.0);
        m.add(1, 0, 1.0);
        assert!(matches!(m.factor(), Err(Error::SingularLinearSystem { .. })));
    }

    proptest! {
        #[test]
        fn matches_dense_lu(
            n in 3usize..24,
            kl in 0usize..4,
            ku in 0usize..4,
            seed in proptest::collection::vec(-1.0f64..1.0, 24 * 24),
            rhs in proptest::collection::vec(-1.0f64..1.0, 24),
        ) {
            let mut m = BandMatrix::zeros(n, kl, ku);
            for i in 0..n {
                for j in 0..n {
                    if m.in_band(i, j) {
                        m.add(i, j, seed[i * 24 + j]);
                    }
                }
                m.add(i, i, 0.5 * seed[i * 24 + (i + 1) % 24].signum());
            }
            let d = dense(&m);
            let b = &rhs[..n];
            let Some(oracle) = d.clone().lu().solve(&DVector::from_column_slice(b)) else {
                return Ok(());
            };
            let cond = d.clone().svd(false, false).singular_values;
            prop_assume!(cond.min() > 1e-6 * cond.max());
            let x = m.factor().unwrap().solve(b);
            for i in 0..n {
                prop_assert!((x[i] - oracle[i]).abs() <= 1e-8 * (1.0 + oracle.amax()));
            }
        }
    }
}
