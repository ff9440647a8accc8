//! Stopping and divergence rules shared by the fixed-point loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio above which an iteration counts as non-contracting.
pub const STALL_RATIO: f64 = 0.9;
/// Consecutive stalled iterations that abort the loop.
pub const STALL_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardControl {
    /// Absolute sup-norm tolerance on successive iterates.
    pub tol: f64,
    /// Relative tolerance against the iterate norm, to stop above roundoff.
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for PicardControl {
    fn default() -> Self {
        PicardControl {
            tol: 1e-12,
            rtol: 1e-10,
            max_iter: 50,
        }
    }
}

impl PicardControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.rtol >= 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig(format!(
                "need tol > 0, rtol >= 0 and max_iter >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Successive differences and contraction ratios of a fixed-point loop.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PicardLog {
    pub diffs: Vec<f64>,
    /// `diffs[k] / diffs[k - 1]`, starting with the second iteration.
    pub ratios: Vec<f64>,
    pub converged: bool,
    #[serde(skip)]
    stalled: usize,
}

impl PicardLog {
    pub fn iterations(&self) -> usize {
        self.diffs.len()
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().fold(0.0, |m, r| m.max(*r))
    }

    /// Records one iteration. Returns `true` once converged.
    pub fn record(&mut self, diff: f64, norm: f64, ctl: &PicardControl) -> Result<bool> {
        let it = self.diffs.len() + 1;
        if !diff.is_finite() || !norm.is_finite() {
            return Err(Error::NoContraction {
                iteration: it,
                ratio: f64::NAN,
            });
        }
        if let Some(prev) = self.diffs.last() {
            let ratio = if *prev > 0.0 { diff / prev } else { 0.0 };
            self.ratios.push(ratio);
            if ratio > STALL_RATIO {
                self.stalled += 1;
                if self.stalled >= STALL_COUNT {
                    self.diffs.push(diff);
                    return Err(Error::NoContraction { iteration: it, ratio });
                }
            } else {
                self.stalled = 0;
            }
        }
        self.diffs.push(diff);
        if diff <= ctl.tol || diff <= ctl.rtol * norm {
            self.converged = true;
            return Ok(true);
        }
        if it >= ctl.max_iter {
            return Err(Error::MaxIterExceeded(it));
        }
        Ok(false)
    }
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.is_nan() && y.is_nan() {
            continue;
        }
        let d = (x - y).abs();
        if d.is_nan() {
            return f64::NAN;
        }
        m = m.max(d);
    }
    m
}

pub fn sup_norm(a: &[f64]) -> f64 {
    a.iter().filter(|v| !v.is_nan()).fold(0.0, |m, v| m.max(v.abs()))
}
