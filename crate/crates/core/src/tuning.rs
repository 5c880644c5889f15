//! Extended BIC over the (lambda, psi) grid.

use serde::{Deserialize, Serialize};

use crate::error::{FlcmError, Result};

/// Returned in place of `-inf` when a fit interpolates the data.
pub const PERFECT_FIT_EBIC: f64 = -1e300;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TuningGrid {
    pub lambda_count: usize,
    /// Smallest lambda as a fraction of lambda_max.
    pub lambda_min_ratio: f64,
    pub psi_grid: Vec<f64>,
    pub ebic_gamma: f64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            lambda_count: 100,
            lambda_min_ratio: 1e-3,
            psi_grid: vec![0.0, 0.1, 1.0, 10.0, 100.0],
            ebic_gamma: 1.0,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_count == 0 || self.psi_grid.is_empty() {
            return Err(FlcmError::Config("tuning grids must be nonempty".into()));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio <= 1.0) {
            return Err(FlcmError::Config(format!(
                "lambda_min_ratio {} must lie in (0, 1]",
                self.lambda_min_ratio
            )));
        }
        if self.psi_grid.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(FlcmError::Config("psi values must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.ebic_gamma) {
            return Err(FlcmError::Config(format!("ebic_gamma {} must lie in [0, 1]", self.ebic_gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ebic {
    pub value: f64,
    /// Set when rss was zero and `value` is the [`PERFECT_FIT_EBIC`] sentinel.
    pub perfect_fit: bool,
}

fn ln_choose(p: usize, k: usize) -> f64 {
    let k = k.min(p - k.min(p));
    (0..k).map(|i| ((p - i) as f64 / (i + 1) as f64).ln()).sum()
}

/// `n log(rss/n) + df log n + 2 gamma log C(p, k)`.
pub fn ebic(rss: f64, n_rows: usize, df: usize, p: usize, k_selected: usize, gamma: f64) -> Result<Ebic> {
    if n_rows == 0 {
        return Err(FlcmError::Config("EBIC needs at least one row".into()));
    }
    if k_selected > p {
        return Err(FlcmError::Config(format!("{k_selected} selected out of {p}")));
    }
    if !(rss >= 0.0) {
        return Err(FlcmError::Numerical(format!("rss {rss} is not a valid sum of squares")));
    }
    if rss == 0.0 {
        return Ok(Ebic {
            value: PERFECT_FIT_EBIC,
            perfect_fit: true,
        });
    }
    let n = n_rows as f64;
    Ok(Ebic {
        value: n * (rss / n).ln() + df as f64 * n.ln() + 2.0 * gamma * ln_choose(p, k_selected),
        perfect_fit: false,
    })
}

/// One scored point of the tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda: f64,
    pub psi: f64,
    pub ebic: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

/// Index of the EBIC minimizer.
///
/// Values within a relative `1e-9` of the minimum count as ties; ties go to
/// the larger lambda, then the larger psi.
pub fn select_model(candidates: &[Candidate]) -> Result<usize> {
    let finite: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].ebic.is_finite()).collect();
    if finite.is_empty() {
        return Err(FlcmError::Numerical("no tuning point produced a usable fit".into()));
    }
    let best = finite.iter().map(|&i| candidates[i].ebic).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut pick: Option<usize> = None;
    for &i in &finite {
        if candidates[i].ebic > best + tol {
            continue;
        }
        pick = match pick {
            None => Some(i),
            Some(j) => {
                let (a, b) = (&candidates[i], &candidates[j]);
                let better = if close(a.lambda, b.lambda) { a.psi > b.psi } else { a.lambda > b.lambda };
                Some(if better { i } else { j })
            }
        };
    }
    Ok(pick.expect("at least one finite candidate"))
}
