//! Subject-level bootstrap bands for the coefficient functions.
//!
//! Each resample draws `n` subjects with replacement and reruns the whole
//! pipeline, selection included. A covariate left out of a resample's model
//! contributes the zero curve for that resample.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalDataset;
use crate::error::{FlcmError, Result};
use crate::flcm::{fit_prepared, prepare, FitOptions, FitResult};
use crate::par::{map_indexed, Execution};
use crate::sim::replicate_rng;
use crate::solver::PenaltyFamily;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Evaluation points spanning the domain.
    pub grid_points: usize,
    /// Percentiles of the band, in percent.
    pub lower_pct: f64,
    pub upper_pct: f64,
    /// Largest tolerated share of failed resamples.
    pub max_failure_fraction: f64,
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 200,
            seed: 1,
            grid_points: 101,
            lower_pct: 2.5,
            upper_pct: 97.5,
            max_failure_fraction: 0.2,
            execution: Execution::Parallel,
        }
    }
}

impl BootstrapOptions {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(FlcmError::Config(format!(
                "the bootstrap needs at least 2 resamples, got {}",
                self.replicates
            )));
        }
        if self.grid_points < 2 {
            return Err(FlcmError::Config("the band grid needs at least two points".into()));
        }
        if !(0.0 <= self.lower_pct && self.lower_pct <= self.upper_pct && self.upper_pct <= 100.0) {
            return Err(FlcmError::Config("band percentiles must satisfy 0 <= lower <= upper <= 100".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(FlcmError::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Percentile `pct` (in percent) of ascending `sorted`, interpolating
/// linearly between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateBand {
    pub name: String,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Share of successful resamples that selected the covariate.
    pub selection_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub method: PenaltyFamily,
    pub grid: Vec<f64>,
    pub bands: Vec<CovariateBand>,
    /// `selected[b][j]`: whether resample `b` kept covariate `j`.
    pub selected: Vec<Vec<bool>>,
    /// `curves[j][b]`: covariate `j`'s curve on the grid in resample `b`.
    pub curves: Vec<Vec<Vec<f64>>>,
    pub failures: Vec<String>,
}

impl BootstrapResult {
    /// Successful resamples.
    pub fn replicates(&self) -> usize {
        self.selected.len()
    }

    /// Pointwise percentile band of covariate `j` at arbitrary levels.
    pub fn band(&self, j: usize, lower_pct: f64, upper_pct: f64) -> (Vec<f64>, Vec<f64>) {
        let mut lower = Vec::with_capacity(self.grid.len());
        let mut upper = Vec::with_capacity(self.grid.len());
        let mut column = vec![0.0; self.curves[j].len()];
        for t in 0..self.grid.len() {
            for (c, curve) in column.iter_mut().zip(&self.curves[j]) {
                *c = curve[t];
            }
            column.sort_by(f64::total_cmp);
            lower.push(percentile(&column, lower_pct));
            upper.push(percentile(&column, upper_pct));
        }
        (lower, upper)
    }

    /// `t,lower,upper,estimate` rows for covariate `j`.
    pub fn write_band_csv<W: Write>(&self, j: usize, writer: W) -> Result<()> {
        let band = &self.bands[j];
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "lower", "upper", "estimate"])?;
        for (k, t) in self.grid.iter().enumerate() {
            w.write_record([
                t.to_string(),
                band.lower[k].to_string(),
                band.upper[k].to_string(),
                band.estimate[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Subject indices for resample `b`.
pub fn resample_indices(seed: u64, b: u64, n: usize) -> Vec<usize> {
    let mut rng = replicate_rng(seed, b);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn refit(data: &FunctionalDataset, fit: &FitOptions, family: PenaltyFamily) -> Result<FitResult> {
    let prep = prepare(data, fit)?;
    fit_prepared(&prep, fit, family)
}

/// Bootstrap bands from explicitly given subject draws.
pub fn bootstrap_from_draws(
    data: &FunctionalDataset,
    fit: &FitOptions,
    family: PenaltyFamily,
    opts: &BootstrapOptions,
    draws: &[Vec<usize>],
) -> Result<BootstrapResult> {
    let b = draws.len();
    if b < 2 {
        return Err(FlcmError::Config(format!("the bootstrap needs at least 2 resamples, got {b}")));
    }
    let full = refit(data, fit, family)?;
    let grid = fit.domain.unwrap_or(data.domain).linspace(opts.grid_points);
    let p = data.p();
    let outcomes = map_indexed(opts.execution, b, |r| {
        let resample = data.resample(&draws[r])?;
        let f = refit(&resample, fit, family)?;
        let curves: Vec<Vec<f64>> = (0..p).map(|j| f.beta_curve(j, &grid)).collect();
        let chosen: Vec<bool> = (0..p).map(|j| f.selected.contains(&j)).collect();
        Ok::<_, FlcmError>((chosen, curves))
    });
    let mut selected = Vec::with_capacity(b);
    let mut curves = vec![Vec::with_capacity(b); p];
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((chosen, c)) => {
                selected.push(chosen);
                for (j, curve) in c.into_iter().enumerate() {
                    curves[j].push(curve);
                }
            }
            Err(e) => {
                log::warn!("resample {r} failed: {e}");
                failures.push(format!("resample {r}: {e}"));
            }
        }
    }
    if failures.len() as f64 > opts.max_failure_fraction * b as f64 || selected.is_empty() {
        return Err(FlcmError::Numerical(format!(
            "{} of {b} bootstrap resamples failed; first: {}",
            failures.len(),
            failures.first().map(String::as_str).unwrap_or("none")
        )));
    }
    let mut result = BootstrapResult {
        method: family,
        grid,
        bands: Vec::with_capacity(p),
        selected,
        curves,
        failures,
    };
    for j in 0..p {
        let (lower, upper) = result.band(j, opts.lower_pct, opts.upper_pct);
        let kept = result.selected.iter().filter(|s| s[j]).count();
        result.bands.push(CovariateBand {
            name: data.covariate_names[j].clone(),
            estimate: full.beta_curve(j, &result.grid),
            lower,
            upper,
            selection_rate: kept as f64 / result.replicates() as f64,
        });
    }
    Ok(result)
}

/// Percentile bands from `opts.replicates` subject-level resamples.
pub fn bootstrap_ci(
    data: &FunctionalDataset,
    fit: &FitOptions,
    family: PenaltyFamily,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    opts.validate()?;
    let draws: Vec<Vec<usize>> = (0..opts.replicates)
        .map(|b| resample_indices(opts.seed, b as u64, data.n()))
        .collect();
    bootstrap_from_draws(data, fit, family, opts, &draws)
}
