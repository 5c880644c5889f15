//! Synthetic studies: the sinusoidal-covariate design with three active
//! coefficient functions, the pseudo-covariate variant, and Monte-Carlo
//! summaries of selection and estimation accuracy.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::Domain;
use crate::data::{FunctionalDataset, SubjectData};
use crate::error::{FlcmError, Result};
use crate::flcm::{fit_prepared, prepare, FitOptions};
use crate::fpca::SubjectCurve;
use crate::par::map_indexed;
use crate::solver::PenaltyFamily;

/// `a sqrt2 sin(w t) + b sqrt2 cos(w t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub a: f64,
    pub b: f64,
    pub freq: f64,
}

impl Sinusoid {
    pub fn eval(&self, t: f64) -> f64 {
        SQRT_2 * (self.a * (self.freq * t).sin() + self.b * (self.freq * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Covariates `j = 1..p` at frequency `pi j / 400` with coefficients
    /// `N(50, 2^2)`; the first three coefficient functions are nonzero.
    Selection,
    /// Three covariates from the selection design with only the first
    /// active, plus `count` mean-zero pseudo covariates at frequency
    /// `pi k / 200`, `k = 1..count`.
    PseudoCovariates { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Covariates in the selection scenario (ignored by the pseudo-covariate one).
    pub p: usize,
    pub scenario: Scenario,
    /// Equispaced points on `[0, 100]`.
    pub grid_points: usize,
    /// Inclusive range for the per-subject number of points, drawn without
    /// replacement from the grid. `None` observes every point.
    pub points_per_subject: Option<(usize, usize)>,
    pub measurement_noise_sd: f64,
    /// Multiplies the error process; zero gives noiseless responses.
    pub error_scale: f64,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<PenaltyFamily>,
    /// Points on `[0, 100]` where bias and MSE are averaged.
    pub eval_points: usize,
    pub fit: FitOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 100,
            p: 20,
            scenario: Scenario::Selection,
            grid_points: 81,
            points_per_subject: Some((30, 41)),
            measurement_noise_sd: 0.6,
            error_scale: 1.0,
            replicates: 50,
            seed: 20_240_601,
            methods: PenaltyFamily::ALL.to_vec(),
            eval_points: 100,
            fit: FitOptions::default(),
        }
    }
}

pub const DOMAIN_UPPER: f64 = 100.0;

/// The intercept function.
pub fn beta0(t: f64) -> f64 {
    8.0 * (PI * t / 50.0).sin()
}

fn active_beta(j: usize, t: f64) -> f64 {
    match j {
        0 => 5.0 * (PI * t / 100.0).sin(),
        1 => 4.0 * (PI * t / 50.0).sin() + 4.0 * (PI * t / 50.0).cos(),
        2 => 25.0 * (-t / 20.0).exp(),
        _ => 0.0,
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.replicates == 0 {
            return Err(FlcmError::Config("n and replicates must be at least 1".into()));
        }
        if self.grid_points < 2 || self.eval_points < 2 {
            return Err(FlcmError::Config("grids need at least two points".into()));
        }
        if let Some((lo, hi)) = self.points_per_subject {
            if lo == 0 || lo > hi || hi > self.grid_points {
                return Err(FlcmError::Config(format!(
                    "points per subject [{lo}, {hi}] must be a nonempty range within the grid"
                )));
            }
        }
        if self.covariate_count() == 0 {
            return Err(FlcmError::Config("the study needs at least one covariate".into()));
        }
        if self.methods.is_empty() {
            return Err(FlcmError::Config("no methods requested".into()));
        }
        if !(self.measurement_noise_sd >= 0.0 && self.error_scale >= 0.0) {
            return Err(FlcmError::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> Domain {
        Domain {
            lower: 0.0,
            upper: DOMAIN_UPPER,
        }
    }

    pub fn covariate_count(&self) -> usize {
        match self.scenario {
            Scenario::Selection => self.p,
            Scenario::PseudoCovariates { count } => 3 + count,
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self.scenario {
            Scenario::Selection => (1..=self.p).map(|j| format!("Var{j}")).collect(),
            Scenario::PseudoCovariates { count } => (1..=3)
                .map(|j| format!("Var{j}"))
                .chain((1..=count).map(|k| format!("Pseudo{k}")))
                .collect(),
        }
    }

    /// True coefficient function of covariate `j` (0-based).
    pub fn true_beta(&self, j: usize, t: f64) -> f64 {
        match self.scenario {
            Scenario::Selection => active_beta(j, t),
            Scenario::PseudoCovariates { .. } if j == 0 => active_beta(0, t),
            Scenario::PseudoCovariates { .. } => 0.0,
        }
    }

    pub fn active_set(&self) -> Vec<usize> {
        match self.scenario {
            Scenario::Selection => (0..self.p.min(3)).collect(),
            Scenario::PseudoCovariates { .. } => vec![0],
        }
    }

    pub fn eval_grid(&self) -> Vec<f64> {
        self.domain().linspace(self.eval_points)
    }
}

/// Independent stream `replicate` of the master `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite, nonnegative sd")
}

/// Per-subject covariate curves of the selection design, `j = 1..count`.
pub fn generate_selection_covariates<R: Rng>(count: usize, rng: &mut R) -> Vec<Sinusoid> {
    let coef = normal(50.0, 2.0);
    (1..=count)
        .map(|j| Sinusoid {
            a: coef.sample(rng),
            b: coef.sample(rng),
            freq: PI * j as f64 / 400.0,
        })
        .collect()
}

/// Per-subject pseudo covariates: mean zero, frequency `pi k / 200`.
pub fn generate_pseudo_covariates<R: Rng>(count: usize, rng: &mut R) -> Vec<Sinusoid> {
    let coef = normal(0.0, 2.0);
    (1..=count)
        .map(|k| Sinusoid {
            a: coef.sample(rng),
            b: coef.sample(rng),
            freq: PI * k as f64 / 200.0,
        })
        .collect()
}

/// One synthetic dataset from stream `replicate` of `config.seed`.
pub fn generate_dataset(config: &SimConfig, replicate: u64) -> Result<FunctionalDataset> {
    generate_with_latent(config, replicate).map(|(d, _)| d)
}

/// Like [`generate_dataset`], also returning each subject's noiseless covariate curves.
pub fn generate_with_latent(config: &SimConfig, replicate: u64) -> Result<(FunctionalDataset, Vec<Vec<Sinusoid>>)> {
    config.validate()?;
    let mut rng = replicate_rng(config.seed, replicate);
    let grid = config.domain().linspace(config.grid_points);
    let xi1 = normal(0.0, 0.5);
    let xi2 = normal(0.0, 0.75);
    let white = normal(0.0, 1.0);
    let meas = normal(0.0, config.measurement_noise_sd);
    let p = config.covariate_count();
    let mut subjects = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let curves: Vec<Sinusoid> = match config.scenario {
            Scenario::Selection => generate_selection_covariates(config.p, &mut rng),
            Scenario::PseudoCovariates { count } => {
                let mut c = generate_selection_covariates(3, &mut rng);
                c.extend(generate_pseudo_covariates(count, &mut rng));
                c
            }
        };
        let (x1, x2) = (xi1.sample(&mut rng), xi2.sample(&mut rng));
        let times: Vec<f64> = match config.points_per_subject {
            None => grid.clone(),
            Some((lo, hi)) => {
                let m = rng.random_range(lo..=hi);
                let mut idx = index::sample(&mut rng, grid.len(), m).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| grid[k]).collect()
            }
        };
        let mut y = Vec::with_capacity(times.len());
        for &t in &times {
            let eps = x1 * t.cos() + x2 * t.sin() + white.sample(&mut rng);
            let signal: f64 = beta0(t)
                + curves
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c.eval(t) * config.true_beta(j, t))
                    .sum::<f64>();
            y.push(signal + config.error_scale * eps);
        }
        let mut covariates = Vec::with_capacity(p);
        for c in &curves {
            let u: Vec<f64> = times.iter().map(|&t| c.eval(t) + meas.sample(&mut rng)).collect();
            covariates.push(SubjectCurve::new(times.clone(), u)?);
        }
        subjects.push(SubjectData {
            id: format!("s{i}"),
            response: SubjectCurve::new(times, y)?,
            covariates,
        });
        latent.push(curves);
    }
    let data = FunctionalDataset::new(config.domain(), "y", config.covariate_names(), subjects)?;
    Ok((data, latent))
}

/// What one method produced on one replicate.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub selected: Vec<usize>,
    /// `curves[j]` is `beta_j` on the evaluation grid.
    pub curves: Vec<Vec<f64>>,
}

/// Runs every configured method on replicate `r`.
pub fn run_replicate(config: &SimConfig, replicate: u64) -> Result<Vec<MethodOutcome>> {
    let data = generate_dataset(config, replicate)?;
    let prep = prepare(&data, &config.fit)?;
    let grid = config.eval_grid();
    config
        .methods
        .iter()
        .map(|&family| {
            let fit = fit_prepared(&prep, &config.fit, family)?;
            Ok(MethodOutcome {
                curves: (0..data.p()).map(|j| fit.beta_curve(j, &grid)).collect(),
                selected: fit.selected,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: PenaltyFamily,
    /// Percentage of replicates selecting each covariate.
    pub selection_pct: Vec<f64>,
    pub avg_model_size: f64,
    /// Grid average of `|mean_r beta_hat(t) - beta(t)|`, per covariate.
    pub abs_bias: Vec<f64>,
    /// Grid average of `mean_r (beta_hat(t) - beta(t))^2`, per covariate.
    pub mse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub n: usize,
    pub replicates_requested: usize,
    pub replicates_used: usize,
    pub failures: Vec<String>,
    pub prewhiten: bool,
    pub variable_names: Vec<String>,
    pub methods: Vec<MethodSummary>,
}

impl StudyReport {
    pub fn method(&self, family: PenaltyFamily) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == family)
    }

    /// One row per method and variable.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "variable", "selection_pct", "abs_bias", "mse"])?;
        for m in &self.methods {
            for (j, name) in self.variable_names.iter().enumerate() {
                w.write_record([
                    m.method.label().to_string(),
                    name.clone(),
                    m.selection_pct[j].to_string(),
                    m.abs_bias[j].to_string(),
                    m.mse[j].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per method with a selection-percentage column per variable.
    pub fn write_selection_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["method".to_string()];
        header.extend(self.variable_names.iter().cloned());
        header.push("avg_model_size".into());
        w.write_record(&header)?;
        for m in &self.methods {
            let mut row = vec![m.method.label().to_string()];
            row.extend(m.selection_pct.iter().map(|v| v.to_string()));
            row.push(m.avg_model_size.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates per-replicate outcomes (each holding one entry per method).
pub fn summarize(config: &SimConfig, outcomes: Vec<Result<Vec<MethodOutcome>>>) -> Result<StudyReport> {
    let p = config.covariate_count();
    let grid = config.eval_grid();
    let truth: Vec<Vec<f64>> = (0..p)
        .map(|j| grid.iter().map(|&t| config.true_beta(j, t)).collect())
        .collect();
    let mut good = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => good.push(v),
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    if good.is_empty() {
        return Err(FlcmError::Numerical(format!(
            "every replicate failed; first failure: {}",
            failures.first().map(String::as_str).unwrap_or("none")
        )));
    }
    let used = good.len() as f64;
    let g = grid.len() as f64;
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let mut counts = vec![0usize; p];
            let mut size = 0usize;
            let mut mean_curve = vec![vec![0.0; grid.len()]; p];
            let mut sq = vec![0.0; p];
            for rep in &good {
                let o = &rep[k];
                size += o.selected.len();
                for &j in &o.selected {
                    counts[j] += 1;
                }
                for j in 0..p {
                    for (t, v) in o.curves[j].iter().enumerate() {
                        mean_curve[j][t] += v / used;
                        sq[j] += (v - truth[j][t]).powi(2);
                    }
                }
            }
            MethodSummary {
                method,
                selection_pct: counts.iter().map(|c| 100.0 * *c as f64 / used).collect(),
                avg_model_size: size as f64 / used,
                abs_bias: (0..p)
                    .map(|j| mean_curve[j].iter().zip(&truth[j]).map(|(m, b)| (m - b).abs()).sum::<f64>() / g)
                    .collect(),
                mse: sq.iter().map(|s| s / (used * g)).collect(),
            }
        })
        .collect();
    Ok(StudyReport {
        n: config.n,
        replicates_requested: config.replicates,
        replicates_used: good.len(),
        failures,
        prewhiten: config.fit.prewhiten,
        variable_names: config.covariate_names(),
        methods,
    })
}

/// Generates, fits, and summarizes `config.replicates` independent datasets.
pub fn run_study(config: &SimConfig) -> Result<StudyReport> {
    config.validate()?;
    let outcomes = map_indexed(config.fit.execution, config.replicates, |r| {
        let out = run_replicate(config, r as u64);
        if let Err(e) = &out {
            log::warn!("replicate {r} failed: {e}");
        }
        out
    });
    summarize(config, outcomes)
}
