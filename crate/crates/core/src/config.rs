//! Flat key-value configuration shared by every command.
//!
//! Every key is optional; an empty file gives the defaults. Unknown keys are
//! rejected so that typos do not silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::Domain;
use crate::bootstrap::BootstrapOptions;
use crate::data::Schema;
use crate::error::{FlcmError, Result};
use crate::flcm::FitOptions;
use crate::fpca::FpcaOptions;
use crate::par::Execution;
use crate::sim::{Scenario, SimConfig};
use crate::solver::{PenaltyFamily, SolverOptions};
use crate::tuning::TuningGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // data
    pub response: String,
    /// Restricts and orders the covariates; empty takes every other series.
    pub covariates: Vec<String>,
    pub domain_lower: Option<f64>,
    pub domain_upper: Option<f64>,
    pub lag_window: usize,

    // basis and penalty
    pub num_basis: usize,
    pub degree: usize,
    /// Zero drops the intercept.
    pub intercept_basis: usize,
    pub method: PenaltyFamily,
    pub phi: Option<f64>,

    // covariate preprocessing
    pub denoise: bool,
    pub center_covariates: bool,
    pub pve: f64,
    pub fpca_grid_size: usize,
    pub mean_bandwidth: Option<f64>,
    pub cov_bandwidth: Option<f64>,
    pub max_bins: usize,
    pub raw_on_grid: bool,

    // prewhitening
    pub prewhiten: bool,
    pub residual_pve: f64,
    pub residual_raw_on_grid: bool,
    pub residual_mean_bandwidth: Option<f64>,
    pub residual_cov_bandwidth: Option<f64>,
    pub full_fit_ridge: f64,
    pub eigen_floor: f64,

    // tuning and solver
    pub lambda_count: usize,
    pub lambda_min_ratio: f64,
    pub psi_grid: Vec<f64>,
    pub ebic_gamma: f64,
    pub tol: f64,
    pub max_iter: usize,

    // execution
    pub execution: Execution,
    /// Worker threads; unset uses every core.
    pub threads: Option<usize>,

    // simulation
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    /// Zero runs the selection design; a positive count runs the
    /// pseudo-covariate design with that many pseudo covariates.
    pub pseudo_covariates: usize,
    pub grid_points: usize,
    /// Observe every grid point instead of a random subset.
    pub dense: bool,
    pub min_points: usize,
    pub max_points: usize,
    pub measurement_noise_sd: f64,
    pub error_scale: f64,
    pub replicates: usize,
    pub methods: Vec<PenaltyFamily>,
    pub eval_points: usize,

    // bootstrap
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
    pub band_grid_points: usize,
    pub band_lower_pct: f64,
    pub band_upper_pct: f64,
    pub max_failure_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        let fit = FitOptions::default();
        let sim = SimConfig::default();
        let boot = BootstrapOptions::default();
        let (min_points, max_points) = sim.points_per_subject.unwrap_or((30, 41));
        Config {
            response: "y".into(),
            covariates: Vec::new(),
            domain_lower: None,
            domain_upper: None,
            lag_window: 0,
            num_basis: fit.num_basis,
            degree: fit.degree,
            intercept_basis: fit.intercept_basis.unwrap_or(0),
            method: fit.family,
            phi: fit.phi,
            denoise: fit.denoise,
            center_covariates: fit.center_covariates,
            pve: fit.covariate_fpca.pve,
            fpca_grid_size: fit.covariate_fpca.grid_size,
            mean_bandwidth: fit.covariate_fpca.mean_bandwidth,
            cov_bandwidth: fit.covariate_fpca.cov_bandwidth,
            max_bins: fit.covariate_fpca.max_bins,
            raw_on_grid: fit.covariate_fpca.raw_on_grid,
            prewhiten: fit.prewhiten,
            residual_pve: fit.residual_fpca.pve,
            residual_raw_on_grid: fit.residual_fpca.raw_on_grid,
            residual_mean_bandwidth: fit.residual_fpca.mean_bandwidth,
            residual_cov_bandwidth: fit.residual_fpca.cov_bandwidth,
            full_fit_ridge: fit.full_fit_ridge,
            eigen_floor: fit.eigen_floor,
            lambda_count: fit.tuning.lambda_count,
            lambda_min_ratio: fit.tuning.lambda_min_ratio,
            psi_grid: fit.tuning.psi_grid,
            ebic_gamma: fit.tuning.ebic_gamma,
            tol: fit.solver.tol,
            max_iter: fit.solver.max_iter,
            execution: fit.execution,
            threads: None,
            seed: sim.seed,
            n: sim.n,
            p: sim.p,
            pseudo_covariates: 0,
            grid_points: sim.grid_points,
            dense: sim.points_per_subject.is_none(),
            min_points,
            max_points,
            measurement_noise_sd: sim.measurement_noise_sd,
            error_scale: sim.error_scale,
            replicates: sim.replicates,
            methods: sim.methods,
            eval_points: sim.eval_points,
            bootstrap_replicates: boot.replicates,
            bootstrap_seed: boot.seed,
            band_grid_points: boot.grid_points,
            band_lower_pct: boot.lower_pct,
            band_upper_pct: boot.upper_pct,
            max_failure_fraction: boot.max_failure_fraction,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| FlcmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlcmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| FlcmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlcmError::Config(m));
        if self.response.is_empty() {
            return bad("response must name a series".into());
        }
        if self.num_basis < self.degree + 1 {
            return bad(format!("num_basis {} is too small for degree {}", self.num_basis, self.degree));
        }
        if self.intercept_basis != 0 && self.intercept_basis < self.degree + 1 {
            return bad(format!("intercept_basis {} is too small for degree {}", self.intercept_basis, self.degree));
        }
        for (name, v) in [("pve", self.pve), ("residual_pve", self.residual_pve)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if !self.dense && self.min_points > self.max_points {
            return bad("min_points exceeds max_points".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        self.domain()?;
        self.fit_options()?.tuning.validate()?;
        Ok(())
    }

    pub fn domain(&self) -> Result<Option<Domain>> {
        match (self.domain_lower, self.domain_upper) {
            (Some(a), Some(b)) => Domain::new(a, b).map(Some),
            (None, None) => Ok(None),
            _ => Err(FlcmError::Config("set both domain_lower and domain_upper, or neither".into())),
        }
    }

    pub fn schema(&self) -> Result<Schema> {
        Ok(Schema {
            response: self.response.clone(),
            covariates: (!self.covariates.is_empty()).then(|| self.covariates.clone()),
            domain: self.domain()?,
        })
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        Ok(FitOptions {
            domain: self.domain()?,
            num_basis: self.num_basis,
            degree: self.degree,
            intercept_basis: (self.intercept_basis > 0).then_some(self.intercept_basis),
            center_covariates: self.center_covariates,
            denoise: self.denoise,
            covariate_fpca: FpcaOptions {
                grid_size: self.fpca_grid_size,
                mean_bandwidth: self.mean_bandwidth,
                cov_bandwidth: self.cov_bandwidth,
                pve: self.pve,
                max_bins: self.max_bins,
                raw_on_grid: self.raw_on_grid,
            },
            prewhiten: self.prewhiten,
            residual_fpca: FpcaOptions {
                grid_size: self.fpca_grid_size,
                mean_bandwidth: self.residual_mean_bandwidth,
                cov_bandwidth: self.residual_cov_bandwidth,
                pve: self.residual_pve,
                max_bins: self.max_bins,
                raw_on_grid: self.residual_raw_on_grid,
            },
            full_fit_ridge: self.full_fit_ridge,
            eigen_floor: self.eigen_floor,
            family: self.method,
            phi: self.phi,
            tuning: TuningGrid {
                lambda_count: self.lambda_count,
                lambda_min_ratio: self.lambda_min_ratio,
                psi_grid: self.psi_grid.clone(),
                ebic_gamma: self.ebic_gamma,
            },
            solver: SolverOptions {
                tol: self.tol,
                max_iter: self.max_iter,
            },
            execution: self.execution,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut fit = self.fit_options()?;
        // simulated data always live on [0, 100]
        fit.domain = None;
        let cfg = SimConfig {
            n: self.n,
            p: self.p,
            scenario: match self.pseudo_covariates {
                0 => Scenario::Selection,
                count => Scenario::PseudoCovariates { count },
            },
            grid_points: self.grid_points,
            points_per_subject: (!self.dense).then_some((self.min_points, self.max_points)),
            measurement_noise_sd: self.measurement_noise_sd,
            error_scale: self.error_scale,
            replicates: self.replicates,
            seed: self.seed,
            methods: self.methods.clone(),
            eval_points: self.eval_points,
            fit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bootstrap_options(&self) -> Result<BootstrapOptions> {
        let opts = BootstrapOptions {
            replicates: self.bootstrap_replicates,
            seed: self.bootstrap_seed,
            grid_points: self.band_grid_points,
            lower_pct: self.band_lower_pct,
            upper_pct: self.band_upper_pct,
            max_failure_fraction: self.max_failure_fraction,
            execution: self.execution,
        };
        opts.validate()?;
        Ok(opts)
    }
}
