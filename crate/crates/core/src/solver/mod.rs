//! Group-penalized least squares by block coordinate descent.
//!
//! Problems are solved in orthonormalized coordinates, where every penalized
//! block satisfies `X_j^T X_j / N = I` and is orthogonal to the unpenalized
//! columns. The objective there is
//!
//! ```text
//! RSS / (2N) + sum_j P(||gamma_j||)
//! ```
//!
//! and each block update is the closed-form threshold of its partial
//! residual correlation. All work happens on the Gram matrix, so a cycle
//! costs `O(p^2)` regardless of the number of rows.

mod design;
mod penalty;

pub use design::{orthonormalize_groups, BlockTransform, Group, GroupDesign, ScaleRecord};
pub use penalty::{group_threshold, PenaltyFamily, PenaltySpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlcmError, Result};
use crate::linalg::ridge_solve;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Converged when the largest coefficient change in a full cycle is at most
    /// `tol` times the largest coefficient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-7,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub spec: PenaltySpec,
    /// Per design group, original coordinates.
    pub gamma: Vec<DVector<f64>>,
    /// Per design group, orthonormalized coordinates.
    pub ortho: Vec<DVector<f64>>,
    /// `RSS / (2N) + sum_j P(||gamma'_j||)` in orthonormal coordinates.
    pub objective: f64,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized design groups with a nonzero block.
    pub active: Vec<usize>,
}

impl SolverResult {
    pub fn is_active(&self, group: usize) -> bool {
        self.active.binary_search(&group).is_ok()
    }
}

/// A design reduced to Gram form, ready for repeated solves.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    n: usize,
    record: ScaleRecord,
    /// Orthonormal-coordinate groups (sizes are block ranks).
    groups: Vec<Group>,
    /// Indices into `groups` of penalized, non-degenerate groups, and their
    /// offsets inside the penalized Gram matrix.
    penalized: Vec<(usize, usize, usize)>,
    gram: DMatrix<f64>,
    /// `X_P^T r_U / N`, where `r_U` is the residual of the unpenalized fit.
    base_corr: DVector<f64>,
    /// `||r_U||^2 / N`
    null_rss: f64,
    unpenalized_fit: Vec<(usize, DVector<f64>)>,
}

impl PreparedProblem {
    pub fn new(design: &GroupDesign) -> Result<Self> {
        let (ortho, record) = orthonormalize_groups(design)?;
        let n = ortho.nrows();
        let nf = n as f64;

        let ugroups: Vec<usize> = (0..ortho.groups.len())
            .filter(|&j| !ortho.groups[j].penalized && ortho.groups[j].size > 0)
            .collect();
        let ucols: Vec<usize> = ugroups.iter().flat_map(|&j| ortho.groups[j].range()).collect();
        let mut resid = ortho.y.clone();
        let mut unpenalized_fit = Vec::new();
        if !ucols.is_empty() {
            let xu = DMatrix::from_fn(n, ucols.len(), |r, c| ortho.x[(r, ucols[c])]);
            let coef = ridge_solve(&xu.tr_mul(&xu), &xu.tr_mul(&ortho.y), 1e-13)?;
            resid -= &xu * &coef;
            let mut at = 0;
            for &j in &ugroups {
                let size = ortho.groups[j].size;
                unpenalized_fit.push((j, coef.rows(at, size).into_owned()));
                at += size;
            }
        }

        let mut penalized = Vec::new();
        let mut offset = 0;
        for (j, g) in ortho.groups.iter().enumerate() {
            if g.penalized && g.size > 0 {
                penalized.push((j, offset, g.size));
                offset += g.size;
            }
        }
        let pcols: Vec<usize> = penalized.iter().flat_map(|&(j, _, _)| ortho.groups[j].range()).collect();
        let xp = DMatrix::from_fn(n, pcols.len(), |r, c| ortho.x[(r, pcols[c])]);
        let gram = xp.tr_mul(&xp) / nf;
        let base_corr = xp.tr_mul(&resid) / nf;
        let null_rss = resid.norm_squared() / nf;
        Ok(PreparedProblem {
            n,
            record,
            groups: ortho.groups,
            penalized,
            gram,
            base_corr,
            null_rss,
            unpenalized_fit,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn record(&self) -> &ScaleRecord {
        &self.record
    }

    /// Smallest lambda at which every penalized group is zero.
    pub fn lambda_max(&self) -> f64 {
        self.penalized
            .iter()
            .map(|&(_, off, size)| self.base_corr.rows(off, size).norm())
            .fold(0.0, f64::max)
    }

    /// RSS of the model with only unpenalized groups.
    pub fn null_rss(&self) -> f64 {
        self.null_rss * self.n as f64
    }

    /// `W^T W / N` over the penalized columns in orthonormal coordinates,
    /// after the unpenalized columns have been projected out.
    pub fn penalized_gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `W^T r / N` over the same columns, `r` being the unpenalized-fit residual.
    pub fn penalized_correlations(&self) -> &DVector<f64> {
        &self.base_corr
    }

    /// `RSS / (2N) + sum_j P(||theta_j||)` at orthonormal-coordinate
    /// coefficients `ortho` (one vector per design group). Unpenalized groups
    /// are held at their profiled values whatever `ortho` says.
    pub fn objective(&self, spec: &PenaltySpec, ortho: &[DVector<f64>]) -> f64 {
        let beta = self.pack(ortho);
        let corr = &self.base_corr - &self.gram * &beta;
        self.objective_parts(spec, &beta, &corr).0
    }

    fn unpack(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut ortho: Vec<DVector<f64>> = self.groups.iter().map(|g| DVector::zeros(g.size)).collect();
        for (j, coef) in &self.unpenalized_fit {
            ortho[*j] = coef.clone();
        }
        for &(j, off, size) in &self.penalized {
            ortho[j] = beta.rows(off, size).into_owned();
        }
        ortho
    }

    fn pack(&self, ortho: &[DVector<f64>]) -> DVector<f64> {
        let mut beta = DVector::zeros(self.base_corr.len());
        for &(j, off, size) in &self.penalized {
            if ortho[j].len() == size {
                beta.rows_mut(off, size).copy_from(&ortho[j]);
            }
        }
        beta
    }

    fn objective_parts(&self, spec: &PenaltySpec, beta: &DVector<f64>, corr: &DVector<f64>) -> (f64, f64) {
        // RSS/N = null - beta^T (base + corr), with corr = base - G beta
        let rss_n = (self.null_rss - beta.dot(&(&self.base_corr + corr))).max(0.0);
        let pen: f64 = self
            .penalized
            .iter()
            .map(|&(_, off, size)| spec.value(beta.rows(off, size).norm()))
            .sum();
        (0.5 * rss_n + pen, rss_n * self.n as f64)
    }

    /// Block coordinate descent at a single penalty.
    ///
    /// `warm` holds orthonormal-coordinate coefficients per design group.
    pub fn solve(&self, spec: &PenaltySpec, warm: Option<&[DVector<f64>]>, opts: &SolverOptions) -> Result<SolverResult> {
        self.solve_traced(spec, warm, opts, None)
    }

    /// As [`solve`](Self::solve), additionally recording the objective after
    /// every full cycle.
    pub fn solve_traced(
        &self,
        spec: &PenaltySpec,
        warm: Option<&[DVector<f64>]>,
        opts: &SolverOptions,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<SolverResult> {
        if !(opts.tol > 0.0) {
            return Err(FlcmError::Config(format!("tolerance {} must be positive", opts.tol)));
        }
        let mut beta = match warm {
            Some(w) => self.pack(w),
            None => DVector::zeros(self.base_corr.len()),
        };
        let mut corr = &self.base_corr - &self.gram * &beta;
        let mut iterations = 0;
        let mut converged = false;
        let mut z = DVector::zeros(0);
        while iterations < opts.max_iter {
            iterations += 1;
            let mut max_change: f64 = 0.0;
            for &(_, off, size) in &self.penalized {
                if z.len() != size {
                    z = DVector::zeros(size);
                }
                z.copy_from(&(corr.rows(off, size) + beta.rows(off, size)));
                let factor = spec.shrink_factor(z.norm());
                for c in 0..size {
                    let new = factor * z[c];
                    let delta = new - beta[off + c];
                    if delta != 0.0 {
                        max_change = max_change.max(delta.abs());
                        beta[off + c] = new;
                        corr.axpy(-delta, &self.gram.column(off + c), 1.0);
                    }
                }
            }
            let (obj, _) = self.objective_parts(spec, &beta, &corr);
            if !obj.is_finite() {
                return Err(FlcmError::Diverged {
                    objective: obj,
                    iterations,
                });
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(obj);
            }
            let scale = beta.amax();
            if max_change == 0.0 || max_change <= opts.tol * scale {
                converged = true;
                break;
            }
        }
        let (objective, rss) = self.objective_parts(spec, &beta, &corr);
        let ortho = self.unpack(&beta);
        let gamma = self.record.to_original(&ortho);
        let active = self
            .penalized
            .iter()
            .filter(|&&(_, off, size)| beta.rows(off, size).iter().any(|v| *v != 0.0))
            .map(|&(j, _, _)| j)
            .collect();
        Ok(SolverResult {
            spec: *spec,
            gamma,
            ortho,
            objective,
            rss,
            iterations,
            converged,
            active,
        })
    }

    /// Warm-started fits along a descending lambda grid. A failed point is
    /// reported in place and the path continues from the last good fit.
    pub fn path(&self, template: &PenaltySpec, lambdas: &[f64], opts: &SolverOptions) -> Result<Vec<Result<SolverResult>>> {
        if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(FlcmError::Config("lambda grid must be strictly descending".into()));
        }
        let mut out = Vec::with_capacity(lambdas.len());
        let mut warm: Option<Vec<DVector<f64>>> = None;
        for &l in lambdas {
            let spec = PenaltySpec::new(template.family, l, template.phi)?;
            let res = self.solve(&spec, warm.as_deref(), opts);
            if let Ok(r) = &res {
                warm = Some(r.ortho.clone());
            }
            out.push(res);
        }
        Ok(out)
    }

    /// Ridge-stabilized least squares over every group, in original
    /// coordinates. The ridge is added to the orthonormal Gram, whose diagonal
    /// is one, so it is invariant to within-group reparameterization.
    pub fn ridge_fit(&self, ridge: f64) -> Result<Vec<DVector<f64>>> {
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += ridge;
        }
        let beta = if a.nrows() == 0 {
            DVector::zeros(0)
        } else {
            a.cholesky()
                .ok_or_else(|| FlcmError::Numerical("ridge system is not positive definite".into()))?
                .solve(&self.base_corr)
        };
        Ok(self.record.to_original(&self.unpack(&beta)))
    }

    /// Column rank of each design group after orthonormalization.
    pub fn group_ranks(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.size).collect()
    }

    /// Penalty-scaled gradient norms used in optimality checks:
    /// `||X_j^T r / N||` for every penalized group, in orthonormal coordinates.
    pub fn gradient_norms(&self, ortho: &[DVector<f64>]) -> Vec<(usize, f64)> {
        let beta = self.pack(ortho);
        let corr = &self.base_corr - &self.gram * &beta;
        self.penalized
            .iter()
            .map(|&(j, off, size)| (j, corr.rows(off, size).norm()))
            .collect()
    }
}

/// `count` log-spaced values from `lambda_max` down to `min_ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    if count == 0 || !(lambda_max > 0.0) {
        return Vec::new();
    }
    if count == 1 {
        return vec![lambda_max];
    }
    let lo = min_ratio.ln();
    (0..count)
        .map(|i| lambda_max * (lo * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Solves one penalized problem on a raw design.
pub fn solve(
    design: &GroupDesign,
    spec: &PenaltySpec,
    warm_start: Option<&[DVector<f64>]>,
    tol: f64,
    max_iter: usize,
) -> Result<SolverResult> {
    let problem = PreparedProblem::new(design)?;
    let warm = warm_start.map(|w| problem.record().to_orthonormal(w));
    problem.solve(spec, warm.as_deref(), &SolverOptions { tol, max_iter })
}

/// Path over `lambda_grid` (or the default 100-point grid from `lambda_max`
/// to `0.001 * lambda_max` when `None`).
pub fn solve_path(
    design: &GroupDesign,
    family: PenaltyFamily,
    lambda_grid_override: Option<&[f64]>,
    phi: f64,
) -> Result<Vec<Result<SolverResult>>> {
    let problem = PreparedProblem::new(design)?;
    let grid = match lambda_grid_override {
        Some(g) => g.to_vec(),
        None => lambda_grid(problem.lambda_max(), 100, 1e-3),
    };
    let template = PenaltySpec::new(family, grid.first().copied().unwrap_or(0.0), phi)?;
    problem.path(&template, &grid, &SolverOptions::default())
}
