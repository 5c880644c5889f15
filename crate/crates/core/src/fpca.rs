//! Functional principal components for dense or sparse, noisy curves.
//!
//! Mean and covariance are local-linear smooths of pooled observations; the
//! covariance surface is built from off-diagonal raw cross-products only, so
//! measurement noise does not leak into it. Scores are conditional
//! expectations given each subject's own observations (PACE).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Domain;
use crate::error::{FlcmError, Result};
use crate::linalg::sorted_eigen;
use crate::smooth::{Binned1d, Binned2d, TimeBins};

/// Tolerance applied when comparing a realized variance fraction to the requested one.
const PVE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(FlcmError::Data(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(FlcmError::Data("observation times must be sorted".into()));
        }
        Ok(SubjectCurve { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Noisy observations of one process for `n` subjects.
#[derive(Debug, Clone)]
pub struct FunctionalObservations {
    pub domain: Domain,
    pub subjects: Vec<SubjectCurve>,
}

impl FunctionalObservations {
    pub fn new(domain: Domain, subjects: Vec<SubjectCurve>) -> Result<Self> {
        for (i, s) in subjects.iter().enumerate() {
            if let Some(t) = s.times.iter().find(|t| !domain.contains(**t)) {
                return Err(FlcmError::Data(format!(
                    "subject {i}: time {t} outside [{}, {}]",
                    domain.lower, domain.upper
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(FlcmError::Data(format!("subject {i}: non-finite value")));
            }
        }
        Ok(FunctionalObservations { domain, subjects })
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(SubjectCurve::len).sum()
    }

    /// Largest gap between consecutive pooled time points, including the ends.
    pub fn max_pooled_gap(&self) -> f64 {
        let mut t: Vec<f64> = self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
        t.sort_by(f64::total_cmp);
        let mut gap: f64 = 0.0;
        let mut prev = self.domain.lower;
        for x in t {
            gap = gap.max(x - prev);
            prev = x;
        }
        gap.max(self.domain.upper - prev)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaOptions {
    pub grid_size: usize,
    /// Defaults to a tenth of the domain width.
    pub mean_bandwidth: Option<f64>,
    /// Defaults to a fifth of the domain width.
    pub cov_bandwidth: Option<f64>,
    pub pve: f64,
    pub max_bins: usize,
    /// When every subject is observed on the same regular grid, use per-point
    /// sample moments on that grid instead of kernel smoothing.
    pub raw_on_grid: bool,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        FpcaOptions {
            grid_size: 101,
            mean_bandwidth: None,
            cov_bandwidth: None,
            pve: 0.99,
            max_bins: 400,
            raw_on_grid: false,
        }
    }
}

impl FpcaOptions {
    pub fn with_pve(pve: f64) -> Self {
        FpcaOptions {
            pve,
            ..Default::default()
        }
    }

    fn bandwidths(&self, domain: Domain) -> (f64, f64) {
        (
            self.mean_bandwidth.unwrap_or(domain.width() / 10.0),
            self.cov_bandwidth.unwrap_or(domain.width() / 5.0),
        )
    }
}

/// Linear interpolation of equispaced grid values.
pub(crate) fn interpolate(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let n = grid.len();
    if n == 1 {
        return values[0];
    }
    let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let pos = ((t - grid[0]) / h).clamp(0.0, (n - 1) as f64);
    let i = (pos.floor() as usize).min(n - 2);
    let frac = pos - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub values: Vec<f64>,
    /// Grid points where the bandwidth had to be widened.
    pub widened: usize,
}

/// Local-linear smooth of the pooled `(t, U)` pairs evaluated on `grid`.
pub fn estimate_mean(obs: &FunctionalObservations, grid: &[f64], bandwidth: f64) -> Result<MeanEstimate> {
    if !(bandwidth > 0.0) {
        return Err(FlcmError::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    if obs.num_observations() == 0 {
        return Err(FlcmError::Data("no observations to smooth".into()));
    }
    let bins = TimeBins::from_times(
        obs.subjects.iter().flat_map(|s| s.times.iter()),
        obs.domain.lower,
        obs.domain.upper,
        400,
    );
    let mut binned = Binned1d::new(bins);
    for s in &obs.subjects {
        for (t, u) in s.times.iter().zip(&s.values) {
            binned.add(*t, *u);
        }
    }
    let single_bin = binned.count.iter().filter(|c| **c > 0.0).count() == 1;
    let mut widened = 0;
    let mut values = Vec::with_capacity(grid.len());
    for &x in grid {
        if single_bin {
            let i = binned.count.iter().position(|c| *c > 0.0).unwrap_or(0);
            values.push(binned.sum[i] / binned.count[i]);
            continue;
        }
        let (v, w) = binned
            .local_linear(x, bandwidth)
            .ok_or_else(|| FlcmError::Numerical(format!("mean smoother undefined at t = {x}")))?;
        widened += w as usize;
        values.push(v);
    }
    if widened > 0 {
        log::warn!("mean smoother widened its bandwidth at {widened} grid points");
    }
    Ok(MeanEstimate { values, widened })
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Smooth covariance surface on `grid x grid`, exactly symmetric.
    pub surface: DMatrix<f64>,
    pub noise_var: f64,
    pub widened: usize,
}

/// Smoothed covariance surface and white-noise variance.
///
/// `mean` holds the mean function on `grid`.
pub fn estimate_covariance(
    obs: &FunctionalObservations,
    grid: &[f64],
    mean: &[f64],
    bandwidth: f64,
) -> Result<CovarianceEstimate> {
    if !(bandwidth > 0.0) {
        return Err(FlcmError::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    if mean.len() != grid.len() {
        return Err(FlcmError::Config("mean must live on the working grid".into()));
    }
    if obs.subjects.iter().all(|s| s.len() < 2) {
        return Err(FlcmError::Data(
            "covariance is unidentifiable: no subject has two or more observations".into(),
        ));
    }
    let bins = TimeBins::from_times(
        obs.subjects.iter().flat_map(|s| s.times.iter()),
        obs.domain.lower,
        obs.domain.upper,
        400,
    );
    let mut diag = Binned1d::new(bins.clone());
    let mut off = Binned2d::new(bins);
    for s in &obs.subjects {
        let idx: Vec<usize> = s.times.iter().map(|t| off.bins.index(*t)).collect();
        let resid: Vec<f64> = s
            .times
            .iter()
            .zip(&s.values)
            .map(|(t, u)| u - interpolate(grid, mean, *t))
            .collect();
        for a in 0..s.len() {
            diag.add(s.times[a], resid[a] * resid[a]);
            for b in 0..s.len() {
                if a != b {
                    off.add_indexed(idx[a], idx[b], resid[a] * resid[b]);
                }
            }
        }
    }
    let w = grid.len();
    let max_h = obs.domain.width();
    let mut surface = DMatrix::zeros(w, w);
    let mut widened = 0;
    for a in 0..w {
        for b in a..w {
            let (v, wd) = off
                .local_linear(grid[a], grid[b], bandwidth, max_h)
                .ok_or_else(|| {
                    FlcmError::Numerical(format!(
                        "covariance smoother undefined at ({}, {})",
                        grid[a], grid[b]
                    ))
                })?;
            widened += wd as usize;
            surface[(a, b)] = v;
            surface[(b, a)] = v;
        }
    }
    // Noise variance from the middle half of the domain, where the surface
    // smoother is free of boundary effects.
    let lo = obs.domain.lower + 0.25 * obs.domain.width();
    let hi = obs.domain.upper - 0.25 * obs.domain.width();
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for (a, &x) in grid.iter().enumerate() {
        if x < lo || x > hi {
            continue;
        }
        if let Some((d, _)) = diag.local_linear(x, bandwidth) {
            acc += d - surface[(a, a)];
            cnt += 1;
        }
    }
    let noise_var = if cnt > 0 { (acc / cnt as f64).max(0.0) } else { 0.0 };
    Ok(CovarianceEstimate {
        surface,
        noise_var,
        widened,
    })
}

/// The pooled distinct times, if they form a regular grid spanning the
/// domain with every point observed at least twice.
pub fn common_grid(obs: &FunctionalObservations, max_points: usize) -> Option<Vec<f64>> {
    let mut times: Vec<f64> = obs.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
    times.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for t in times {
        if grid.last() == Some(&t) {
            *counts.last_mut().unwrap() += 1;
        } else {
            grid.push(t);
            counts.push(1);
        }
    }
    let w = grid.len();
    if w < 3 || w > max_points || counts.iter().any(|c| *c < 2) {
        return None;
    }
    let tol = 1e-9 * obs.domain.width();
    if (grid[0] - obs.domain.lower).abs() > tol || (grid[w - 1] - obs.domain.upper).abs() > tol {
        return None;
    }
    let h = obs.domain.width() / (w - 1) as f64;
    if grid.iter().enumerate().any(|(i, t)| (t - obs.domain.lower - h * i as f64).abs() > tol) {
        return None;
    }
    Some(grid)
}

/// Unsmoothed mean, covariance surface and noise variance on a common grid.
#[derive(Debug, Clone)]
pub struct GridMoments {
    pub mean: Vec<f64>,
    pub surface: DMatrix<f64>,
    pub noise_var: f64,
}

/// Per-point sample moments on `grid` (which must contain every observation time).
///
/// Off-diagonal cells are averages of cross-products between distinct
/// observations. Those averages are noisy, so the surface is replaced by its
/// leading eigen-components: the ones standing above the spectral edge of a
/// random symmetric matrix with the observed cell variances. The diagonal and
/// any unobserved cell are filled by iterating that low-rank fit.
pub fn grid_moments(obs: &FunctionalObservations, grid: &[f64]) -> Result<GridMoments> {
    let w = grid.len();
    if obs.subjects.iter().all(|s| s.len() < 2) {
        return Err(FlcmError::Data(
            "covariance is unidentifiable: no subject has two or more observations".into(),
        ));
    }
    let h = (grid[w - 1] - grid[0]) / (w - 1) as f64;
    let index = |t: f64| (((t - grid[0]) / h).round() as usize).min(w - 1);
    let mut sum = vec![0.0; w];
    let mut cnt = vec![0.0; w];
    for s in &obs.subjects {
        for (t, u) in s.times.iter().zip(&s.values) {
            let i = index(*t);
            sum[i] += u;
            cnt[i] += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, c)| s / c).collect();

    let mut prod = DMatrix::<f64>::zeros(w, w);
    let mut prod_sq = DMatrix::<f64>::zeros(w, w);
    let mut pairs = DMatrix::<f64>::zeros(w, w);
    let mut sq = vec![0.0; w];
    for s in &obs.subjects {
        let idx: Vec<usize> = s.times.iter().map(|t| index(*t)).collect();
        let r: Vec<f64> = s.values.iter().zip(&idx).map(|(u, i)| u - mean[*i]).collect();
        for a in 0..idx.len() {
            sq[idx[a]] += r[a] * r[a];
            for b in 0..idx.len() {
                if a != b {
                    let p = r[a] * r[b];
                    prod[(idx[a], idx[b])] += p;
                    prod_sq[(idx[a], idx[b])] += p * p;
                    pairs[(idx[a], idx[b])] += 1.0;
                }
            }
        }
    }
    let mut surface = DMatrix::zeros(w, w);
    let mut missing = Vec::new();
    let mut cell_var = 0.0;
    for a in 0..w {
        for b in 0..w {
            let c = pairs[(a, b)];
            if a != b && c > 0.0 {
                let m = prod[(a, b)] / c;
                surface[(a, b)] = m;
                // variance of the cell average; single-pair cells borrow the raw spread
                cell_var += (prod_sq[(a, b)] / c - m * m).max(0.0) / (c - 1.0).max(1.0);
            } else {
                missing.push((a, b));
            }
        }
    }
    let observed = (w * w - missing.len()).max(1) as f64;
    let edge = 2.0 * h * (w as f64 * cell_var / observed).sqrt();

    let components = |m: &DMatrix<f64>| -> (Vec<f64>, DMatrix<f64>) {
        let (vals, vecs) = sorted_eigen((m + m.transpose()) * 0.5);
        let k = vals.iter().take_while(|v| **v * h > edge).count();
        (vals[..k].to_vec(), vecs.columns(0, k).into_owned())
    };
    let rank = components(&surface).0.len();
    let mut low_rank = DMatrix::zeros(w, w);
    if rank > 0 {
        for _ in 0..200 {
            let (vals, vecs) = sorted_eigen((&surface + surface.transpose()) * 0.5);
            let v = vecs.columns(0, rank);
            low_rank = v * DMatrix::from_diagonal(&DVector::from_column_slice(&vals[..rank])) * v.transpose();
            let mut change = 0.0f64;
            for &(a, b) in &missing {
                change = change.max((low_rank[(a, b)] - surface[(a, b)]).abs());
                surface[(a, b)] = low_rank[(a, b)];
            }
            if change <= 1e-10 * low_rank.amax().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    let lo = obs.domain.lower + 0.25 * obs.domain.width();
    let hi = obs.domain.upper - 0.25 * obs.domain.width();
    let mut acc = 0.0;
    let mut used = 0usize;
    for a in 0..w {
        if grid[a] >= lo && grid[a] <= hi && cnt[a] > 0.0 {
            acc += sq[a] / cnt[a] - low_rank[(a, a)];
            used += 1;
        }
    }
    let noise_var = if used > 0 { (acc / used as f64).max(0.0) } else { 0.0 };
    Ok(GridMoments {
        mean,
        surface: low_rank,
        noise_var,
    })
}

/// Leading eigen-components of a covariance surface on an equispaced grid.
#[derive(Debug, Clone)]
pub struct EigenComponents {
    pub eigenvalues: Vec<f64>,
    /// `eigenfunctions[k][g]` is the k-th eigenfunction at grid point `g`.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub pve: f64,
}

/// Discretized eigen-decomposition with quadrature weight equal to the grid spacing.
///
/// Keeps the smallest `K` whose positive-part eigenvalue fraction reaches `pve`.
pub fn eigendecompose(surface: &DMatrix<f64>, grid: &[f64], pve: f64) -> Result<EigenComponents> {
    if !(pve > 0.0 && pve <= 1.0) {
        return Err(FlcmError::Config(format!("pve {pve} must lie in (0, 1]")));
    }
    let w = grid.len();
    if surface.shape() != (w, w) || w < 2 {
        return Err(FlcmError::Config("surface must be square on the working grid".into()));
    }
    let spacing = (grid[w - 1] - grid[0]) / (w - 1) as f64;
    let sym = (surface + surface.transpose()) * 0.5;
    let (vals, vecs) = sorted_eigen(sym);
    let positive: Vec<f64> = vals.iter().map(|v| v * spacing).filter(|v| *v > 0.0).collect();
    let total: f64 = positive.iter().sum();
    if positive.is_empty() || !(total > 0.0) {
        return Err(FlcmError::Numerical("degenerate covariance surface: no positive eigenvalue".into()));
    }
    let mut cum = 0.0;
    let mut k = positive.len();
    for (i, v) in positive.iter().enumerate() {
        cum += v;
        if cum / total >= pve - PVE_SLACK {
            k = i + 1;
            break;
        }
    }
    let scale = spacing.sqrt().recip();
    let eigenfunctions = (0..k)
        .map(|c| {
            let mut f: Vec<f64> = vecs.column(c).iter().map(|v| v * scale).collect();
            if f.iter().sum::<f64>() < 0.0 {
                f.iter_mut().for_each(|v| *v = -*v);
            }
            f
        })
        .collect();
    let eigenvalues: Vec<f64> = positive[..k].to_vec();
    let pve = eigenvalues.iter().sum::<f64>() / total;
    Ok(EigenComponents {
        eigenvalues,
        eigenfunctions,
        pve,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaModel {
    pub domain: Domain,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub noise_var: f64,
    pub pve: f64,
}

impl FpcaModel {
    pub fn fit(obs: &FunctionalObservations, opts: &FpcaOptions) -> Result<Self> {
        if opts.grid_size < 2 {
            return Err(FlcmError::Config("working grid needs at least two points".into()));
        }
        if opts.raw_on_grid {
            let dense = common_grid(obs, opts.max_bins).filter(|g| obs.subjects.iter().all(|s| s.len() == g.len()));
            if let Some(grid) = dense {
                let raw = grid_moments(obs, &grid)?;
                let eig = if raw.surface.amax() > 0.0 {
                    eigendecompose(&raw.surface, &grid, opts.pve)?
                } else {
                    EigenComponents {
                        eigenvalues: Vec::new(),
                        eigenfunctions: Vec::new(),
                        pve: 1.0,
                    }
                };
                return Ok(FpcaModel {
                    domain: obs.domain,
                    grid,
                    mean: raw.mean,
                    eigenvalues: eig.eigenvalues,
                    eigenfunctions: eig.eigenfunctions,
                    noise_var: raw.noise_var,
                    pve: eig.pve,
                });
            }
            log::info!("observations are not dense on a common regular grid; smoothing instead");
        }
        let grid = obs.domain.linspace(opts.grid_size);
        let (hm, hc) = opts.bandwidths(obs.domain);
        let mean = estimate_mean(obs, &grid, hm)?.values;
        let cov = estimate_covariance(obs, &grid, &mean, hc)?;
        let eig = eigendecompose(&cov.surface, &grid, opts.pve)?;
        Ok(FpcaModel {
            domain: obs.domain,
            grid,
            mean,
            eigenvalues: eig.eigenvalues,
            eigenfunctions: eig.eigenfunctions,
            noise_var: cov.noise_var,
            pve: eig.pve,
        })
    }

    /// Assembles a model from known components (all on `domain.linspace(grid_size)`).
    pub fn from_parts(
        domain: Domain,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenfunctions: Vec<Vec<f64>>,
        noise_var: f64,
    ) -> Result<Self> {
        let grid = domain.linspace(mean.len());
        if eigenvalues.len() != eigenfunctions.len() || eigenfunctions.iter().any(|f| f.len() != grid.len()) {
            return Err(FlcmError::Config("eigen-components do not match the grid".into()));
        }
        Ok(FpcaModel {
            domain,
            grid,
            mean,
            eigenvalues,
            eigenfunctions,
            noise_var,
            pve: 1.0,
        })
    }

    pub fn num_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        interpolate(&self.grid, &self.mean, t)
    }

    pub fn eigenfunction_at(&self, k: usize, t: f64) -> f64 {
        interpolate(&self.grid, &self.eigenfunctions[k], t)
    }

    fn check_points(&self, times: &[f64]) -> Result<()> {
        match times.iter().find(|t| !self.domain.contains(**t)) {
            Some(t) => Err(FlcmError::Data(format!(
                "evaluation point {t} outside [{}, {}]",
                self.domain.lower, self.domain.upper
            ))),
            None => Ok(()),
        }
    }

    fn phi_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(times.len(), self.num_components(), |r, k| {
            self.eigenfunction_at(k, times[r])
        })
    }

    /// Smooth part `sum_k lambda_k phi_k(s) phi_k(t)` at the given times.
    pub fn smooth_covariance_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let phi = self.phi_matrix(times);
        let lam = DMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        &phi * lam * phi.transpose()
    }

    /// Smooth part plus `noise_var` on the diagonal.
    pub fn covariance_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let mut s = self.smooth_covariance_matrix(times);
        for i in 0..times.len() {
            s[(i, i)] += self.noise_var;
        }
        s
    }

    /// Conditional-expectation scores for one subject.
    pub fn scores(&self, times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        if times.is_empty() || times.len() != values.len() {
            return Err(FlcmError::Data("subject needs at least one observation".into()));
        }
        self.check_points(times)?;
        let k = self.num_components();
        if k == 0 {
            return Ok(Vec::new());
        }
        let phi = self.phi_matrix(times);
        let resid = DVector::from_iterator(
            times.len(),
            times.iter().zip(values).map(|(t, u)| u - self.mean_at(*t)),
        );
        let mut inner = self.covariance_matrix(times);
        let chol = match inner.clone().cholesky() {
            Some(c) => c,
            None => {
                let m = times.len();
                let ridge = 1e-8 * (inner.trace() / m as f64).max(1.0);
                for i in 0..m {
                    inner[(i, i)] += ridge;
                }
                inner.cholesky().ok_or_else(|| {
                    FlcmError::Numerical("score system singular even after ridge".into())
                })?
            }
        };
        let solved = chol.solve(&resid);
        let proj = phi.tr_mul(&solved);
        Ok((0..k).map(|c| self.eigenvalues[c] * proj[c]).collect())
    }

    /// `mean(t) + sum_k scores[k] phi_k(t)` at each point.
    pub fn reconstruct(&self, scores: &[f64], points: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.num_components() {
            return Err(FlcmError::Config(format!(
                "{} scores for a {}-component model",
                scores.len(),
                self.num_components()
            )));
        }
        self.check_points(points)?;
        Ok(points
            .iter()
            .map(|&t| {
                self.mean_at(t)
                    + scores
                        .iter()
                        .enumerate()
                        .map(|(k, z)| z * self.eigenfunction_at(k, t))
                        .sum::<f64>()
            })
            .collect())
    }

    /// Quadrature inner product of two eigenfunctions (grid-spacing weights).
    pub fn inner_product(&self, a: usize, b: usize) -> f64 {
        let n = self.grid.len();
        let spacing = (self.grid[n - 1] - self.grid[0]) / (n - 1) as f64;
        self.eigenfunctions[a]
            .iter()
            .zip(&self.eigenfunctions[b])
            .map(|(x, y)| x * y)
            .sum::<f64>()
            * spacing
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn domain() -> Domain {
        Domain::new(0.0, 100.0).unwrap()
    }

    fn dense_obs<F: FnMut(usize, f64) -> f64>(n: usize, m: usize, mut f: F) -> FunctionalObservations {
        let times = domain().linspace(m);
        let subjects = (0..n)
            .map(|i| SubjectCurve::new(times.clone(), times.iter().map(|t| f(i, *t)).collect()).unwrap())
            .collect();
        FunctionalObservations::new(domain(), subjects).unwrap()
    }

    #[test]
    fn mean_of_constant_data_is_constant() {
        let obs = dense_obs(5, 30, |_, _| 3.25);
        let grid = domain().linspace(101);
        let m = estimate_mean(&obs, &grid, 10.0).unwrap();
        assert!(m.values.iter().all(|v| (v - 3.25).abs() < 1e-8));
    }

    #[test]
    fn mean_of_smooth_function_within_tolerance() {
        let obs = dense_obs(50, 81, |_, t| (PI * t / 50.0).sin());
        let grid = domain().linspace(101);
        let m = estimate_mean(&obs, &grid, 5.0).unwrap();
        let err = grid
            .iter()
            .zip(&m.values)
            .map(|(t, v)| (v - (PI * t / 50.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.02, "max error {err}");
    }

    #[test]
    fn empty_data_is_rejected() {
        let obs = FunctionalObservations::new(domain(), vec![]).unwrap();
        assert!(matches!(estimate_mean(&obs, &[0.0, 1.0], 1.0), Err(FlcmError::Data(_))));
    }

    #[test]
    fn pure_noise_gives_flat_surface_and_unit_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let obs = dense_obs(200, 81, |_, _| normal.sample(&mut rng));
        let grid = domain().linspace(101);
        let mean = estimate_mean(&obs, &grid, 10.0).unwrap().values;
        let cov = estimate_covariance(&obs, &grid, &mean, 20.0).unwrap();
        assert_eq!(cov.surface, cov.surface.transpose());
        let gmax = cov.surface.amax();
        assert!(gmax <= 0.1, "surface max {gmax}");
        assert!((0.8..=1.2).contains(&cov.noise_var), "noise {}", cov.noise_var);
    }

    #[test]
    fn single_eigenfunction_process_recovers_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xi = Normal::new(0.0, 2.0).unwrap();
        let scores: Vec<f64> = (0..200).map(|_| xi.sample(&mut rng)).collect();
        let obs = dense_obs(200, 81, |i, t| scores[i] * 2f64.sqrt() * (PI * t / 50.0).cos());
        let grid = domain().linspace(101);
        let mean = estimate_mean(&obs, &grid, 10.0).unwrap().values;
        let cov = estimate_covariance(&obs, &grid, &mean, 10.0).unwrap();
        let eig = eigendecompose(&cov.surface, &grid, 0.9).unwrap();
        // ∫ (√2 cos(πt/50))² dt over [0, 100] = 100, and Var ξ = 4
        let expect = 4.0 * 100.0;
        assert!((eig.eigenvalues[0] - expect).abs() <= 0.25 * expect, "got {}", eig.eigenvalues[0]);
    }

    #[test]
    fn too_few_points_per_subject_is_unidentifiable() {
        let obs = dense_obs(10, 1, |_, _| 1.0);
        let grid = domain().linspace(11);
        let mean = vec![1.0; 11];
        assert!(matches!(estimate_covariance(&obs, &grid, &mean, 20.0), Err(FlcmError::Data(_))));
    }

    fn rank_one(grid: &[f64], lambda: f64) -> (DMatrix<f64>, Vec<f64>) {
        let w = grid.len();
        let spacing = grid[1] - grid[0];
        let raw: Vec<f64> = grid.iter().map(|t| (PI * t / 100.0).sin() + 0.3).collect();
        let norm = (raw.iter().map(|v| v * v).sum::<f64>() * spacing).sqrt();
        let phi: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        (DMatrix::from_fn(w, w, |a, b| lambda * phi[a] * phi[b]), phi)
    }

    #[test]
    fn rank_one_surface_is_recovered_exactly() {
        let grid = domain().linspace(101);
        let (s, phi) = rank_one(&grid, 4.0);
        let eig = eigendecompose(&s, &grid, 0.99).unwrap();
        assert_eq!(eig.eigenvalues.len(), 1);
        assert!((eig.eigenvalues[0] - 4.0).abs() < 1e-10);
        let diff: f64 = eig.eigenfunctions[0].iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
    }

    #[test]
    fn flat_spectrum_keeps_requested_fraction() {
        let grid = Domain::new(0.0, 1.0).unwrap().linspace(100);
        let s = DMatrix::identity(100, 100);
        let eig = eigendecompose(&s, &grid, 0.95).unwrap();
        assert_eq!(eig.eigenvalues.len(), 95);
        assert!(eig.pve >= 0.95 - 1e-12);
    }

    #[test]
    fn two_components_at_exact_threshold() {
        let grid = domain().linspace(101);
        let spacing = 1.0;
        let w = grid.len();
        let f1: Vec<f64> = grid.iter().map(|t| (2.0f64 / 100.0).sqrt() * (PI * t / 100.0).sin()).collect();
        let f2: Vec<f64> = grid.iter().map(|t| (2.0f64 / 100.0).sqrt() * (2.0 * PI * t / 100.0).sin()).collect();
        let n1 = (f1.iter().map(|v| v * v).sum::<f64>() * spacing).sqrt();
        let n2 = (f2.iter().map(|v| v * v).sum::<f64>() * spacing).sqrt();
        let s = DMatrix::from_fn(w, w, |a, b| 9.0 * f1[a] * f1[b] / (n1 * n1) + f2[a] * f2[b] / (n2 * n2));
        let eig = eigendecompose(&s, &grid, 0.9).unwrap();
        assert_eq!(eig.eigenvalues.len(), 1);
        assert!((eig.eigenvalues[0] - 9.0).abs() < 1e-9);
    }

    #[test]
    fn negative_surface_is_degenerate() {
        let grid = domain().linspace(11);
        let s = -DMatrix::identity(11, 11);
        assert!(matches!(eigendecompose(&s, &grid, 0.9), Err(FlcmError::Numerical(_))));
    }

    fn known_model(noise_var: f64) -> FpcaModel {
        let grid = domain().linspace(101);
        let (_, phi) = rank_one(&grid, 1.0);
        let mean: Vec<f64> = grid.iter().map(|t| 5.0 + 0.01 * t).collect();
        FpcaModel::from_parts(domain(), mean, vec![3.0], vec![phi], noise_var).unwrap()
    }

    #[test]
    fn scores_vanish_at_the_mean() {
        let m = known_model(0.5);
        let times = [1.0, 30.0, 55.0];
        let vals: Vec<f64> = times.iter().map(|t| m.mean_at(*t)).collect();
        let z = m.scores(&times, &vals).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn dense_noiseless_score_is_recovered() {
        let m = known_model(0.0);
        let times = domain().linspace(81);
        let vals: Vec<f64> = times.iter().map(|t| m.mean_at(*t) + 2.0 * m.eigenfunction_at(0, *t)).collect();
        let z = m.scores(&times, &vals).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-2, "score {}", z[0]);
    }

    #[test]
    fn scores_shrink_as_noise_grows() {
        let times = [10.0, 40.0, 70.0];
        let base = known_model(0.0);
        let vals: Vec<f64> = times.iter().map(|t| base.mean_at(*t) + 2.0 * base.eigenfunction_at(0, *t)).collect();
        let mut prev = f64::INFINITY;
        for s2 in [1.0, 10.0, 100.0] {
            let z = known_model(s2).scores(&times, &vals).unwrap()[0].abs();
            assert!(z < prev);
            prev = z;
        }
    }

    #[test]
    fn reconstruct_checks_inputs() {
        let m = known_model(0.1);
        let at_mean = m.reconstruct(&[0.0], &[0.0, 50.0, 100.0]).unwrap();
        assert!((at_mean[1] - m.mean_at(50.0)).abs() < 1e-15);
        assert!(matches!(m.reconstruct(&[0.0], &[101.0]), Err(FlcmError::Data(_))));
        assert!(m.reconstruct(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn exact_rank_k_reconstruction_on_grid() {
        let m = known_model(0.0);
        let times = m.grid.clone();
        let truth: Vec<f64> = times.iter().map(|t| m.mean_at(*t) - 1.3 * m.eigenfunction_at(0, *t)).collect();
        let z = m.scores(&times, &truth).unwrap();
        let rec = m.reconstruct(&z, &times).unwrap();
        let err = rec.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn grid_moments_keep_fast_oscillations() {
        // e(t) = x1 cos t + x2 sin t + white noise, sparsely sampled from an 81-point grid
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Normal::new(0.0, 1.0).unwrap();
        let full = domain().linspace(81);
        let subjects = (0..400)
            .map(|_| {
                let (x1, x2) = (0.5 * z.sample(&mut rng), 0.75 * z.sample(&mut rng));
                let mut keep: Vec<f64> = full.iter().copied().filter(|_| rand::Rng::random_bool(&mut rng, 0.45)).collect();
                if keep.len() < 2 {
                    keep = full.clone();
                }
                let vals = keep.iter().map(|t| x1 * t.cos() + x2 * t.sin() + z.sample(&mut rng)).collect();
                SubjectCurve::new(keep, vals).unwrap()
            })
            .collect();
        let obs = FunctionalObservations::new(domain(), subjects).unwrap();
        let grid = common_grid(&obs, 400).expect("regular grid");
        assert_eq!(grid.len(), 81);
        let m = grid_moments(&obs, &grid).unwrap();
        let mut worst = 0.0f64;
        let mut total = 0.0;
        for a in 0..81 {
            for b in 0..81 {
                let (s, t) = (grid[a], grid[b]);
                let truth = 0.25 * s.cos() * t.cos() + 0.5625 * s.sin() * t.sin();
                worst = worst.max((m.surface[(a, b)] - truth).abs());
                total += (m.surface[(a, b)] - truth).abs();
            }
        }
        assert!(worst < 0.5, "surface error {worst}");
        assert!(total / (81.0 * 81.0) < 0.08, "mean surface error {}", total / 6561.0);
        assert!((0.8..=1.2).contains(&m.noise_var), "noise {}", m.noise_var);

        let opts = FpcaOptions {
            raw_on_grid: true,
            pve: 0.95,
            ..Default::default()
        };
        // subsampled subjects are not dense, so the model smooths
        assert_eq!(FpcaModel::fit(&obs, &opts).unwrap().grid.len(), 101);
        let dense: Vec<SubjectCurve> = (0..150)
            .map(|_| {
                let (x1, x2) = (0.5 * z.sample(&mut rng), 0.75 * z.sample(&mut rng));
                let vals = full.iter().map(|t| x1 * t.cos() + x2 * t.sin() + z.sample(&mut rng)).collect();
                SubjectCurve::new(full.clone(), vals).unwrap()
            })
            .collect();
        let model = FpcaModel::fit(&FunctionalObservations::new(domain(), dense).unwrap(), &opts).unwrap();
        assert_eq!(model.grid.len(), 81);
        let lead: f64 = model.eigenvalues.iter().take(2).sum();
        // analytic eigenvalues 0.5625 * 50 and 0.25 * 50 up to boundary effects
        assert!((lead - 40.6).abs() < 0.2 * 40.6, "leading pair {lead}");
    }

    #[test]
    fn irregular_times_have_no_common_grid() {
        let obs = dense_obs(3, 81, |_, t| t);
        assert!(common_grid(&obs, 400).is_some());
        assert!(common_grid(&obs, 50).is_none());
        let shifted = FunctionalObservations::new(
            domain(),
            vec![SubjectCurve::new(vec![0.0, 33.0, 100.0], vec![1.0; 3]).unwrap(); 2],
        )
        .unwrap();
        assert!(common_grid(&shifted, 400).is_none());
    }
}
