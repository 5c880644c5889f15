//! The functional linear concurrent model as a grouped regression.
//!
//! Each coefficient function is `beta_j(t) = theta_j(t)^T b_j`. With
//! `K_j = R_j + psi Q_j = L_j L_j^T` and `gamma_j = L_j^T b_j`, the
//! sparsity-plus-roughness penalty `(b_j^T K_j b_j)^{1/2}` becomes the plain
//! group norm `||gamma_j||`, so the design block for covariate `j` at row
//! `(i, t)` is `Z_ij(t) theta_j(t)^T L_j^{-T}`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Domain, PenaltyMatrices, SplineBasis};
use crate::data::FunctionalDataset;
use crate::error::{FlcmError, Result, StageExt};
use crate::fpca::{estimate_mean, interpolate, FpcaModel, FpcaOptions, FunctionalObservations, SubjectCurve};
use crate::linalg::sym_inv_sqrt;
use crate::par::{map_indexed, Execution};
use crate::solver::{lambda_grid, GroupDesign, PenaltyFamily, PenaltySpec, PreparedProblem, SolverOptions, SolverResult};
use crate::tuning::{ebic, select_model, Candidate, TuningGrid};

/// Spline systems for the covariates and, optionally, the intercept.
#[derive(Debug, Clone)]
pub struct ModelBases {
    pub domain: Domain,
    pub covariates: Vec<SplineBasis>,
    pub intercept: Option<SplineBasis>,
}

impl ModelBases {
    pub fn new(domain: Domain, p: usize, num_basis: usize, degree: usize, intercept_basis: Option<usize>) -> Result<Self> {
        let basis = SplineBasis::new(domain, num_basis, degree)?;
        let intercept = intercept_basis.map(|k| SplineBasis::new(domain, k, degree)).transpose()?;
        Ok(ModelBases {
            domain,
            covariates: vec![basis; p],
            intercept,
        })
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    /// Design group of covariate `j`.
    pub fn group_of(&self, j: usize) -> usize {
        j + self.intercept.is_some() as usize
    }

    pub fn penalties(&self, psi: f64) -> Result<Vec<PenaltyMatrices>> {
        self.covariates.iter().map(|b| PenaltyMatrices::for_basis(b, psi)).collect()
    }
}

/// Response and covariate values on each subject's response times.
#[derive(Debug, Clone)]
pub struct AlignedData {
    pub times: Vec<Vec<f64>>,
    pub response: Vec<Vec<f64>>,
    /// `covariates[i][j][l]` is covariate `j` of subject `i` at `times[i][l]`.
    pub covariates: Vec<Vec<Vec<f64>>>,
}

impl AlignedData {
    /// Takes covariate values as observed; every covariate must be available
    /// at every response time.
    pub fn from_dataset(data: &FunctionalDataset) -> Result<Self> {
        let mut covariates = Vec::with_capacity(data.n());
        for s in &data.subjects {
            let mut per = Vec::with_capacity(data.p());
            for (j, c) in s.covariates.iter().enumerate() {
                let mut vals = Vec::with_capacity(s.response.len());
                for &t in &s.response.times {
                    match c.times.iter().position(|u| *u == t) {
                        Some(k) => vals.push(c.values[k]),
                        None => {
                            return Err(FlcmError::Data(format!(
                                "subject {}: covariate {} has no value at response time {t}; \
                                 enable FPCA reconstruction to fill it",
                                s.id, data.covariate_names[j]
                            )))
                        }
                    }
                }
                per.push(vals);
            }
            covariates.push(per);
        }
        Ok(AlignedData {
            times: data.subjects.iter().map(|s| s.response.times.clone()).collect(),
            response: data.subjects.iter().map(|s| s.response.values.clone()).collect(),
            covariates,
        })
    }

    pub fn nrows(&self) -> usize {
        self.times.iter().map(Vec::len).sum()
    }

    /// Row range of each subject in the stacked design.
    pub fn row_ranges(&self) -> Vec<Range<usize>> {
        let mut at = 0;
        self.times
            .iter()
            .map(|t| {
                let r = at..at + t.len();
                at = r.end;
                r
            })
            .collect()
    }
}

/// Blocks `Z_ij(t) theta_j(t)^T` (no penalty root applied) plus the intercept
/// block `theta_0(t)^T` when the bases carry one.
pub fn raw_design(data: &AlignedData, bases: &ModelBases) -> Result<GroupDesign> {
    let n_rows = data.nrows();
    let mut blocks: Vec<(usize, bool)> = Vec::new();
    if let Some(b) = &bases.intercept {
        blocks.push((b.num_basis(), false));
    }
    for b in &bases.covariates {
        blocks.push((b.num_basis(), true));
    }
    let cols: usize = blocks.iter().map(|b| b.0).sum();
    let mut x = DMatrix::zeros(n_rows, cols);
    let mut y = DVector::zeros(n_rows);
    let mut row = 0;
    for (i, times) in data.times.iter().enumerate() {
        if data.covariates[i].len() != bases.p() {
            return Err(FlcmError::Data(format!(
                "subject {i} has {} covariates, model has {}",
                data.covariates[i].len(),
                bases.p()
            )));
        }
        for (l, &t) in times.iter().enumerate() {
            y[row] = data.response[i][l];
            let mut col = 0;
            if let Some(b) = &bases.intercept {
                for (k, v) in b.eval(t).iter().enumerate() {
                    x[(row, col + k)] = *v;
                }
                col += b.num_basis();
            }
            for (j, b) in bases.covariates.iter().enumerate() {
                let z = data.covariates[i][j][l];
                for (k, v) in b.eval(t).iter().enumerate() {
                    x[(row, col + k)] = z * v;
                }
                col += b.num_basis();
            }
            row += 1;
        }
    }
    GroupDesign::from_blocks(x, y, &blocks)
}

/// Right-multiplies every penalized block by `L_j^{-T}`.
pub fn apply_roots(raw: &GroupDesign, penalties: &[PenaltyMatrices]) -> Result<GroupDesign> {
    let mut out = raw.clone();
    let mut j = 0;
    for (gi, g) in raw.groups.iter().enumerate() {
        if !g.penalized {
            continue;
        }
        let pm = penalties
            .get(j)
            .ok_or_else(|| FlcmError::Config("fewer penalty matrices than penalized groups".into()))?;
        if pm.root.nrows() != g.size {
            return Err(FlcmError::Config(format!("penalty root for group {j} has the wrong size")));
        }
        // B L^{-T} = (L^{-1} B^T)^T
        let bt = raw.block(gi).transpose();
        let solved = pm
            .root
            .solve_lower_triangular(&bt)
            .ok_or_else(|| FlcmError::Numerical("singular penalty root".into()))?;
        out.x.columns_mut(g.start, g.size).copy_from(&solved.transpose());
        j += 1;
    }
    Ok(out)
}

/// The transformed design at one `psi`.
pub fn build_design(data: &AlignedData, bases: &ModelBases, penalties: &[PenaltyMatrices]) -> Result<GroupDesign> {
    apply_roots(&raw_design(data, bases)?, penalties)
}

/// Left-multiplies each subject's rows (response and design) by `W_i`.
fn whiten_rows(design: &GroupDesign, rows: &[Range<usize>], transforms: &[DMatrix<f64>]) -> GroupDesign {
    let mut out = design.clone();
    for (r, w) in rows.iter().zip(transforms) {
        let m = r.len();
        let xb = w * design.x.rows(r.start, m);
        out.x.rows_mut(r.start, m).copy_from(&xb);
        let yb = w * design.y.rows(r.start, m);
        out.y.rows_mut(r.start, m).copy_from(&yb);
    }
    out
}

/// Prewhitening with one `m x m` covariance shared by all subjects.
///
/// Returns the whitened design and the number of floored eigenvalues.
pub fn prewhiten(design: &GroupDesign, rows: &[Range<usize>], sigma: &DMatrix<f64>, floor_rel: f64) -> Result<(GroupDesign, usize)> {
    if rows.iter().any(|r| r.len() != sigma.nrows()) {
        return Err(FlcmError::Data("every subject must have one row per covariance grid point".into()));
    }
    let (w, floored) = sym_inv_sqrt(sigma, floor_rel)?;
    if floored > 0 {
        log::warn!("floored {floored} covariance eigenvalues before whitening");
    }
    let ws = vec![w; rows.len()];
    Ok((whiten_rows(design, rows, &ws), floored))
}

/// Prewhitening with a separate covariance per subject (sparse designs).
pub fn prewhiten_subjects(
    design: &GroupDesign,
    rows: &[Range<usize>],
    sigmas: &[DMatrix<f64>],
    floor_rel: f64,
) -> Result<(GroupDesign, usize)> {
    if rows.len() != sigmas.len() || rows.iter().zip(sigmas).any(|(r, s)| r.len() != s.nrows()) {
        return Err(FlcmError::Data("one covariance per subject, sized to its rows".into()));
    }
    let mut floored = 0;
    let mut ws = Vec::with_capacity(sigmas.len());
    for s in sigmas {
        let (w, f) = sym_inv_sqrt(s, floor_rel)?;
        floored += f;
        ws.push(w);
    }
    if floored > 0 {
        log::warn!("floored {floored} covariance eigenvalues before whitening");
    }
    Ok((whiten_rows(design, rows, &ws), floored))
}

/// Spline coefficients recovered from a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficients {
    pub intercept: Option<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// `b_j = L_j^{-T} gamma_j` for every covariate; the intercept is untransformed.
pub fn recover_coefficients(result: &SolverResult, penalties: &[PenaltyMatrices], has_intercept: bool) -> Coefficients {
    let offset = has_intercept as usize;
    let b = penalties
        .iter()
        .enumerate()
        .map(|(j, pm)| {
            let g = &result.gamma[j + offset];
            if g.iter().all(|v| *v == 0.0) {
                vec![0.0; g.len()]
            } else {
                pm.to_coefficients(g).iter().copied().collect()
            }
        })
        .collect();
    Coefficients {
        intercept: has_intercept.then(|| result.gamma[0].iter().copied().collect()),
        b,
    }
}

/// `sum_i sum_l (Y_il - fit_il)^2 + lambda * N * sum_j (b_j^T K_j b_j)^{1/2}`,
/// evaluated directly from the spline coefficients.
pub fn penalized_criterion(
    data: &AlignedData,
    bases: &ModelBases,
    penalties: &[PenaltyMatrices],
    coef: &Coefficients,
    lambda: f64,
) -> f64 {
    let mut rss = 0.0;
    for (i, times) in data.times.iter().enumerate() {
        for (l, &t) in times.iter().enumerate() {
            let mut fit = 0.0;
            if let (Some(b), Some(c)) = (&bases.intercept, &coef.intercept) {
                fit += b.eval_combination(t, c);
            }
            for (j, b) in bases.covariates.iter().enumerate() {
                fit += data.covariates[i][j][l] * b.eval_combination(t, &coef.b[j]);
            }
            rss += (data.response[i][l] - fit).powi(2);
        }
    }
    let pen: f64 = penalties
        .iter()
        .zip(&coef.b)
        .map(|(pm, b)| pm.quadratic_form(&DVector::from_column_slice(b)).max(0.0).sqrt())
        .sum();
    rss + lambda * data.nrows() as f64 * pen
}

/// `||y - X gamma||^2 + lambda * N * sum_{penalized j} ||gamma_j||`.
pub fn group_objective(design: &GroupDesign, gamma: &[DVector<f64>], lambda: f64) -> f64 {
    let pen: f64 = design
        .groups
        .iter()
        .zip(gamma)
        .filter(|(g, _)| g.penalized)
        .map(|(_, v)| v.norm())
        .sum();
    design.rss(gamma) + lambda * design.nrows() as f64 * pen
}

/// Every setting of the fitting pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Defaults to the dataset's domain.
    pub domain: Option<Domain>,
    pub num_basis: usize,
    pub degree: usize,
    /// Size of the unpenalized intercept basis; `None` drops the intercept.
    pub intercept_basis: Option<usize>,
    /// Subtract each covariate's estimated mean function before fitting.
    pub center_covariates: bool,
    /// Replace covariates by their FPCA reconstructions at the response times.
    pub denoise: bool,
    pub covariate_fpca: FpcaOptions,
    pub prewhiten: bool,
    pub residual_fpca: FpcaOptions,
    /// Ridge for the full-model fit that produces residuals.
    pub full_fit_ridge: f64,
    /// Relative eigenvalue floor for the covariance inverse square root.
    pub eigen_floor: f64,
    pub family: PenaltyFamily,
    /// Defaults to the family's conventional value.
    pub phi: Option<f64>,
    pub tuning: TuningGrid,
    pub solver: SolverOptions,
    pub execution: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            domain: None,
            num_basis: 10,
            degree: 3,
            intercept_basis: Some(20),
            center_covariates: true,
            denoise: true,
            covariate_fpca: FpcaOptions::with_pve(0.99),
            prewhiten: true,
            residual_fpca: FpcaOptions {
                raw_on_grid: true,
                ..FpcaOptions::with_pve(0.95)
            },
            full_fit_ridge: 1e-6,
            eigen_floor: 1e-8,
            family: PenaltyFamily::GroupScad,
            phi: None,
            tuning: TuningGrid::default(),
            solver: SolverOptions::default(),
            execution: Execution::Parallel,
        }
    }
}

impl FitOptions {
    pub fn penalty_template(&self, family: PenaltyFamily) -> Result<PenaltySpec> {
        match self.phi {
            Some(phi) if family != PenaltyFamily::GroupLasso => PenaltySpec::new(family, 0.0, phi),
            _ => PenaltySpec::with_default_phi(family, 0.0),
        }
    }
}

/// The selected tuning point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningRecord {
    pub family: PenaltyFamily,
    pub lambda: f64,
    pub psi: f64,
    pub phi: f64,
    pub ebic: f64,
    pub df: usize,
    pub rss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub covariate_names: Vec<String>,
    /// Covariate indices with a nonzero coefficient function.
    pub selected: Vec<usize>,
    pub coefficients: Coefficients,
    pub bases: ModelBases,
    pub tuning: TuningRecord,
    /// Every scored tuning point.
    pub table: Vec<Candidate>,
    /// Per subject, on the response times, in the original (unwhitened) scale.
    pub residuals: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// `beta_j(t)`.
    pub fn beta(&self, j: usize, t: f64) -> f64 {
        self.bases.covariates[j].eval_combination(t, &self.coefficients.b[j])
    }

    pub fn beta_curve(&self, j: usize, points: &[f64]) -> Vec<f64> {
        points.iter().map(|&t| self.beta(j, t)).collect()
    }

    pub fn selected_names(&self) -> Vec<&str> {
        self.selected.iter().map(|&j| self.covariate_names[j].as_str()).collect()
    }
}

/// Stages (a) to (d) of the pipeline: everything that does not depend on the
/// penalty family.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub covariate_names: Vec<String>,
    pub aligned: AlignedData,
    pub bases: ModelBases,
    /// Design without penalty roots, in the original scale.
    pub raw: GroupDesign,
    /// `raw` after prewhitening (equal to `raw` when prewhitening is off).
    pub whitened: GroupDesign,
    pub residual_model: Option<FpcaModel>,
    pub warnings: Vec<String>,
}

/// Covariate values at the response times, denoised and centered as configured.
fn align_covariates(data: &FunctionalDataset, opts: &FitOptions, domain: Domain) -> Result<AlignedData> {
    if !opts.denoise {
        let mut aligned = AlignedData::from_dataset(data)?;
        if opts.center_covariates {
            let obs = FunctionalObservations::new(
                domain,
                aligned
                    .times
                    .iter()
                    .zip(&aligned.response)
                    .map(|(t, _)| SubjectCurve::new(t.clone(), vec![0.0; t.len()]))
                    .collect::<Result<_>>()?,
            )?;
            let grid = domain.linspace(opts.covariate_fpca.grid_size);
            let h = opts.covariate_fpca.mean_bandwidth.unwrap_or(domain.width() / 10.0);
            for j in 0..data.p() {
                let mut o = obs.clone();
                for (i, s) in o.subjects.iter_mut().enumerate() {
                    s.values = aligned.covariates[i][j].clone();
                }
                let mean = estimate_mean(&o, &grid, h)?.values;
                for (i, times) in aligned.times.iter().enumerate() {
                    for (l, &t) in times.iter().enumerate() {
                        aligned.covariates[i][j][l] -= interpolate(&grid, &mean, t);
                    }
                }
            }
        }
        return Ok(aligned);
    }
    let per_covariate: Vec<Result<Vec<Vec<f64>>>> = map_indexed(opts.execution, data.p(), |j| {
        let mut obs = data.covariate_observations(j)?;
        obs.domain = domain;
        let model = FpcaModel::fit(&obs, &opts.covariate_fpca)
            .map_err(|e| FlcmError::Data(format!("covariate {}: {e}", data.covariate_names[j])))?;
        data.subjects
            .iter()
            .map(|s| {
                let c = &s.covariates[j];
                let scores = model.scores(&c.times, &c.values)?;
                let mut z = model.reconstruct(&scores, &s.response.times)?;
                if opts.center_covariates {
                    for (v, &t) in z.iter_mut().zip(&s.response.times) {
                        *v -= model.mean_at(t);
                    }
                }
                Ok(z)
            })
            .collect()
    });
    let mut covariates = vec![Vec::with_capacity(data.p()); data.n()];
    for res in per_covariate {
        for (i, z) in res?.into_iter().enumerate() {
            covariates[i].push(z);
        }
    }
    Ok(AlignedData {
        times: data.subjects.iter().map(|s| s.response.times.clone()).collect(),
        response: data.subjects.iter().map(|s| s.response.values.clone()).collect(),
        covariates,
    })
}

/// Denoise covariates, build the design, and prewhiten it.
pub fn prepare(data: &FunctionalDataset, opts: &FitOptions) -> Result<PreparedData> {
    opts.tuning.validate().stage("configuration")?;
    let domain = opts.domain.unwrap_or(data.domain);
    let mut warnings = Vec::new();
    let aligned = align_covariates(data, opts, domain).stage("covariate preprocessing")?;
    let bases = ModelBases::new(domain, data.p(), opts.num_basis, opts.degree, opts.intercept_basis).stage("configuration")?;
    let raw = raw_design(&aligned, &bases).stage("design")?;
    if !opts.prewhiten {
        return Ok(PreparedData {
            covariate_names: data.covariate_names.clone(),
            aligned,
            bases,
            whitened: raw.clone(),
            raw,
            residual_model: None,
            warnings,
        });
    }

    // full-model residuals; psi is irrelevant to an unpenalized fit
    let penalties = bases.penalties(0.0).stage("full-model fit")?;
    let design = apply_roots(&raw, &penalties).stage("full-model fit")?;
    let gamma = PreparedProblem::new(&design)
        .and_then(|p| p.ridge_fit(opts.full_fit_ridge))
        .stage("full-model fit")?;
    let resid = &design.y - design.fitted(&gamma);
    let rows = aligned.row_ranges();
    let subjects = rows
        .iter()
        .zip(&aligned.times)
        .map(|(r, t)| SubjectCurve::new(t.clone(), resid.rows(r.start, r.len()).iter().copied().collect()))
        .collect::<Result<Vec<_>>>()
        .stage("residual covariance")?;
    let obs = FunctionalObservations::new(domain, subjects).stage("residual covariance")?;
    let model = FpcaModel::fit(&obs, &opts.residual_fpca).stage("residual covariance")?;
    if model.num_components() == 0 {
        warnings.push("residual covariance has no component above noise; whitening is a rescaling".into());
    }

    let shared = data.common_response_grid().map(|g| g.to_vec());
    let (whitened, floored) = match shared {
        Some(grid) => prewhiten(&raw, &rows, &model.covariance_matrix(&grid), opts.eigen_floor),
        None => {
            let sigmas: Vec<DMatrix<f64>> = aligned.times.iter().map(|t| model.covariance_matrix(t)).collect();
            prewhiten_subjects(&raw, &rows, &sigmas, opts.eigen_floor)
        }
    }
    .stage("prewhitening")?;
    if floored > 0 {
        warnings.push(format!("floored {floored} covariance eigenvalues"));
    }
    Ok(PreparedData {
        covariate_names: data.covariate_names.clone(),
        aligned,
        bases,
        raw,
        whitened,
        residual_model: Some(model),
        warnings,
    })
}

struct Scored {
    candidate: Candidate,
    result: SolverResult,
    df: usize,
}

/// EBIC tuning over the (psi, lambda) grid for one penalty family.
pub fn fit_prepared(prep: &PreparedData, opts: &FitOptions, family: PenaltyFamily) -> Result<FitResult> {
    let template = opts.penalty_template(family).stage("configuration")?;
    let p = prep.bases.p();
    let has_intercept = prep.bases.intercept.is_some();
    let mut scored: Vec<Scored> = Vec::new();
    let mut warnings = prep.warnings.clone();
    for &psi in &opts.tuning.psi_grid {
        let penalties = prep.bases.penalties(psi).stage("penalty matrices")?;
        let design = apply_roots(&prep.whitened, &penalties).stage("design")?;
        let problem = PreparedProblem::new(&design).stage("orthonormalization")?;
        let lmax = problem.lambda_max();
        let grid = if lmax > 0.0 {
            lambda_grid(lmax, opts.tuning.lambda_count, opts.tuning.lambda_min_ratio)
        } else {
            vec![0.0]
        };
        let ranks = problem.group_ranks();
        let n_rows = problem.nrows();
        for res in problem.path(&template, &grid, &opts.solver).stage("solver")? {
            let res = match res {
                Ok(r) => r,
                Err(e) => {
                    warnings.push(format!("psi {psi}: {e}"));
                    continue;
                }
            };
            if !res.converged {
                warnings.push(format!("psi {psi}, lambda {}: hit the iteration limit", res.spec.lambda));
            }
            let df: usize = design
                .groups
                .iter()
                .enumerate()
                .filter(|(g, grp)| !grp.penalized || res.is_active(*g))
                .map(|(g, _)| ranks[g])
                .sum();
            let e = ebic(res.rss, n_rows, df, p, res.active.len(), opts.tuning.ebic_gamma).stage("tuning")?;
            scored.push(Scored {
                candidate: Candidate {
                    lambda: res.spec.lambda,
                    psi,
                    ebic: if res.converged { e.value } else { f64::NAN },
                },
                result: res,
                df,
            });
        }
    }
    let table: Vec<Candidate> = scored.iter().map(|s| s.candidate).collect();
    let best = select_model(&table).stage("tuning")?;
    let chosen = &scored[best];
    let psi = chosen.candidate.psi;
    let penalties = prep.bases.penalties(psi).stage("penalty matrices")?;
    let coefficients = recover_coefficients(&chosen.result, &penalties, has_intercept);

    let original = apply_roots(&prep.raw, &penalties).stage("design")?;
    let resid = &original.y - original.fitted(&chosen.result.gamma);
    let residuals = prep
        .aligned
        .row_ranges()
        .into_iter()
        .map(|r| resid.rows(r.start, r.len()).iter().copied().collect())
        .collect();
    let selected: Vec<usize> = (0..p)
        .filter(|&j| chosen.result.is_active(prep.bases.group_of(j)))
        .collect();
    Ok(FitResult {
        covariate_names: prep.covariate_names.clone(),
        selected,
        coefficients,
        bases: prep.bases.clone(),
        tuning: TuningRecord {
            family,
            lambda: chosen.candidate.lambda,
            psi,
            phi: chosen.result.spec.phi,
            ebic: chosen.candidate.ebic,
            df: chosen.df,
            rss: chosen.result.rss,
            converged: chosen.result.converged,
        },
        table,
        residuals,
        warnings,
    })
}

/// The full pipeline: denoise, whiten, tune, and map back to coefficient functions.
pub fn fit_flcm(data: &FunctionalDataset, opts: &FitOptions) -> Result<FitResult> {
    let prep = prepare(data, opts)?;
    fit_prepared(&prep, opts, opts.family)
}
