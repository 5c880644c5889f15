//! Clamped B-spline bases and the roughness/size penalty matrices built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlcmError, Result};
use crate::linalg::{cholesky_with_jitter, max_abs};
use crate::quadrature::push_mapped_rule;

/// A closed interval `[lower, upper]` with `lower < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: f64,
    pub upper: f64,
}

impl Domain {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(FlcmError::Config(format!(
                "domain [{lower}, {upper}] is empty or not finite"
            )));
        }
        Ok(Domain { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }

    /// `n` equispaced points including both end points.
    pub fn linspace(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.lower],
            _ => {
                let h = self.width() / (n - 1) as f64;
                (0..n)
                    .map(|i| if i == n - 1 { self.upper } else { self.lower + h * i as f64 })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    domain: Domain,
    degree: usize,
    num_basis: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Clamped B-spline basis with equally spaced interior knots.
    pub fn new(domain: Domain, num_basis: usize, degree: usize) -> Result<Self> {
        Domain::new(domain.lower, domain.upper)?;
        if num_basis < degree + 1 {
            return Err(FlcmError::Config(format!(
                "num_basis {num_basis} must be at least degree + 1 = {}",
                degree + 1
            )));
        }
        let interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat_n(domain.lower, degree + 1));
        let h = domain.width() / (interior + 1) as f64;
        knots.extend((1..=interior).map(|i| domain.lower + h * i as f64));
        knots.extend(std::iter::repeat_n(domain.upper, degree + 1));
        Ok(SplineBasis {
            domain,
            degree,
            num_basis,
            knots,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.num_basis]
    }

    fn find_span(&self, t: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis;
        if t >= self.knots[n] {
            return n - 1;
        }
        if t <= self.knots[p] {
            return p;
        }
        // knots[lo] <= t < knots[hi]
        let (mut lo, mut hi) = (p, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions (and derivatives up to `nd`) at `t`.
    ///
    /// Returns the index of the first nonzero function and `ders[k][j]`, the
    /// k-th derivative of basis function `first + j`.
    pub fn local_derivatives(&self, t: f64, nd: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let u = &self.knots;
        let span = self.find_span(t);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let top = nd.min(p);
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=top {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().take(top + 1).skip(1) {
            row.iter_mut().for_each(|v| *v *= factor);
            factor *= (p - k) as f64;
        }
        (span - p, ders)
    }

    /// Values of all basis functions at `t`.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        self.eval_derivative(t, 0)
    }

    /// `order`-th derivative of all basis functions at `t`.
    pub fn eval_derivative(&self, t: f64, order: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_basis);
        if order > self.degree {
            return out;
        }
        let (first, ders) = self.local_derivatives(t, order);
        for (j, v) in ders[order].iter().enumerate() {
            out[first + j] = *v;
        }
        out
    }

    /// Evaluates `theta(t)^T b`.
    pub fn eval_combination(&self, t: f64, coef: &[f64]) -> f64 {
        let (first, ders) = self.local_derivatives(t, 0);
        ders[0]
            .iter()
            .enumerate()
            .map(|(j, v)| v * coef[first + j])
            .sum()
    }

    /// Gauss-Legendre nodes and weights with `degree + 1` nodes per nonempty knot span.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        let mut rule = Vec::new();
        for w in self.knots.windows(2) {
            if w[1] > w[0] {
                push_mapped_rule(w[0], w[1], self.degree + 1, &mut rule);
            }
        }
        rule
    }

    /// Coefficients reproducing `t` exactly (Greville abscissae).
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        if p == 0 {
            return (0..self.num_basis)
                .map(|i| 0.5 * (self.knots[i] + self.knots[i + 1]))
                .collect();
        }
        (0..self.num_basis)
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    fn integrated_outer(&self, order: usize) -> DMatrix<f64> {
        let k = self.num_basis;
        let mut m = DMatrix::zeros(k, k);
        if order > self.degree {
            return m;
        }
        for (t, w) in self.quadrature() {
            let (first, ders) = self.local_derivatives(t, order);
            let vals = &ders[order];
            for (a, va) in vals.iter().enumerate() {
                for (b, vb) in vals.iter().enumerate().skip(a) {
                    m[(first + a, first + b)] += w * va * vb;
                }
            }
        }
        m.fill_lower_triangle_with_upper_triangle();
        m
    }

    /// `R[a][b] = ∫ θ_a θ_b dt`.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        self.integrated_outer(0)
    }

    /// `Q[a][b] = ∫ θ_a'' θ_b'' dt`; the zero matrix for degree below 2.
    pub fn curvature_matrix(&self) -> DMatrix<f64> {
        self.integrated_outer(2)
    }
}

/// Size and roughness penalty for one coefficient function, and its Cholesky root.
#[derive(Debug, Clone)]
pub struct PenaltyMatrices {
    pub gram: DMatrix<f64>,
    pub curvature: DMatrix<f64>,
    /// `gram + psi * curvature`
    pub combined: DMatrix<f64>,
    /// Lower triangular with `root * root^T == combined`.
    pub root: DMatrix<f64>,
    pub psi: f64,
    pub jittered: bool,
}

impl PenaltyMatrices {
    pub fn for_basis(basis: &SplineBasis, psi: f64) -> Result<Self> {
        penalty_root(basis.gram_matrix(), basis.curvature_matrix(), psi)
    }

    /// `b^T K b`, the squared penalty norm of a coefficient vector.
    pub fn quadratic_form(&self, b: &DVector<f64>) -> f64 {
        (b.transpose() * &self.combined * b)[(0, 0)]
    }

    /// `gamma = L^T b`
    pub fn to_gamma(&self, b: &DVector<f64>) -> DVector<f64> {
        self.root.tr_mul(b)
    }

    /// `b = L^{-T} gamma`
    pub fn to_coefficients(&self, gamma: &DVector<f64>) -> DVector<f64> {
        self.root
            .tr_solve_lower_triangular(gamma)
            .expect("penalty root has a positive diagonal")
    }
}

pub fn penalty_root(gram: DMatrix<f64>, curvature: DMatrix<f64>, psi: f64) -> Result<PenaltyMatrices> {
    if !(psi >= 0.0 && psi.is_finite()) {
        return Err(FlcmError::Config(format!("roughness weight psi = {psi} must be >= 0")));
    }
    if gram.shape() != curvature.shape() || !gram.is_square() {
        return Err(FlcmError::Config("gram and curvature matrices must be square and conformable".into()));
    }
    let combined = &gram + &curvature * psi;
    let (root, jittered) = cholesky_with_jitter(&combined)?;
    if jittered {
        log::warn!("penalty matrix needed jitter before Cholesky (psi = {psi})");
    }
    debug_assert!(max_abs(&(&root * root.transpose() - &combined)) <= 1e-8 * max_abs(&combined).max(1.0));
    Ok(PenaltyMatrices {
        gram,
        curvature,
        combined,
        root,
        psi,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0).unwrap()
    }

    /// Dense trapezoid rule over `n` points, applied to `f`.
    fn trapezoid<F: Fn(f64) -> f64>(d: Domain, n: usize, f: F) -> f64 {
        let h = d.width() / (n - 1) as f64;
        let mut s = 0.5 * (f(d.lower) + f(d.upper));
        for i in 1..n - 1 {
            s += f(d.lower + h * i as f64);
        }
        s * h
    }

    #[test]
    fn cubic_eight_has_equispaced_interior_knots() {
        let b = SplineBasis::new(unit(), 8, 3).unwrap();
        let knots = b.interior_knots();
        assert_eq!(knots.len(), 4);
        for (k, expect) in knots.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((k - expect).abs() < 1e-15);
        }
        assert_eq!(b.knots().len(), 12);
        assert!((b.eval(0.5).sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_too_few_functions_and_empty_domain() {
        let d = Domain::new(0.0, 100.0).unwrap();
        assert!(matches!(SplineBasis::new(d, 3, 3), Err(FlcmError::Config(_))));
        assert!(Domain::new(1.0, 1.0).is_err());
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let b = SplineBasis::new(Domain::new(0.0, 100.0).unwrap(), 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t: f64 = rng.random_range(0.0..=100.0);
            let v = b.eval(t);
            assert!((v.sum() - 1.0).abs() < 1e-10);
            assert!(v.iter().all(|x| *x >= -1e-15));
            assert!(v.iter().filter(|x| **x > 0.0).count() <= 4);
        }
        for (t, _) in b.quadrature() {
            assert!((b.eval(t).sum() - 1.0).abs() < 1e-10);
        }
        assert!((b.eval(100.0).sum() - 1.0).abs() < 1e-14);
        assert!((b.eval(100.0)[9] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn degree_zero_gram_is_scaled_identity() {
        let b = SplineBasis::new(unit(), 4, 0).unwrap();
        let r = b.gram_matrix();
        assert!(max_abs(&(r - DMatrix::identity(4, 4) * 0.25)) < 1e-15);
    }

    #[test]
    fn gram_matches_dense_trapezoid() {
        let b = SplineBasis::new(unit(), 8, 3).unwrap();
        let r = b.gram_matrix();
        assert_eq!(r, r.transpose());
        let n = 100_001;
        let grid = unit().linspace(n);
        let vals: Vec<DVector<f64>> = grid.iter().map(|t| b.eval(*t)).collect();
        let h = 1.0 / (n - 1) as f64;
        for a in 0..8 {
            for c in 0..8 {
                let mut s = 0.0;
                for (i, v) in vals.iter().enumerate() {
                    let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                    s += w * v[a] * v[c];
                }
                assert!((s * h - r[(a, c)]).abs() < 1e-8, "entry ({a},{c})");
            }
        }
        assert!(r.clone().cholesky().is_some());
    }

    #[test]
    fn curvature_zero_for_linear_and_affine_null_space() {
        let lin = SplineBasis::new(unit(), 6, 1).unwrap();
        assert_eq!(max_abs(&lin.curvature_matrix()), 0.0);

        let b = SplineBasis::new(unit(), 8, 3).unwrap();
        let q = b.curvature_matrix();
        let g = DVector::from_vec(b.greville());
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((b.eval(t).dot(&g) - t).abs() < 1e-13);
        }
        assert!((g.transpose() * &q * &g)[(0, 0)].abs() < 1e-10);
        let ones = DVector::from_element(8, 1.0);
        assert!((ones.transpose() * &q * &ones)[(0, 0)].abs() < 1e-10);
    }

    #[test]
    fn curvature_matches_finite_difference_quadrature() {
        let b = SplineBasis::new(unit(), 8, 3).unwrap();
        let q = b.curvature_matrix();
        let n = 100_001;
        let h = 1.0 / (n - 1) as f64;
        let grid = unit().linspace(n);
        // the end pieces are evaluated as their polynomial extensions just outside [0, 1]
        let mut pts = vec![-h];
        pts.extend(grid.iter().copied());
        pts.push(1.0 + h);
        let vals: Vec<DVector<f64>> = pts.iter().map(|t| b.eval(*t)).collect();
        let mut oracle = DMatrix::<f64>::zeros(8, 8);
        for i in 1..=n {
            let d2 = (&vals[i + 1] - &vals[i] * 2.0 + &vals[i - 1]) / (h * h);
            let w = if i == 1 || i == n { 0.5 * h } else { h };
            oracle += &d2 * d2.transpose() * w;
        }
        let scale = max_abs(&q);
        assert!(max_abs(&(oracle - &q)) / scale < 1e-6, "relative error too large");
    }

    #[test]
    fn analytic_derivatives_agree_with_differences() {
        let b = SplineBasis::new(Domain::new(0.0, 10.0).unwrap(), 9, 3).unwrap();
        let h = 1e-5;
        for t in [0.3, 2.2, 5.55, 9.1] {
            let d1 = b.eval_derivative(t, 1);
            let fd = (b.eval(t + h) - b.eval(t - h)) / (2.0 * h);
            assert!((d1 - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn penalty_root_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let p = penalty_root(id.clone(), DMatrix::zeros(2, 2), 5.0).unwrap();
        assert!(max_abs(&(p.root - &id)) < 1e-15);

        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        let p = penalty_root(id, q, 1.0).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        assert!(max_abs(&(p.root - expect)) < 1e-15);
        assert!(penalty_root(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), -1.0).is_err());
    }

    #[test]
    fn random_pd_pair_root_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = DMatrix::<f64>::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::<f64>::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let r = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
            let q = &c * c.transpose();
            let psi = rng.random_range(0.0..50.0);
            let p = penalty_root(r, q, psi).unwrap();
            let err = max_abs(&(&p.root * p.root.transpose() - &p.combined));
            assert!(err <= 1e-9 * max_abs(&p.combined));
            assert!(p.root.upper_triangle().iter().enumerate().all(|(i, v)| {
                let (r, c) = (i % 6, i / 6);
                r >= c || *v == 0.0
            }));
            assert!((0..6).all(|i| p.root[(i, i)] > 0.0));
        }
    }

    #[test]
    fn quadratic_form_matches_function_norms() {
        let d = Domain::new(0.0, 100.0).unwrap();
        let b = SplineBasis::new(d, 10, 3).unwrap();
        let psi = 3.0;
        let pen = PenaltyMatrices::for_basis(&b, psi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let coef: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bv = DVector::from_vec(coef.clone());
            let l2 = trapezoid(d, 200_001, |t| b.eval_combination(t, &coef).powi(2));
            let rough = trapezoid(d, 200_001, |t| b.eval_derivative(t, 2).dot(&bv).powi(2));
            let oracle = l2 + psi * rough;
            let form = pen.quadratic_form(&bv);
            assert!((form - oracle).abs() <= 1e-6 * oracle.max(1.0));
            let gamma = pen.to_gamma(&bv);
            assert!((gamma.norm_squared() - form).abs() <= 1e-12 * form);
            assert!((pen.to_coefficients(&gamma) - &bv).amax() < 1e-12);
        }
    }
}
