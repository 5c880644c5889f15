//! Group penalties evaluated on a block's Euclidean norm, and their
//! closed-form block minimizers for orthonormal groups.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FlcmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PenaltyFamily {
    #[serde(rename = "flasso")]
    GroupLasso,
    #[serde(rename = "fscad")]
    GroupScad,
    #[serde(rename = "fmcp")]
    GroupMcp,
}

impl PenaltyFamily {
    pub const ALL: [PenaltyFamily; 3] = [
        PenaltyFamily::GroupLasso,
        PenaltyFamily::GroupScad,
        PenaltyFamily::GroupMcp,
    ];

    /// 4 for SCAD, 3 for MCP; unused for the lasso.
    pub fn default_phi(self) -> f64 {
        match self {
            PenaltyFamily::GroupLasso => f64::INFINITY,
            PenaltyFamily::GroupScad => 4.0,
            PenaltyFamily::GroupMcp => 3.0,
        }
    }

    /// Method label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            PenaltyFamily::GroupLasso => "FLASSO",
            PenaltyFamily::GroupScad => "FSCAD",
            PenaltyFamily::GroupMcp => "FMCP",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "flasso" | "lasso" | "grlasso" | "group_lasso" => Ok(PenaltyFamily::GroupLasso),
            "fscad" | "scad" | "grscad" | "group_scad" => Ok(PenaltyFamily::GroupScad),
            "fmcp" | "mcp" | "grmcp" | "group_mcp" => Ok(PenaltyFamily::GroupMcp),
            other => Err(FlcmError::Config(format!(
                "unknown method `{other}` (expected flasso, fscad or fmcp)"
            ))),
        }
    }
}

impl std::fmt::Display for PenaltyFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambda: f64,
    pub phi: f64,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambda: f64, phi: f64) -> Result<Self> {
        if !(lambda >= 0.0) || lambda.is_nan() {
            return Err(FlcmError::Config(format!("lambda = {lambda} must be >= 0")));
        }
        match family {
            PenaltyFamily::GroupScad if !(phi > 2.0) => {
                return Err(FlcmError::Config(format!("SCAD needs phi > 2, got {phi}")))
            }
            PenaltyFamily::GroupMcp if !(phi > 1.0) => {
                return Err(FlcmError::Config(format!("MCP needs phi > 1, got {phi}")))
            }
            _ => {}
        }
        Ok(PenaltySpec { family, lambda, phi })
    }

    pub fn with_default_phi(family: PenaltyFamily, lambda: f64) -> Result<Self> {
        Self::new(family, lambda, family.default_phi())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        PenaltySpec { lambda, ..self }
    }

    /// Penalty evaluated at a group norm.
    pub fn value(&self, norm: f64) -> f64 {
        let (l, phi) = (self.lambda, self.phi);
        match self.family {
            PenaltyFamily::GroupLasso => l * norm,
            PenaltyFamily::GroupScad => {
                if norm <= l {
                    l * norm
                } else if norm <= l * phi {
                    (l * phi * norm - 0.5 * (norm * norm + l * l)) / (phi - 1.0)
                } else {
                    0.5 * l * l * (phi + 1.0)
                }
            }
            PenaltyFamily::GroupMcp => {
                if norm <= l * phi {
                    l * norm - norm * norm / (2.0 * phi)
                } else {
                    0.5 * l * l * phi
                }
            }
        }
    }

    /// Derivative of the penalty with respect to the norm (right derivative at 0).
    pub fn derivative(&self, norm: f64) -> f64 {
        let (l, phi) = (self.lambda, self.phi);
        match self.family {
            PenaltyFamily::GroupLasso => l,
            PenaltyFamily::GroupScad => {
                if norm <= l {
                    l
                } else if norm <= l * phi {
                    (l * phi - norm) / (phi - 1.0)
                } else {
                    0.0
                }
            }
            PenaltyFamily::GroupMcp => {
                if norm <= l * phi {
                    l - norm / phi
                } else {
                    0.0
                }
            }
        }
    }

    /// Factor `s` with `argmin_g 0.5 ||z - g||^2 + P(||g||) = s z`, given `||z||`.
    pub fn shrink_factor(&self, znorm: f64) -> f64 {
        if znorm <= 0.0 {
            return 0.0;
        }
        let (l, phi) = (self.lambda, self.phi);
        let soft = |t: f64| (1.0 - t / znorm).max(0.0);
        match self.family {
            PenaltyFamily::GroupLasso => soft(l),
            PenaltyFamily::GroupScad => {
                if znorm <= 2.0 * l {
                    soft(l)
                } else if znorm <= l * phi {
                    soft(phi * l / (phi - 1.0)) / (1.0 - 1.0 / (phi - 1.0))
                } else {
                    1.0
                }
            }
            PenaltyFamily::GroupMcp => {
                if znorm <= l * phi {
                    soft(l) / (1.0 - 1.0 / phi)
                } else {
                    1.0
                }
            }
        }
    }
}

/// Closed-form minimizer of `0.5 ||z - g||^2 + P(||g||)` over `g`.
pub fn group_threshold(spec: &PenaltySpec, z: &DVector<f64>) -> DVector<f64> {
    z * spec.shrink_factor(z.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scad(l: f64) -> PenaltySpec {
        PenaltySpec::with_default_phi(PenaltyFamily::GroupScad, l).unwrap()
    }

    fn mcp(l: f64) -> PenaltySpec {
        PenaltySpec::with_default_phi(PenaltyFamily::GroupMcp, l).unwrap()
    }

    fn lasso(l: f64) -> PenaltySpec {
        PenaltySpec::with_default_phi(PenaltyFamily::GroupLasso, l).unwrap()
    }

    #[test]
    fn worked_values() {
        for s in [scad(1.0), mcp(1.0), lasso(1.0)] {
            assert_eq!(s.value(0.0), 0.0);
        }
        assert!((scad(1.0).value(10.0) - 2.5).abs() < 1e-15);
        assert!((mcp(1.0).value(0.5) - (0.5 - 0.25 / 6.0)).abs() < 1e-15);
        assert!((mcp(1.0).value(0.5) - 0.458_333_333_333_333_3).abs() < 1e-12);
        assert!((scad(1.0).value(2.0) - (4.0 * 2.0 - 0.5 * 5.0) / 3.0).abs() < 1e-15);
        assert!((scad(1.0).value(2.0) - 1.833_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn domain_checks() {
        assert!(PenaltySpec::new(PenaltyFamily::GroupScad, 1.0, 2.0).is_err());
        assert!(PenaltySpec::new(PenaltyFamily::GroupMcp, 1.0, 1.0).is_err());
        assert!(PenaltySpec::new(PenaltyFamily::GroupLasso, -1.0, 3.0).is_err());
        assert!(PenaltySpec::new(PenaltyFamily::GroupMcp, 1.0, 1.5).is_ok());
    }

    /// 1-D grid minimization of 0.5 (x - z)^2 + P(|x|), the oracle for thresholding.
    fn grid_argmin(spec: &PenaltySpec, z: f64) -> f64 {
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        let n = 200_000;
        for i in 0..=n {
            let x = -10.0 + 20.0 * i as f64 / n as f64;
            let v = 0.5 * (x - z) * (x - z) + spec.value(x.abs());
            if v < best {
                best = v;
                arg = x;
            }
        }
        arg
    }

    #[test]
    fn thresholds_match_grid_minimization() {
        let z5 = DVector::from_vec(vec![5.0]);
        assert_eq!(group_threshold(&mcp(1.0), &z5)[0], 5.0);
        assert!((grid_argmin(&mcp(1.0), 5.0) - 5.0).abs() < 1e-4);

        let z = DVector::from_vec(vec![3.0, 4.0]);
        let g = group_threshold(&lasso(1.0), &z);
        assert!((g[0] - 2.4).abs() < 1e-15 && (g[1] - 3.2).abs() < 1e-15);

        for spec in [lasso(1.0), scad(1.0), mcp(1.0)] {
            assert_eq!(group_threshold(&spec, &DVector::zeros(3)), DVector::zeros(3));
            for z in [0.3, 0.9, 1.2, 1.9, 2.5, 3.1, 3.9, 4.5, 7.0] {
                let g = group_threshold(&spec, &DVector::from_vec(vec![z]))[0];
                assert!((g - grid_argmin(&spec, z)).abs() < 2e-4, "{:?} z={z}", spec.family);
            }
        }
    }

    #[test]
    fn two_dimensional_lasso_threshold_matches_lattice() {
        let spec = lasso(1.0);
        let (mut best, mut arg) = (f64::INFINITY, (0.0, 0.0));
        let n = 800;
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (5.0 * i as f64 / n as f64, 5.0 * j as f64 / n as f64);
                let v = 0.5 * ((a - 3.0).powi(2) + (b - 4.0).powi(2)) + spec.value((a * a + b * b).sqrt());
                if v < best {
                    best = v;
                    arg = (a, b);
                }
            }
        }
        assert!((arg.0 - 2.4).abs() < 0.01 && (arg.1 - 3.2).abs() < 0.01);
    }

    #[test]
    fn continuity_at_branch_points() {
        for l in [0.3, 1.0, 2.5] {
            for spec in [scad(l), mcp(l), lasso(l)] {
                for b in [l, 2.0 * l, l * spec.phi] {
                    if !b.is_finite() {
                        continue;
                    }
                    let lo = spec.value(b - 1e-9);
                    let hi = spec.value(b + 1e-9);
                    assert!((lo - hi).abs() < 1e-8, "{:?} at {b}", spec.family);
                    let dlo = spec.derivative(b - 1e-9);
                    let dhi = spec.derivative(b + 1e-9);
                    if spec.family == PenaltyFamily::GroupScad {
                        assert!((dlo - dhi).abs() < 1e-8, "SCAD derivative jump at {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn large_phi_limits_to_lasso() {
        let big = 1e6;
        for fam in [PenaltyFamily::GroupScad, PenaltyFamily::GroupMcp] {
            let s = PenaltySpec::new(fam, 1.0, big).unwrap();
            for z in [0.5, 1.5, 3.0, 10.0] {
                assert!((s.shrink_factor(z) - lasso(1.0).shrink_factor(z)).abs() < 1e-4);
            }
        }
    }
}
