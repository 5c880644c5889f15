use nalgebra::{DMatrix, DVector};

use crate::error::{FlcmError, Result};
use crate::linalg::{ridge_solve, sorted_eigen};

/// Relative eigenvalue cut-off below which block directions are dropped.
const RANK_TOL: f64 = 1e-10;
/// A block whose largest eigenvalue is this small relative to the largest
/// block in the design carries no signal and is removed.
const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub start: usize,
    pub size: usize,
    pub penalized: bool,
}

impl Group {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.size
    }
}

/// Stacked regression problem whose columns are partitioned into groups.
#[derive(Debug, Clone)]
pub struct GroupDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub groups: Vec<Group>,
}

impl GroupDesign {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, groups: Vec<Group>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(FlcmError::Config(format!(
                "design has {} rows but response has {}",
                x.nrows(),
                y.len()
            )));
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next {
                return Err(FlcmError::Config("groups must tile the columns contiguously".into()));
            }
            next += g.size;
        }
        if next != x.ncols() {
            return Err(FlcmError::Config(format!(
                "group sizes sum to {next} but the design has {} columns",
                x.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(FlcmError::Data("design or response contains non-finite values".into()));
        }
        Ok(GroupDesign { x, y, groups })
    }

    /// Builds groups from consecutive block sizes and penalty flags.
    pub fn from_blocks(x: DMatrix<f64>, y: DVector<f64>, blocks: &[(usize, bool)]) -> Result<Self> {
        let mut start = 0;
        let groups = blocks
            .iter()
            .map(|&(size, penalized)| {
                let g = Group { start, size, penalized };
                start += size;
                g
            })
            .collect();
        Self::new(x, y, groups)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn block(&self, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        let g = self.groups[j];
        self.x.columns(g.start, g.size)
    }

    /// Splits a stacked coefficient vector into per-group pieces.
    pub fn split(&self, gamma: &DVector<f64>) -> Vec<DVector<f64>> {
        self.groups
            .iter()
            .map(|g| gamma.rows(g.start, g.size).into_owned())
            .collect()
    }

    pub fn fitted(&self, gamma: &[DVector<f64>]) -> DVector<f64> {
        let mut f = DVector::zeros(self.nrows());
        for (j, g) in gamma.iter().enumerate() {
            if !g.is_empty() {
                f += self.block(j) * g;
            }
        }
        f
    }

    pub fn rss(&self, gamma: &[DVector<f64>]) -> f64 {
        (&self.y - self.fitted(gamma)).norm_squared()
    }

    fn unpenalized_columns(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| !g.penalized)
            .flat_map(|g| g.range())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BlockTransform {
    /// Original coordinates from orthonormal ones: `gamma = map * gamma'`.
    pub map: DMatrix<f64>,
    /// Left inverse of `map` on its range.
    pub inverse: DMatrix<f64>,
    pub degenerate: bool,
}

impl BlockTransform {
    pub fn rank(&self) -> usize {
        self.map.ncols()
    }
}

/// Everything needed to map orthonormal-coordinate solutions back.
#[derive(Debug, Clone)]
pub struct ScaleRecord {
    pub transforms: Vec<BlockTransform>,
    /// For penalized group `j`, coefficients of its projection onto the
    /// unpenalized columns (`|U| x k_j`).
    pub adjustments: Vec<Option<DMatrix<f64>>>,
    pub unpenalized_columns: Vec<usize>,
    pub original_groups: Vec<Group>,
}

impl ScaleRecord {
    pub fn degenerate_groups(&self) -> Vec<usize> {
        self.transforms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.degenerate)
            .map(|(j, _)| j)
            .collect()
    }

    /// Maps per-group orthonormal coefficients to original coordinates.
    pub fn to_original(&self, ortho: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = ortho
            .iter()
            .zip(&self.transforms)
            .map(|(g, t)| {
                if t.rank() == 0 {
                    DVector::zeros(t.map.nrows())
                } else {
                    &t.map * g
                }
            })
            .collect();
        if self.unpenalized_columns.is_empty() {
            return out;
        }
        let mut shift = DVector::<f64>::zeros(self.unpenalized_columns.len());
        for (j, adj) in self.adjustments.iter().enumerate() {
            if let Some(a) = adj {
                shift += a * &out[j];
            }
        }
        // unpenalized groups are laid out in column order inside `shift`
        let mut offset = 0;
        for (j, g) in self.original_groups.iter().enumerate() {
            if !g.penalized {
                let part = shift.rows(offset, g.size).into_owned();
                out[j] -= part;
                offset += g.size;
            }
        }
        out
    }

    /// Maps original coordinates to orthonormal ones (exact for vectors in the
    /// transforms' range).
    pub fn to_orthonormal(&self, original: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut adjusted: Vec<DVector<f64>> = original.to_vec();
        if !self.unpenalized_columns.is_empty() {
            let mut shift = DVector::<f64>::zeros(self.unpenalized_columns.len());
            for (j, adj) in self.adjustments.iter().enumerate() {
                if let Some(a) = adj {
                    shift += a * &original[j];
                }
            }
            let mut offset = 0;
            for (j, g) in self.original_groups.iter().enumerate() {
                if !g.penalized {
                    adjusted[j] += shift.rows(offset, g.size);
                    offset += g.size;
                }
            }
        }
        adjusted
            .iter()
            .zip(&self.transforms)
            .map(|(g, t)| if t.rank() == 0 { DVector::zeros(0) } else { &t.inverse * g })
            .collect()
    }
}

fn block_transform(gram: DMatrix<f64>, degenerate_floor: f64) -> BlockTransform {
    let k = gram.nrows();
    let (vals, vecs) = sorted_eigen(gram);
    let top = vals.first().copied().unwrap_or(0.0);
    if !(top > degenerate_floor) {
        return BlockTransform {
            map: DMatrix::zeros(k, 0),
            inverse: DMatrix::zeros(0, k),
            degenerate: true,
        };
    }
    let rank = vals.iter().take_while(|v| **v > RANK_TOL * top).count();
    let v = vecs.columns(0, rank);
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(rank, vals[..rank].iter().map(|l| l.sqrt().recip())));
    let sqrt = DMatrix::from_diagonal(&DVector::from_iterator(rank, vals[..rank].iter().map(|l| l.sqrt())));
    if rank == k {
        // symmetric root: an already orthonormal block maps to the identity
        BlockTransform {
            map: v * &inv_sqrt * v.transpose(),
            inverse: v * &sqrt * v.transpose(),
            degenerate: false,
        }
    } else {
        BlockTransform {
            map: v * inv_sqrt,
            inverse: sqrt * v.transpose(),
            degenerate: false,
        }
    }
}

/// Residualizes penalized blocks on the unpenalized columns, then rescales every
/// block so that `X_j^T X_j / N = I`.
///
/// Rank-deficient blocks keep only their nonzero singular directions; blocks
/// that are numerically zero come back with zero columns and are flagged as
/// degenerate, which removes them from the model.
pub fn orthonormalize_groups(design: &GroupDesign) -> Result<(GroupDesign, ScaleRecord)> {
    let n = design.nrows() as f64;
    if design.nrows() == 0 {
        return Err(FlcmError::Data("design has no rows".into()));
    }
    let ucols = design.unpenalized_columns();
    let xu = DMatrix::from_fn(design.nrows(), ucols.len(), |r, c| design.x[(r, ucols[c])]);
    let cuu = xu.tr_mul(&xu);

    let mut centered: Vec<DMatrix<f64>> = Vec::with_capacity(design.groups.len());
    let mut adjustments = Vec::with_capacity(design.groups.len());
    for (j, g) in design.groups.iter().enumerate() {
        let block = design.block(j).into_owned();
        if g.penalized && !ucols.is_empty() {
            let cross = xu.tr_mul(&block);
            let mut a = DMatrix::zeros(ucols.len(), g.size);
            for c in 0..g.size {
                let col = ridge_solve(&cuu, &cross.column(c).into_owned(), 1e-13)?;
                a.set_column(c, &col);
            }
            centered.push(block - &xu * &a);
            adjustments.push(Some(a));
        } else {
            centered.push(block);
            adjustments.push(None);
        }
    }

    let grams: Vec<DMatrix<f64>> = centered.iter().map(|b| b.tr_mul(b) / n).collect();
    let scale = grams
        .iter()
        .map(|g| g.diagonal().iter().cloned().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let floor = DEGENERATE_TOL * scale;

    let mut transforms = Vec::with_capacity(grams.len());
    let mut columns: Vec<DMatrix<f64>> = Vec::with_capacity(grams.len());
    let mut blocks = Vec::with_capacity(grams.len());
    for ((gram, block), g) in grams.into_iter().zip(&centered).zip(&design.groups) {
        let t = block_transform(gram, floor);
        if t.degenerate {
            log::warn!("group starting at column {} is numerically zero and is excluded", g.start);
        }
        let cols = if t.rank() == 0 {
            DMatrix::zeros(design.nrows(), 0)
        } else {
            block * &t.map
        };
        blocks.push((t.rank(), g.penalized));
        columns.push(cols);
        transforms.push(t);
    }
    let total: usize = columns.iter().map(|c| c.ncols()).sum();
    let mut x = DMatrix::zeros(design.nrows(), total);
    let mut at = 0;
    for c in &columns {
        x.columns_mut(at, c.ncols()).copy_from(c);
        at += c.ncols();
    }
    let out = GroupDesign::from_blocks(x, design.y.clone(), &blocks)?;
    Ok((
        out,
        ScaleRecord {
            transforms,
            adjustments,
            unpenalized_columns: ucols,
            original_groups: design.groups.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_design(seed: u64, n: usize, blocks: &[(usize, bool)]) -> GroupDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: usize = blocks.iter().map(|b| b.0).sum();
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        GroupDesign::from_blocks(x, y, blocks).unwrap()
    }

    #[test]
    fn orthonormal_block_gets_identity_transform() {
        let n = 4;
        // columns scaled so that X^T X / N = I
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let d = GroupDesign::from_blocks(x.clone(), DVector::zeros(n), &[(2, true)]).unwrap();
        let (o, rec) = orthonormalize_groups(&d).unwrap();
        assert!(max_abs(&(&rec.transforms[0].map - DMatrix::identity(2, 2))) < 1e-14);
        assert!(max_abs(&(o.x - x)) < 1e-14);
    }

    #[test]
    fn blocks_become_orthonormal_and_orthogonal_to_unpenalized() {
        let d = random_design(1, 40, &[(3, false), (2, true), (4, true)]);
        let (o, rec) = orthonormalize_groups(&d).unwrap();
        let n = d.nrows() as f64;
        for j in 1..3 {
            let b = o.block(j);
            let g = b.tr_mul(&b) / n;
            assert!(max_abs(&(g - DMatrix::identity(b.ncols(), b.ncols()))) < 1e-12);
            let cross = o.block(0).tr_mul(&b);
            assert!(cross.amax() < 1e-10);
        }
        // fitted values are preserved through the back-transform
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ortho: Vec<DVector<f64>> = o
            .groups
            .iter()
            .map(|g| DVector::from_fn(g.size, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let orig = rec.to_original(&ortho);
        assert!((o.fitted(&ortho) - d.fitted(&orig)).amax() < 1e-10);
        let back = rec.to_orthonormal(&orig);
        for (a, b) in back.iter().zip(&ortho) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_block_is_flagged_degenerate() {
        let mut d = random_design(2, 30, &[(2, true), (3, true)]);
        d.x.columns_mut(2, 3).fill(0.0);
        let (o, rec) = orthonormalize_groups(&d).unwrap();
        assert_eq!(rec.degenerate_groups(), vec![1]);
        assert_eq!(o.groups[1].size, 0);
        assert_eq!(o.x.ncols(), 2);
    }

    #[test]
    fn rank_deficient_block_keeps_nonzero_directions() {
        let mut d = random_design(3, 30, &[(3, true)]);
        let c0 = d.x.column(0).into_owned();
        let c1 = d.x.column(1).into_owned();
        d.x.set_column(2, &(c0 * 2.0 - c1));
        let (o, rec) = orthonormalize_groups(&d).unwrap();
        assert_eq!(o.groups[0].size, 2);
        assert!(!rec.transforms[0].degenerate);
    }

    #[test]
    fn bad_group_layout_is_rejected() {
        let x = DMatrix::zeros(3, 3);
        assert!(GroupDesign::from_blocks(x.clone(), DVector::zeros(3), &[(2, true)]).is_err());
        assert!(GroupDesign::from_blocks(x, DVector::zeros(2), &[(3, true)]).is_err());
    }
}
