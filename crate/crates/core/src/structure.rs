//! Block-partition index algebra over a chain of `N` subsystems.
//!
//! Players are numbered `1..=N`. For a partition `n = n_1 + ... + n_N`,
//! the "up" range of player `i` covers blocks `1..=i` and the "down" range
//! covers blocks `i..=N`. Selector matrices are never materialized on the hot
//! path; `sub` and `embed` work directly on index ranges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matops::{max_abs, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("index {index} out of bounds (valid 1..={len})")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("range [{start}, {end}) out of bounds for dimension {dim}")]
    RangeOutOfBounds {
        start: usize,
        end: usize,
        dim: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

/// Ordered list of positive block sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = StructureError;
    fn try_from(sizes: Vec<usize>) -> Result<Self, Self::Error> {
        Partition::new(sizes)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.sizes
    }
}

impl Partition {
    pub fn new(sizes: Vec<usize>) -> Result<Self, StructureError> {
        if sizes.is_empty() {
            return Err(StructureError::InvalidPartition(
                "at least one block required".into(),
            ));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(StructureError::InvalidPartition(format!(
                "block {} has size 0",
                pos + 1
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// Partition with `players` blocks of equal size.
    pub fn uniform(block: usize, players: usize) -> Result<Self, StructureError> {
        Self::new(vec![block; players])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of blocks `N`.
    pub fn players(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Size of block `i` (1-based).
    pub fn size(&self, i: usize) -> usize {
        self.sizes[i - 1]
    }

    /// Range of block `i` alone.
    pub fn block(&self, i: usize) -> BlockRange {
        BlockRange::new(self.offsets[i - 1], self.offsets[i])
    }

    /// Blocks `1..=i`; `i = 0` gives the empty range.
    pub fn up(&self, i: usize) -> BlockRange {
        BlockRange::new(0, self.offsets[i])
    }

    /// Blocks `i..=N`; `i = N + 1` gives the empty range.
    pub fn down(&self, i: usize) -> BlockRange {
        BlockRange::new(self.offsets[i - 1], self.total())
    }
}

/// Half-open range `[start, end)` of scalar indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockRange {
    pub start: usize,
    pub end: usize,
}

impl BlockRange {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn full(dim: usize) -> Self {
        Self::new(0, dim)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The range shifted to be relative to `origin`.
    pub fn relative_to(&self, origin: &BlockRange) -> BlockRange {
        BlockRange::new(self.start - origin.start, self.end - origin.start)
    }
}

fn check_index(p: &Partition, i: usize) -> Result<(), StructureError> {
    if i == 0 || i > p.players() {
        return Err(StructureError::IndexOutOfBounds {
            index: i,
            len: p.players(),
        });
    }
    Ok(())
}

/// Range of the first `n_1 + ... + n_i` coordinates.
pub fn range_up(p: &Partition, i: usize) -> Result<BlockRange, StructureError> {
    check_index(p, i)?;
    Ok(p.up(i))
}

/// Range of the last `n_i + ... + n_N` coordinates.
pub fn range_down(p: &Partition, i: usize) -> Result<BlockRange, StructureError> {
    check_index(p, i)?;
    Ok(p.down(i))
}

fn check_range(r: &BlockRange, dim: usize) -> Result<(), StructureError> {
    if r.start > r.end || r.end > dim {
        return Err(StructureError::RangeOutOfBounds {
            start: r.start,
            end: r.end,
            dim,
        });
    }
    Ok(())
}

/// Submatrix on the given row and column ranges.
pub fn sub(m: &Matrix, rows: BlockRange, cols: BlockRange) -> Result<Matrix, StructureError> {
    check_range(&rows, m.nrows())?;
    check_range(&cols, m.ncols())?;
    Ok(m.view((rows.start, cols.start), (rows.len(), cols.len()))
        .into_owned())
}

/// Infallible submatrix for internal use where the ranges come from the
/// plant's own partitions.
pub(crate) fn blk(m: &Matrix, rows: BlockRange, cols: BlockRange) -> Matrix {
    m.view((rows.start, cols.start), (rows.len(), cols.len()))
        .into_owned()
}

/// Rows in `rows`, all columns.
pub(crate) fn rows_of(m: &Matrix, rows: BlockRange) -> Matrix {
    blk(m, rows, BlockRange::full(m.ncols()))
}

/// Columns in `cols`, all rows.
pub(crate) fn cols_of(m: &Matrix, cols: BlockRange) -> Matrix {
    blk(m, BlockRange::full(m.nrows()), cols)
}

/// Writes `value` into `target` at the given ranges.
pub fn embed(
    target: &mut Matrix,
    rows: BlockRange,
    cols: BlockRange,
    value: &Matrix,
) -> Result<(), StructureError> {
    check_range(&rows, target.nrows())?;
    check_range(&cols, target.ncols())?;
    if value.shape() != (rows.len(), cols.len()) {
        return Err(StructureError::DimensionMismatch(format!(
            "value is {}x{}, slot is {}x{}",
            value.nrows(),
            value.ncols(),
            rows.len(),
            cols.len()
        )));
    }
    target
        .view_mut((rows.start, cols.start), (rows.len(), cols.len()))
        .copy_from(value);
    Ok(())
}

pub(crate) fn put(target: &mut Matrix, rows: BlockRange, cols: BlockRange, value: &Matrix) {
    debug_assert_eq!(value.shape(), (rows.len(), cols.len()));
    target
        .view_mut((rows.start, cols.start), (rows.len(), cols.len()))
        .copy_from(value);
}

/// `[a, b]`.
pub(crate) fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut m = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// `[a; b]`.
pub(crate) fn vcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut m = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    m
}

/// `[[a, b], [c, d]]`.
pub(crate) fn block2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
    vcat(&hcat(a, b), &hcat(c, d))
}

/// Exchange matrix: the identity with its columns in reverse order.
pub fn reversal(dim: usize) -> Matrix {
    Matrix::from_fn(dim, dim, |i, j| if i + j + 1 == dim { 1.0 } else { 0.0 })
}

/// Materialized selector: the columns `range` of the identity `I_dim`.
///
/// `E^{up i}` is `selector_cols(p.total(), p.up(i))`; its transpose is `E_{up i}`.
pub fn selector_cols(dim: usize, range: BlockRange) -> Matrix {
    let mut e = Matrix::zeros(dim, range.len());
    for k in 0..range.len() {
        e[(range.start + k, k)] = 1.0;
    }
    e
}

/// Materialized selector: the rows `range` of `I_dim`.
pub fn selector_rows(dim: usize, range: BlockRange) -> Matrix {
    selector_cols(dim, range).transpose()
}

/// Largest entry (in absolute value) strictly above the block diagonal.
pub fn upper_block_defect(
    m: &Matrix,
    rowp: &Partition,
    colp: &Partition,
) -> Result<f64, StructureError> {
    if rowp.players() != colp.players() {
        return Err(StructureError::DimensionMismatch(format!(
            "row partition has {} blocks, column partition has {}",
            rowp.players(),
            colp.players()
        )));
    }
    if m.nrows() != rowp.total() || m.ncols() != colp.total() {
        return Err(StructureError::DimensionMismatch(format!(
            "matrix is {}x{}, partitions cover {}x{}",
            m.nrows(),
            m.ncols(),
            rowp.total(),
            colp.total()
        )));
    }
    let big_n = rowp.players();
    let mut defect = 0.0_f64;
    for i in 1..=big_n {
        for j in (i + 1)..=big_n {
            defect = defect.max(max_abs(&blk(m, rowp.block(i), colp.block(j))));
        }
    }
    Ok(defect)
}

/// Default lower-block-triangularity tolerance, relative to the matrix scale.
pub fn default_lbt_tol(m: &Matrix) -> f64 {
    1e-9 * (1.0 + max_abs(m))
}

/// True when every block `(i, j)` with `j > i` has max-abs entry `<= tol`.
pub fn is_lbt(
    m: &Matrix,
    rowp: &Partition,
    colp: &Partition,
    tol: f64,
) -> Result<bool, StructureError> {
    Ok(upper_block_defect(m, rowp, colp)? <= tol)
}

fn unipotent_pair(n: usize, blocks: usize) -> (Matrix, Matrix) {
    let dim = n * blocks;
    let mut zeta = Matrix::zeros(dim, dim);
    let mut mu = Matrix::zeros(dim, dim);
    for i in 0..blocks {
        for j in 0..=i {
            for k in 0..n {
                zeta[(i * n + k, j * n + k)] = 1.0;
            }
        }
        for k in 0..n {
            mu[(i * n + k, i * n + k)] = 1.0;
            if i > 0 {
                mu[(i * n + k, (i - 1) * n + k)] = -1.0;
            }
        }
    }
    (zeta, mu)
}

/// `nN`-dimensional incidence matrix `zeta` (identity blocks on and below the
/// block diagonal) and its inverse `mu` in closed form.
pub fn incidence_zeta_mu(n: usize, players: usize) -> (Matrix, Matrix) {
    unipotent_pair(n, players)
}

/// The same pair at dimension `n(N+1)`, used for the closed loop.
pub fn incidence_bar(n: usize, players: usize) -> (Matrix, Matrix) {
    unipotent_pair(n, players + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn p123() -> Partition {
        Partition::new(vec![1, 2, 3]).unwrap()
    }

    #[test]
    fn up_and_down_ranges() {
        let p = p123();
        assert_eq!(range_up(&p, 2).unwrap(), BlockRange::new(0, 3));
        assert_eq!(range_up(&p, 1).unwrap(), BlockRange::new(0, 1));
        assert_eq!(range_up(&p, 3).unwrap(), BlockRange::new(0, 6));
        assert_eq!(range_down(&p, 2).unwrap(), BlockRange::new(1, 6));
        assert_eq!(range_down(&p, 1).unwrap(), BlockRange::new(0, 6));
        assert_eq!(range_down(&p, 3).unwrap(), BlockRange::new(3, 6));
        assert!(matches!(
            range_up(&p, 0),
            Err(StructureError::IndexOutOfBounds { .. })
        ));
        assert!(range_down(&p, 4).is_err());
    }

    #[test]
    fn bad_partitions() {
        assert!(Partition::new(vec![]).is_err());
        assert!(Partition::new(vec![1, 0]).is_err());
    }

    #[test]
    fn submatrices() {
        let i3 = Matrix::identity(3, 3);
        let s = sub(&i3, BlockRange::new(0, 1), BlockRange::new(1, 3)).unwrap();
        assert_eq!(s, dmatrix![0.0, 0.0]);
        assert_eq!(
            sub(&i3, BlockRange::full(3), BlockRange::full(3)).unwrap(),
            i3
        );
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(
            sub(&m, BlockRange::new(1, 2), BlockRange::new(0, 1)).unwrap(),
            dmatrix![3.0]
        );
        assert!(sub(&m, BlockRange::new(1, 3), BlockRange::new(0, 1)).is_err());
    }

    #[test]
    fn lbt_checks() {
        let p = Partition::new(vec![1, 1]).unwrap();
        assert!(is_lbt(&dmatrix![1.0, 0.0; 5.0, 2.0], &p, &p, 0.0).unwrap());
        assert!(!is_lbt(&dmatrix![1.0, 1e-3; 5.0, 2.0], &p, &p, 1e-6).unwrap());
        let one = Partition::new(vec![2]).unwrap();
        assert!(is_lbt(&dmatrix![1.0, 7.0; 5.0, 2.0], &one, &one, 0.0).unwrap());
        let three = Partition::new(vec![1, 1, 1]).unwrap();
        assert!(is_lbt(&Matrix::identity(2, 2), &p, &three, 0.0).is_err());
    }

    #[test]
    fn incidence_matrices() {
        let (z, m) = incidence_zeta_mu(1, 2);
        assert_eq!(z, dmatrix![1.0, 0.0; 1.0, 1.0]);
        assert_eq!(m, dmatrix![1.0, 0.0; -1.0, 1.0]);
        let (z, m) = incidence_zeta_mu(3, 1);
        assert_eq!(z, Matrix::identity(3, 3));
        assert_eq!(m, Matrix::identity(3, 3));
        let (z, m) = incidence_zeta_mu(2, 3);
        assert_eq!(&z * &m, Matrix::identity(6, 6));
        let p = Partition::uniform(2, 3).unwrap();
        assert!(is_lbt(&z, &p, &p, 0.0).unwrap());
        assert!(is_lbt(&m, &p, &p, 0.0).unwrap());

        let (zb, _) = incidence_bar(1, 1);
        assert_eq!(zb, dmatrix![1.0, 0.0; 1.0, 1.0]);
        let (zb, _) = incidence_bar(1, 2);
        assert_eq!(zb, dmatrix![1.0, 0.0, 0.0; 1.0, 1.0, 0.0; 1.0, 1.0, 1.0]);
        let (zb, mb) = incidence_bar(2, 2);
        assert_eq!(&mb * &zb, Matrix::identity(6, 6));
    }

    #[test]
    fn selectors_agree_with_sub() {
        let p = p123();
        let m = Matrix::from_fn(6, 6, |i, j| (i * 6 + j) as f64);
        let lhs = selector_rows(6, p.up(2)) * &m * selector_cols(6, p.down(2));
        assert_eq!(lhs, sub(&m, p.up(2), p.down(2)).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn up_and_down_meet(sizes in proptest::collection::vec(1usize..5, 1..6)) {
                let p = Partition::new(sizes).unwrap();
                for i in 1..p.players() {
                    prop_assert_eq!(range_up(&p, i).unwrap().end, range_down(&p, i + 1).unwrap().start);
                }
            }

            #[test]
            fn embed_then_sub_is_identity(r0 in 0usize..3, c0 in 0usize..3, h in 1usize..3, w in 1usize..3) {
                let mut target = Matrix::zeros(6, 6);
                let value = Matrix::from_fn(h, w, |i, j| (1 + i * 7 + j) as f64);
                let rows = BlockRange::new(r0, r0 + h);
                let cols = BlockRange::new(c0, c0 + w);
                embed(&mut target, rows, cols, &value).unwrap();
                prop_assert_eq!(sub(&target, rows, cols).unwrap(), value);
            }
        }
    }
}
