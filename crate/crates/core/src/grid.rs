//! Grid geometry, multi-block model states and ensembles.
//!
//! Arrays are indexed `[i, j]` with `i` along x and `j` along y. Cell
//! `(i, j)` has its center at `((i + 0.5) dx, (j + 0.5) dy)`.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rectangular cell decomposition of the domain; spacing in km.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<T> {
    nx: usize,
    ny: usize,
    dx: T,
    dy: T,
}

impl<T: Real> Grid<T> {
    pub fn new(nx: usize, ny: usize, dx: T, dy: T) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::DimensionTooSmall { nx, ny });
        }
        if !(dx > T::zero() && dy > T::zero()) || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::NonpositiveSpacing {
                dx: dx.as_f64(),
                dy: dy.as_f64(),
            });
        }
        Ok(Grid { nx, ny, dx, dy })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> T {
        self.dx
    }

    pub fn dy(&self) -> T {
        self.dy
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> T {
        self.dx * self.dy
    }

    pub fn center(&self, i: usize, j: usize) -> (T, T) {
        let half = T::of(0.5);
        ((T::of_usize(i) + half) * self.dx, (T::of_usize(j) + half) * self.dy)
    }

    /// Length of the domain diagonal in km.
    pub fn diameter(&self) -> T {
        let w = T::of_usize(self.nx) * self.dx;
        let h = T::of_usize(self.ny) * self.dy;
        (w * w + h * h).sqrt()
    }

    /// Smaller of the two cell edge lengths.
    pub fn min_spacing(&self) -> T {
        self.dx.min(self.dy)
    }

    pub fn zeros(&self) -> FieldBlock<T> {
        FieldBlock::zeros(self.nx, self.ny)
    }

    pub fn check(&self, field: &FieldBlock<T>) -> Result<()> {
        if field.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: field.shape(),
            });
        }
        Ok(())
    }
}

/// Convenience constructor mirroring [`Grid::new`].
pub fn make_grid<T: Real>(nx: usize, ny: usize, dx: T, dy: T) -> Result<Grid<T>> {
    Grid::new(nx, ny, dx, dy)
}

/// One scalar field on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBlock<T> {
    values: Array2<T>,
}

impl<T: Real> FieldBlock<T> {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        FieldBlock {
            values: Array2::zeros((nx, ny)),
        }
    }

    pub fn constant(nx: usize, ny: usize, value: T) -> Self {
        FieldBlock {
            values: Array2::from_elem((nx, ny), value),
        }
    }

    /// Wraps an array after checking that every entry is finite.
    pub fn from_array(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field block"));
        }
        Ok(FieldBlock { values })
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl FnMut((usize, usize)) -> T) -> Self {
        FieldBlock {
            values: Array2::from_shape_fn((nx, ny), f),
        }
    }

    pub(crate) fn from_array_unchecked(values: Array2<T>) -> Self {
        FieldBlock { values }
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.values.dim();
        (s.0, s.1)
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<T> {
        &mut self.values
    }

    pub fn into_array(self) -> Array2<T> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[[i, j]]
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        FieldBlock {
            values: Array2::from_shape_fn(self.values.dim(), |ix| f(self.values[ix])),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: T, other: &FieldBlock<T>) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        let mut out = self.values.clone();
        Zip::from(&mut out).and(&other.values).for_each(|o, &b| *o += a * b);
        FieldBlock { values: out }
    }

    pub fn add(&self, other: &FieldBlock<T>) -> Self {
        self.axpy(T::one(), other)
    }

    pub fn sub(&self, other: &FieldBlock<T>) -> Self {
        self.axpy(-T::one(), other)
    }

    /// Largest pointwise absolute difference.
    pub fn max_abs_diff(&self, other: &FieldBlock<T>) -> T {
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// `‖self − other‖₂ / ‖other‖₂`.
    pub fn rel_l2_diff(&self, other: &FieldBlock<T>) -> T {
        let num: T = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let den: T = other.values.iter().map(|b| *b * *b).sum();
        if den == T::zero() {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Root-mean-square difference over all cells.
    pub fn rmse(&self, other: &FieldBlock<T>) -> T {
        let n = T::of_usize(self.values.len());
        let ss: T = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        (ss / n).sqrt()
    }

    /// Sets the outermost ring of nodes to zero.
    pub fn zero_boundary(&mut self) {
        let (nx, ny) = self.shape();
        for i in 0..nx {
            self.values[[i, 0]] = T::zero();
            self.values[[i, ny - 1]] = T::zero();
        }
        for j in 0..ny {
            self.values[[0, j]] = T::zero();
            self.values[[nx - 1, j]] = T::zero();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Access to the blocks of a multi-block state vector, used by the filters.
pub trait StateBlocks<T>: Clone {
    fn blocks(&self) -> &[FieldBlock<T>];
    fn blocks_mut(&mut self) -> &mut [FieldBlock<T>];
}

/// Names of the three epidemic compartments, in block order.
pub const COMPARTMENTS: [&str; 3] = ["S", "I", "R"];

/// Block index of the infected compartment.
pub const INFECTED: usize = 1;

/// Per-cell S, I, R counts plus model time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    blocks: Vec<FieldBlock<T>>,
    pub time: T,
}

impl<T: Real> ModelState<T> {
    pub fn new(s: FieldBlock<T>, i: FieldBlock<T>, r: FieldBlock<T>, time: T) -> Result<Self> {
        if i.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                expected: s.shape(),
                got: i.shape(),
            });
        }
        if r.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                expected: s.shape(),
                got: r.shape(),
            });
        }
        Ok(ModelState {
            blocks: vec![s, i, r],
            time,
        })
    }

    pub fn zeros(grid: &Grid<T>) -> Self {
        ModelState {
            blocks: vec![grid.zeros(), grid.zeros(), grid.zeros()],
            time: T::zero(),
        }
    }

    pub fn s(&self) -> &FieldBlock<T> {
        &self.blocks[0]
    }

    pub fn i(&self) -> &FieldBlock<T> {
        &self.blocks[1]
    }

    pub fn r(&self) -> &FieldBlock<T> {
        &self.blocks[2]
    }

    pub fn s_mut(&mut self) -> &mut FieldBlock<T> {
        &mut self.blocks[0]
    }

    pub fn i_mut(&mut self) -> &mut FieldBlock<T> {
        &mut self.blocks[1]
    }

    pub fn r_mut(&mut self) -> &mut FieldBlock<T> {
        &mut self.blocks[2]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.blocks[0].shape()
    }

    /// Per-cell S + I + R.
    pub fn cell_totals(&self) -> FieldBlock<T> {
        self.s().add(self.i()).add(self.r())
    }

    pub fn map_blocks(&self, f: impl Fn(&FieldBlock<T>) -> FieldBlock<T>) -> Self {
        ModelState {
            blocks: self.blocks.iter().map(f).collect(),
            time: self.time,
        }
    }
}

impl<T: Real> StateBlocks<T> for ModelState<T> {
    fn blocks(&self) -> &[FieldBlock<T>] {
        &self.blocks
    }

    fn blocks_mut(&mut self) -> &mut [FieldBlock<T>] {
        &mut self.blocks
    }
}

/// Σ over cells of S + I + R.
pub fn total_population<T: Real>(state: &ModelState<T>) -> T {
    state.blocks.iter().map(FieldBlock::sum).sum()
}

/// Ensemble of `N` members plus an optional reference member `N + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<M> {
    pub members: Vec<M>,
    pub reference: Option<M>,
}

impl<M> Ensemble<M> {
    pub fn new(members: Vec<M>) -> Self {
        Ensemble {
            members,
            reference: None,
        }
    }

    pub fn with_reference(members: Vec<M>, reference: M) -> Self {
        Ensemble {
            members,
            reference: Some(reference),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Checks that all members share one block structure and returns
/// `(block count, shape)`.
pub fn block_layout<T: Real, M: StateBlocks<T>>(members: &[M]) -> Result<(usize, (usize, usize))> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    let nb = first.blocks().len();
    let shape = first.blocks().first().map(|b| b.shape()).ok_or(Error::BlockMismatch)?;
    for m in members {
        if m.blocks().len() != nb || m.blocks().iter().any(|b| b.shape() != shape) {
            return Err(Error::BlockMismatch);
        }
    }
    Ok((nb, shape))
}

/// Per-block arithmetic mean of the members; the reference is excluded.
/// The mean inherits every other attribute (such as model time) from the
/// first member.
pub fn ensemble_mean<T: Real, M: StateBlocks<T>>(ens: &Ensemble<M>) -> Result<M> {
    block_mean(&ens.members)
}

pub(crate) fn block_mean<T: Real, M: StateBlocks<T>>(members: &[M]) -> Result<M> {
    let (nb, _) = block_layout(members)?;
    let n = T::of_usize(members.len());
    let mut out = members[0].clone();
    for b in 0..nb {
        let acc = out.blocks_mut()[b].values_mut();
        for m in &members[1..] {
            *acc += m.blocks()[b].values();
        }
        acc.mapv_inplace(|v| v / n);
    }
    Ok(out)
}
