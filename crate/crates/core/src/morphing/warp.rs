//! Displacement mappings, composition by bilinear sampling, and inversion.
//!
//! A mapping `T` holds per-node displacements in km. Warping a field by `T`
//! evaluates `u ∘ (I + T)`, i.e. samples `u` at `x + T(x)`. Sample
//! positions outside the grid are clamped to its edge.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{FieldBlock, Grid};
use crate::scalar::Real;

/// Displacement field `T: Ω → ℝ²`, km per node.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMapping<T> {
    pub tx: FieldBlock<T>,
    pub ty: FieldBlock<T>,
}

impl<T: Real> WarpMapping<T> {
    pub fn new(tx: FieldBlock<T>, ty: FieldBlock<T>) -> Result<Self> {
        if tx.shape() != ty.shape() {
            return Err(Error::ShapeMismatch {
                expected: tx.shape(),
                got: ty.shape(),
            });
        }
        if !tx.is_finite() || !ty.is_finite() {
            return Err(Error::NonFinite("warp mapping"));
        }
        Ok(WarpMapping { tx, ty })
    }

    pub fn identity(nx: usize, ny: usize) -> Self {
        WarpMapping {
            tx: FieldBlock::zeros(nx, ny),
            ty: FieldBlock::zeros(nx, ny),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tx.shape()
    }

    /// Largest displacement length in km.
    pub fn max_displacement(&self) -> T {
        self.tx
            .values()
            .iter()
            .zip(self.ty.values().iter())
            .fold(T::zero(), |m, (a, b)| m.max((*a * *a + *b * *b).sqrt()))
    }

    /// Largest displacement component measured in cells.
    pub fn max_cells(&self, grid: &Grid<T>) -> T {
        (self.tx.max_abs() / grid.dx()).max(self.ty.max_abs() / grid.dy())
    }

    pub fn zero_boundary(&mut self) {
        self.tx.zero_boundary();
        self.ty.zero_boundary();
    }

    /// Smallest discrete Jacobian determinant of `I + T` over all cells,
    /// with its cell.
    pub fn min_jacobian(&self, grid: &Grid<T>) -> (T, (usize, usize)) {
        let (nx, ny) = self.shape();
        let tx = self.tx.values();
        let ty = self.ty.values();
        let mut best = (T::infinity(), (0, 0));
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                let dxx = (tx[[i + 1, j]] - tx[[i, j]]) / grid.dx();
                let dxy = (tx[[i, j + 1]] - tx[[i, j]]) / grid.dy();
                let dyx = (ty[[i + 1, j]] - ty[[i, j]]) / grid.dx();
                let dyy = (ty[[i, j + 1]] - ty[[i, j]]) / grid.dy();
                let det = (T::one() + dxx) * (T::one() + dyy) - dxy * dyx;
                if det < best.0 {
                    best = (det, (i, j));
                }
            }
        }
        best
    }

    /// Fails unless `I + T` preserves orientation on every cell.
    pub fn check_orientation(&self, grid: &Grid<T>) -> Result<()> {
        let (det, (i, j)) = self.min_jacobian(grid);
        if det > T::zero() {
            Ok(())
        } else {
            Err(Error::NotInvertible {
                det: det.as_f64(),
                i,
                j,
            })
        }
    }
}

/// Bilinear interpolation of `a` at fractional index `(x, y)`, clamped to
/// the array.
#[inline]
pub fn sample_bilinear<T: Real>(a: &Array2<T>, x: T, y: T) -> T {
    let (nx, ny) = a.dim();
    let xmax = T::of_usize(nx - 1);
    let ymax = T::of_usize(ny - 1);
    let x = x.max(T::zero()).min(xmax);
    let y = y.max(T::zero()).min(ymax);
    let i0 = x.floor().to_usize().unwrap_or(0).min(nx - 1);
    let j0 = y.floor().to_usize().unwrap_or(0).min(ny - 1);
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let fx = x - T::of_usize(i0);
    let fy = y - T::of_usize(j0);
    let a00 = a[[i0, j0]];
    let a10 = a[[i1, j0]];
    let a01 = a[[i0, j1]];
    let a11 = a[[i1, j1]];
    let one = T::one();
    (one - fx) * ((one - fy) * a00 + fy * a01) + fx * ((one - fy) * a10 + fy * a11)
}

/// `u ∘ (I + T)` by bilinear interpolation.
pub fn warp<T: Real>(field: &FieldBlock<T>, mapping: &WarpMapping<T>, grid: &Grid<T>) -> FieldBlock<T> {
    let (nx, ny) = field.shape();
    let src = field.values();
    let tx = mapping.tx.values();
    let ty = mapping.ty.values();
    let (dx, dy) = (grid.dx(), grid.dy());
    FieldBlock::from_fn(nx, ny, |(i, j)| {
        let x = T::of_usize(i) + tx[[i, j]] / dx;
        let y = T::of_usize(j) + ty[[i, j]] / dy;
        sample_bilinear(src, x, y)
    })
}

/// Composition `(I + outer) ∘ (I + inner) − I = inner + outer ∘ (I + inner)`.
pub fn compose<T: Real>(outer: &WarpMapping<T>, inner: &WarpMapping<T>, grid: &Grid<T>) -> WarpMapping<T> {
    WarpMapping {
        tx: inner.tx.add(&warp(&outer.tx, inner, grid)),
        ty: inner.ty.add(&warp(&outer.ty, inner, grid)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionOptions<T> {
    /// Target for `‖(I+T)∘(I+S) − I‖_∞`, in cells.
    pub tolerance_cells: T,
    pub max_iters: usize,
}

impl<T: Real> Default for InversionOptions<T> {
    fn default() -> Self {
        InversionOptions {
            tolerance_cells: T::of(0.1),
            max_iters: 50,
        }
    }
}

/// `‖(I+T)∘(I+S) − I‖_∞` in cells.
pub fn inversion_defect<T: Real>(mapping: &WarpMapping<T>, inverse: &WarpMapping<T>, grid: &Grid<T>) -> T {
    compose(mapping, inverse, grid).max_cells(grid)
}

/// Approximate inverse `S` with `(I + T) ∘ (I + S) ≈ I`, by the fixed-point
/// iteration `S ← −T ∘ (I + S)` from `S = 0`. The fixed point only contracts
/// while `|∇T| < 1`; when it stalls, the best iterate is refined by damped
/// Newton steps on `p + T(p) = x` node by node.
pub fn invert_mapping<T: Real>(
    mapping: &WarpMapping<T>,
    grid: &Grid<T>,
    opts: &InversionOptions<T>,
) -> Result<WarpMapping<T>> {
    mapping.check_orientation(grid)?;
    let (nx, ny) = mapping.shape();
    let mut inv = WarpMapping::identity(nx, ny);
    let mut defect = mapping.max_cells(grid);
    let mut best = (defect, inv.clone());
    for _ in 0..opts.max_iters {
        if defect < opts.tolerance_cells {
            break;
        }
        let mut next = WarpMapping {
            tx: warp(&mapping.tx, &inv, grid).scale(-T::one()),
            ty: warp(&mapping.ty, &inv, grid).scale(-T::one()),
        };
        next.zero_boundary();
        inv = next;
        defect = inversion_defect(mapping, &inv, grid);
        if defect < best.0 {
            best = (defect, inv.clone());
        }
    }
    if best.0 >= opts.tolerance_cells {
        let refined = newton_refine(mapping, &best.1, grid, opts.max_iters);
        let d = inversion_defect(mapping, &refined, grid);
        if d < best.0 {
            best = (d, refined);
        }
    }
    if best.0 < opts.tolerance_cells {
        Ok(best.1)
    } else {
        Err(Error::InversionNotConverged {
            defect: best.0.as_f64(),
            tolerance: opts.tolerance_cells.as_f64(),
        })
    }
}

/// Solves `p + T(p) = x` at every interior node, starting from
/// `p = x + S(x)`. Works in cell units.
fn newton_refine<T: Real>(
    mapping: &WarpMapping<T>,
    start: &WarpMapping<T>,
    grid: &Grid<T>,
    iters: usize,
) -> WarpMapping<T> {
    let (nx, ny) = mapping.shape();
    let (dx, dy) = (grid.dx(), grid.dy());
    let tx = mapping.tx.values().mapv(|v| v / dx);
    let ty = mapping.ty.values().mapv(|v| v / dy);
    let h = T::of(0.25);
    let two_h = h + h;
    let half = T::of(0.5);
    let residual = |px: T, py: T, x: T, y: T| {
        (
            px + sample_bilinear(&tx, px, py) - x,
            py + sample_bilinear(&ty, px, py) - y,
        )
    };
    let mut sx = Array2::zeros((nx, ny));
    let mut sy = Array2::zeros((nx, ny));
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let (x, y) = (T::of_usize(i), T::of_usize(j));
            let mut px = x + start.tx.get(i, j) / dx;
            let mut py = y + start.ty.get(i, j) / dy;
            let (mut fx, mut fy) = residual(px, py, x, y);
            for _ in 0..iters {
                let norm = fx.abs().max(fy.abs());
                if norm < T::of(1e-6) {
                    break;
                }
                let a = T::one() + (sample_bilinear(&tx, px + h, py) - sample_bilinear(&tx, px - h, py)) / two_h;
                let b = (sample_bilinear(&tx, px, py + h) - sample_bilinear(&tx, px, py - h)) / two_h;
                let c = (sample_bilinear(&ty, px + h, py) - sample_bilinear(&ty, px - h, py)) / two_h;
                let d = T::one() + (sample_bilinear(&ty, px, py + h) - sample_bilinear(&ty, px, py - h)) / two_h;
                let det = a * d - b * c;
                if !(det > T::zero()) {
                    break;
                }
                let step_x = (d * fx - b * fy) / det;
                let step_y = (a * fy - c * fx) / det;
                let mut t = T::one();
                let mut moved = false;
                for _ in 0..10 {
                    let (qx, qy) = (px - t * step_x, py - t * step_y);
                    let (gx, gy) = residual(qx, qy, x, y);
                    if gx.abs().max(gy.abs()) < norm {
                        px = qx;
                        py = qy;
                        fx = gx;
                        fy = gy;
                        moved = true;
                        break;
                    }
                    t *= half;
                }
                if !moved {
                    break;
                }
            }
            sx[[i, j]] = (px - x) * dx;
            sy[[i, j]] = (py - y) * dy;
        }
    }
    WarpMapping {
        tx: FieldBlock::from_array_unchecked(sx),
        ty: FieldBlock::from_array_unchecked(sy),
    }
}
