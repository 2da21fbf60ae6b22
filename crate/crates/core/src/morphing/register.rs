//! Multilevel registration of a field against a reference.
//!
//! Finds `T` with `moving ≈ reference ∘ (I + T)` by minimizing
//!
//! ```text
//! J(T) = ‖moving − reference ∘ (I + T)‖² + ws ‖T‖² + wg ‖∇T‖²
//! ```
//!
//! on a factor-2 pyramid, coarsest level first. On every level the data
//! term is linearized around the current mapping (Gauss-Newton), the
//! resulting sparse SPD system is solved by preconditioned conjugate
//! gradients, and the step is accepted only if `J` decreases. Displacements
//! are measured in cells of the current level and the boundary ring is held
//! at zero. Both fields are divided by their common maximum first, so the
//! weights do not depend on the field amplitude.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{FieldBlock, Grid};
use crate::scalar::Real;

use super::warp::{sample_bilinear, WarpMapping};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationOptions<T> {
    /// Number of pyramid levels, finest included.
    pub levels: usize,
    /// Weight of `‖T‖²`.
    pub smoothness_weight: T,
    /// Weight of `‖∇T‖²`.
    pub gradient_weight: T,
    /// Gauss-Newton iterations per level.
    pub max_iters: usize,
    /// Stop a level once the accepted step is below this many cells.
    pub step_tolerance: T,
}

impl<T: Real> Default for RegistrationOptions<T> {
    fn default() -> Self {
        RegistrationOptions {
            levels: 4,
            smoothness_weight: T::of(1e-5),
            gradient_weight: T::of(0.01),
            max_iters: 30,
            step_tolerance: T::of(1e-3),
        }
    }
}

impl<T: Real> RegistrationOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidParameter {
                name: "levels",
                reason: "must be at least 1".into(),
            });
        }
        for (name, w) in [
            ("smoothness_weight", self.smoothness_weight),
            ("gradient_weight", self.gradient_weight),
            ("step_tolerance", self.step_tolerance),
        ] {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be finite and >= 0, got {w}"),
                });
            }
        }
        Ok(())
    }
}

/// Result of [`register`].
#[derive(Debug, Clone, PartialEq)]
pub struct Registration<T> {
    pub mapping: WarpMapping<T>,
    /// Final objective on the finest level (normalized fields, cell units).
    pub objective: T,
    /// Set when no descent was possible and the identity was kept.
    pub diverged: bool,
}

/// Average of 2×2 blocks; odd trailing rows/columns average what exists.
fn restrict<T: Real>(a: &Array2<T>) -> Array2<T> {
    let (nx, ny) = a.dim();
    let (cx, cy) = (nx.div_ceil(2), ny.div_ceil(2));
    Array2::from_shape_fn((cx, cy), |(i, j)| {
        let mut s = T::zero();
        let mut c = 0usize;
        for fi in 2 * i..(2 * i + 2).min(nx) {
            for fj in 2 * j..(2 * j + 2).min(ny) {
                s += a[[fi, fj]];
                c += 1;
            }
        }
        s / T::of_usize(c)
    })
}

/// Bilinear prolongation of a coarse displacement component onto a fine
/// grid of the given shape, rescaled to fine cells.
fn prolong<T: Real>(coarse: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let quarter = T::of(0.25);
    let half = T::of(0.5);
    let two = T::of(2.0);
    let mut out = Array2::from_shape_fn(shape, |(i, j)| {
        let x = T::of_usize(i) * half - quarter;
        let y = T::of_usize(j) * half - quarter;
        two * sample_bilinear(coarse, x, y)
    });
    zero_ring(&mut out);
    out
}

/// Smallest Jacobian determinant a registration step may leave behind.
const MIN_DET: f64 = 0.1;

/// Smallest forward-difference Jacobian determinant of `I + u`, cell units.
fn min_det_cells<T: Real>(ux: &Array2<T>, uy: &Array2<T>) -> T {
    let (nx, ny) = ux.dim();
    let mut best = T::infinity();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let a = T::one() + ux[[i + 1, j]] - ux[[i, j]];
            let b = ux[[i, j + 1]] - ux[[i, j]];
            let c = uy[[i + 1, j]] - uy[[i, j]];
            let d = T::one() + uy[[i, j + 1]] - uy[[i, j]];
            best = best.min(a * d - b * c);
        }
    }
    best
}

fn zero_ring<T: Real>(a: &mut Array2<T>) {
    let (nx, ny) = a.dim();
    for i in 0..nx {
        a[[i, 0]] = T::zero();
        a[[i, ny - 1]] = T::zero();
    }
    for j in 0..ny {
        a[[0, j]] = T::zero();
        a[[nx - 1, j]] = T::zero();
    }
}

/// Central differences, one-sided at the edges.
fn gradient<T: Real>(a: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let (nx, ny) = a.dim();
    let half = T::of(0.5);
    let gx = Array2::from_shape_fn((nx, ny), |(i, j)| {
        if i == 0 {
            a[[1, j]] - a[[0, j]]
        } else if i == nx - 1 {
            a[[i, j]] - a[[i - 1, j]]
        } else {
            (a[[i + 1, j]] - a[[i - 1, j]]) * half
        }
    });
    let gy = Array2::from_shape_fn((nx, ny), |(i, j)| {
        if j == 0 {
            a[[i, 1]] - a[[i, 0]]
        } else if j == ny - 1 {
            a[[i, j]] - a[[i, j - 1]]
        } else {
            (a[[i, j + 1]] - a[[i, j - 1]]) * half
        }
    });
    (gx, gy)
}

/// Registration problem on one pyramid level.
struct Level<T> {
    moving: Array2<T>,
    reference: Array2<T>,
    grad_x: Array2<T>,
    grad_y: Array2<T>,
    ws: T,
    wg: T,
}

impl<T: Real> Level<T> {
    fn new(moving: Array2<T>, reference: Array2<T>, ws: T, wg: T) -> Self {
        let (grad_x, grad_y) = gradient(&reference);
        Level {
            moving,
            reference,
            grad_x,
            grad_y,
            ws,
            wg,
        }
    }

    fn dim(&self) -> (usize, usize) {
        self.moving.dim()
    }

    fn residual(&self, ux: &Array2<T>, uy: &Array2<T>) -> Array2<T> {
        Array2::from_shape_fn(self.dim(), |(i, j)| {
            let x = T::of_usize(i) + ux[[i, j]];
            let y = T::of_usize(j) + uy[[i, j]];
            self.moving[[i, j]] - sample_bilinear(&self.reference, x, y)
        })
    }

    fn objective(&self, ux: &Array2<T>, uy: &Array2<T>) -> T {
        let (nx, ny) = self.dim();
        let data: T = self.residual(ux, uy).iter().map(|r| *r * *r).sum();
        let mut mag = T::zero();
        let mut grad = T::zero();
        for i in 0..nx {
            for j in 0..ny {
                mag = mag + ux[[i, j]] * ux[[i, j]] + uy[[i, j]] * uy[[i, j]];
                if i + 1 < nx {
                    let a = ux[[i + 1, j]] - ux[[i, j]];
                    let b = uy[[i + 1, j]] - uy[[i, j]];
                    grad = grad + a * a + b * b;
                }
                if j + 1 < ny {
                    let a = ux[[i, j + 1]] - ux[[i, j]];
                    let b = uy[[i, j + 1]] - uy[[i, j]];
                    grad = grad + a * a + b * b;
                }
            }
        }
        data + self.ws * mag + self.wg * grad
    }

    /// Graph Laplacian over the 4-neighbourhood, evaluated at interior nodes.
    fn laplacian(a: &Array2<T>) -> Array2<T> {
        let (nx, ny) = a.dim();
        let mut out = Array2::zeros((nx, ny));
        for i in 1..nx - 1 {
            for j in 1..ny - 1 {
                let c = a[[i, j]];
                out[[i, j]] = (c - a[[i - 1, j]]) + (c - a[[i + 1, j]]) + (c - a[[i, j - 1]]) + (c - a[[i, j + 1]]);
            }
        }
        out
    }

    /// One Gauss-Newton step: returns the proposed increment.
    fn gauss_newton_step(&self, ux: &Array2<T>, uy: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let (nx, ny) = self.dim();
        let res = self.residual(ux, uy);
        let gx = Array2::from_shape_fn((nx, ny), |(i, j)| {
            sample_bilinear(&self.grad_x, T::of_usize(i) + ux[[i, j]], T::of_usize(j) + uy[[i, j]])
        });
        let gy = Array2::from_shape_fn((nx, ny), |(i, j)| {
            sample_bilinear(&self.grad_y, T::of_usize(i) + ux[[i, j]], T::of_usize(j) + uy[[i, j]])
        });

        // right-hand side: Gᵀρ − ws u − wg L u
        let lux = Self::laplacian(ux);
        let luy = Self::laplacian(uy);
        let mut bx = Array2::zeros((nx, ny));
        let mut by = Array2::zeros((nx, ny));
        for i in 1..nx - 1 {
            for j in 1..ny - 1 {
                bx[[i, j]] = gx[[i, j]] * res[[i, j]] - self.ws * ux[[i, j]] - self.wg * lux[[i, j]];
                by[[i, j]] = gy[[i, j]] * res[[i, j]] - self.ws * uy[[i, j]] - self.wg * luy[[i, j]];
            }
        }

        let apply = |px: &Array2<T>, py: &Array2<T>| -> (Array2<T>, Array2<T>) {
            let lx = Self::laplacian(px);
            let ly = Self::laplacian(py);
            let mut ox = Array2::zeros((nx, ny));
            let mut oy = Array2::zeros((nx, ny));
            for i in 1..nx - 1 {
                for j in 1..ny - 1 {
                    let (a, b) = (gx[[i, j]], gy[[i, j]]);
                    let (p, q) = (px[[i, j]], py[[i, j]]);
                    ox[[i, j]] = a * (a * p + b * q) + self.ws * p + self.wg * lx[[i, j]];
                    oy[[i, j]] = b * (a * p + b * q) + self.ws * q + self.wg * ly[[i, j]];
                }
            }
            (ox, oy)
        };
        // Jacobi preconditioner from the diagonal of the operator
        let four = T::of(4.0);
        let tiny = T::of(1e-12);
        let dx = Array2::from_shape_fn((nx, ny), |(i, j)| {
            T::one() / (gx[[i, j]] * gx[[i, j]] + self.ws + four * self.wg + tiny)
        });
        let dy = Array2::from_shape_fn((nx, ny), |(i, j)| {
            T::one() / (gy[[i, j]] * gy[[i, j]] + self.ws + four * self.wg + tiny)
        });

        let dot = |a: &Array2<T>, b: &Array2<T>, c: &Array2<T>, d: &Array2<T>| -> T {
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).sum::<T>()
                + c.iter().zip(d.iter()).map(|(x, y)| *x * *y).sum::<T>()
        };

        let mut x_x = Array2::<T>::zeros((nx, ny));
        let mut x_y = Array2::<T>::zeros((nx, ny));
        let mut r_x = bx.clone();
        let mut r_y = by.clone();
        let mut z_x = &r_x * &dx;
        let mut z_y = &r_y * &dy;
        let mut p_x = z_x.clone();
        let mut p_y = z_y.clone();
        let mut rz = dot(&r_x, &z_x, &r_y, &z_y);
        let b_norm = dot(&bx, &bx, &by, &by).sqrt();
        if b_norm == T::zero() {
            return (x_x, x_y);
        }
        let tol = T::of(1e-6) * b_norm;
        for _ in 0..200 {
            let (ap_x, ap_y) = apply(&p_x, &p_y);
            let pap = dot(&p_x, &ap_x, &p_y, &ap_y);
            if !(pap > T::zero()) {
                break;
            }
            let alpha = rz / pap;
            x_x.scaled_add(alpha, &p_x);
            x_y.scaled_add(alpha, &p_y);
            r_x.scaled_add(-alpha, &ap_x);
            r_y.scaled_add(-alpha, &ap_y);
            if dot(&r_x, &r_x, &r_y, &r_y).sqrt() < tol {
                break;
            }
            z_x = &r_x * &dx;
            z_y = &r_y * &dy;
            let rz_new = dot(&r_x, &z_x, &r_y, &z_y);
            let beta = rz_new / rz;
            rz = rz_new;
            p_x = &z_x + &p_x.mapv(|v| v * beta);
            p_y = &z_y + &p_y.mapv(|v| v * beta);
        }
        (x_x, x_y)
    }

    /// Descends from `(ux, uy)` in place; returns the final objective.
    fn solve(&self, ux: &mut Array2<T>, uy: &mut Array2<T>, opts: &RegistrationOptions<T>) -> T {
        let mut j_cur = self.objective(ux, uy);
        for _ in 0..opts.max_iters {
            let (sx, sy) = self.gauss_newton_step(ux, uy);
            let step_max = sx.iter().chain(sy.iter()).fold(T::zero(), |m, v| m.max(v.abs()));
            if step_max == T::zero() {
                break;
            }
            let mut alpha = T::one();
            let mut accepted = None;
            for _ in 0..8 {
                let cx = &*ux + &sx.mapv(|v| v * alpha);
                let cy = &*uy + &sy.mapv(|v| v * alpha);
                let j_new = self.objective(&cx, &cy);
                if j_new < j_cur && min_det_cells(&cx, &cy) > T::of(MIN_DET) {
                    accepted = Some((cx, cy, j_new));
                    break;
                }
                alpha *= T::of(0.5);
            }
            match accepted {
                Some((cx, cy, j_new)) => {
                    *ux = cx;
                    *uy = cy;
                    j_cur = j_new;
                    if alpha * step_max < opts.step_tolerance {
                        break;
                    }
                }
                None => break,
            }
        }
        j_cur
    }
}

/// Finds `T` with `moving ≈ reference ∘ (I + T)`, `T ≈ 0`, `∇T ≈ 0`.
pub fn register<T: Real>(
    moving: &FieldBlock<T>,
    reference: &FieldBlock<T>,
    grid: &Grid<T>,
    opts: &RegistrationOptions<T>,
) -> Result<Registration<T>> {
    opts.validate()?;
    grid.check(moving)?;
    grid.check(reference)?;
    let (nx, ny) = grid.shape();
    let scale_m = moving.max_abs();
    let scale_r = reference.max_abs();
    if scale_m == T::zero() || scale_r == T::zero() {
        return Ok(Registration {
            mapping: WarpMapping::identity(nx, ny),
            objective: T::zero(),
            diverged: false,
        });
    }
    let scale = scale_m.max(scale_r);
    let m0 = moving.values().mapv(|v| v / scale);
    let r0 = reference.values().mapv(|v| v / scale);

    // pyramid, finest first; stop before a side drops below 4 nodes
    let mut pyramid = vec![(m0, r0)];
    while pyramid.len() < opts.levels {
        let (m, r) = pyramid.last().expect("pyramid is never empty");
        let (cx, cy) = (m.dim().0.div_ceil(2), m.dim().1.div_ceil(2));
        if cx < 4 || cy < 4 {
            break;
        }
        let next = (restrict(m), restrict(r));
        pyramid.push(next);
    }

    let coarsest = pyramid.last().expect("pyramid is never empty").0.dim();
    let mut ux = Array2::<T>::zeros(coarsest);
    let mut uy = Array2::<T>::zeros(coarsest);
    let mut objective = T::zero();
    let mut identity_objective = T::zero();
    for (depth, (m, r)) in pyramid.iter().enumerate().rev() {
        if ux.dim() != m.dim() {
            ux = prolong(&ux, m.dim());
            uy = prolong(&uy, m.dim());
            while min_det_cells(&ux, &uy) <= T::of(MIN_DET) {
                ux.mapv_inplace(|v| v * T::of(0.5));
                uy.mapv_inplace(|v| v * T::of(0.5));
            }
        }
        let level = Level::new(m.clone(), r.clone(), opts.smoothness_weight, opts.gradient_weight);
        objective = level.solve(&mut ux, &mut uy, opts);
        if depth == 0 {
            let zero = Array2::zeros(m.dim());
            identity_objective = level.objective(&zero, &zero);
        }
    }

    let finite = ux.iter().chain(uy.iter()).all(|v| v.is_finite());
    if !finite || !(objective <= identity_objective) {
        log::warn!("registration failed to descend; keeping the identity mapping");
        return Ok(Registration {
            mapping: WarpMapping::identity(nx, ny),
            objective: identity_objective,
            diverged: true,
        });
    }

    zero_ring(&mut ux);
    zero_ring(&mut uy);
    let (dx, dy) = (grid.dx(), grid.dy());
    let mapping = WarpMapping::new(
        FieldBlock::from_array_unchecked(ux.mapv(|v| v * dx)),
        FieldBlock::from_array_unchecked(uy.mapv(|v| v * dy)),
    )?;
    Ok(Registration {
        mapping,
        objective,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphing::warp::warp;

    fn bump(n: usize, cx: f64, cy: f64, sigma: f64) -> FieldBlock<f64> {
        FieldBlock::from_fn(n, n, |(i, j)| {
            let dx = i as f64 - cx;
            let dy = j as f64 - cy;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn identical_fields_give_identity() {
        for n in [16, 33, 64] {
            let g = Grid::new(n, n, 10.0, 10.0).unwrap();
            let f = bump(n, n as f64 / 2.0, n as f64 / 3.0, n as f64 / 8.0);
            let reg = register(&f, &f, &g, &RegistrationOptions::default()).unwrap();
            assert!(reg.mapping.max_cells(&g) < 0.05);
            assert!(!reg.diverged);
        }
    }

    #[test]
    fn zero_field_registers_to_identity() {
        let g = Grid::new(16, 16, 1.0, 1.0).unwrap();
        let f = bump(16, 8.0, 8.0, 2.0);
        let reg = register(&g.zeros(), &f, &g, &RegistrationOptions::default()).unwrap();
        assert_eq!(reg.mapping.max_displacement(), 0.0);
    }

    #[test]
    fn recovers_known_shift() {
        let n = 64;
        let g = Grid::new(n, n, 10.0, 10.0).unwrap();
        let reference = bump(n, 30.0, 32.0, 5.0);
        let moving = bump(n, 35.0, 32.0, 5.0);
        let reg = register(&moving, &reference, &g, &RegistrationOptions::default()).unwrap();
        // where the bump carries signal
        for i in 31..40 {
            for j in 28..37 {
                let tx = reg.mapping.tx.get(i, j) / g.dx();
                let ty = reg.mapping.ty.get(i, j) / g.dy();
                assert!((tx + 5.0).abs() < 1.0, "tx {tx} at ({i},{j})");
                assert!(ty.abs() < 1.0);
            }
        }
        let aligned = warp(&reference, &reg.mapping, &g);
        assert!(aligned.rel_l2_diff(&moving) < moving.rel_l2_diff(&reference));
    }

    #[test]
    fn mapping_never_folds() {
        let n = 30;
        let g = Grid::new(n, n, 10.0, 10.0).unwrap();
        let opts = RegistrationOptions {
            smoothness_weight: 0.0,
            gradient_weight: 1e-4,
            ..RegistrationOptions::default()
        };
        for (moving, reference) in [
            (bump(n, 15.0, 15.0, 1.5), bump(n, 15.0, 15.0, 8.0)),
            (bump(n, 8.0, 20.0, 2.0), bump(n, 20.0, 10.0, 6.0)),
            (
                bump(n, 15.0, 15.0, 8.0).sub(&bump(n, 15.0, 15.0, 4.0)),
                bump(n, 12.0, 18.0, 3.0),
            ),
        ] {
            let reg = register(&moving, &reference, &g, &opts).unwrap();
            let (det, _) = reg.mapping.min_jacobian(&g);
            assert!(det > 0.0, "det {det}");
        }
    }

    #[test]
    fn amplitude_change_is_left_to_the_residual() {
        let n = 48;
        let g = Grid::new(n, n, 10.0, 10.0).unwrap();
        let reference = bump(n, 24.0, 24.0, 5.0);
        let moving = reference.scale(1.5);
        let opts = RegistrationOptions {
            gradient_weight: 50.0,
            ..RegistrationOptions::default()
        };
        let reg = register(&moving, &reference, &g, &opts).unwrap();
        assert!(reg.mapping.max_cells(&g) < 0.5);
    }

    #[test]
    fn restrict_and_prolong_shapes() {
        let a = Array2::from_shape_fn((7, 10), |(i, j)| (i + j) as f64);
        let c = restrict(&a);
        assert_eq!(c.dim(), (4, 5));
        // odd trailing row: only (6, 8) and (6, 9) exist
        assert_eq!(c[[3, 4]], 14.5);
        assert_eq!(c[[0, 0]], 1.0);
        let p = prolong(&Array2::from_elem((4, 5), 1.0), (7, 10));
        assert_eq!(p.dim(), (7, 10));
        assert_eq!(p[[3, 4]], 2.0);
        assert_eq!(p[[0, 4]], 0.0);
    }

    #[test]
    fn invalid_options() {
        let opts = RegistrationOptions::<f64> {
            levels: 0,
            ..Default::default()
        };
        assert!(opts.validate().is_err());
        let opts = RegistrationOptions {
            gradient_weight: -1.0,
            ..Default::default()
        };
        assert!(opts.validate().is_err());
    }
}
