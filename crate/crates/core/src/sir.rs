//! Stochastic spatial S-I-R cell model.
//!
//! Within one step of length `dt` every cell draws
//!
//! * new infections `ΔS ~ Pois(S_i · Σ_j w(c_i, c_j) I_j · A · dt)` and
//! * removals `ΔR ~ Pois(q · I_i · A · dt)`,
//!
//! with all intensities evaluated at the start of the step. Draws are
//! clamped so that no compartment becomes negative, which keeps
//! `S + I + R` unchanged in every cell.
//!
//! The kernel sum is restricted to cells within `cutoff_radius`. Since a sum
//! of independent Poisson variables is Poisson with the summed intensity,
//! each target cell needs a single draw.

use crate::error::{Error, Result};
use crate::grid::{FieldBlock, Grid, ModelState};
use crate::rng::RandomStream;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpiParams<T> {
    /// Infectiousness, 1/(people · km² · time).
    pub alpha: T,
    /// Spread distance scale, km.
    pub lambda: T,
    /// Removal rate. Multiplied by the cell area like the infection term,
    /// so the per-capita removal rate is `q · A`.
    pub q: T,
    /// Time step in model time units.
    pub dt: T,
    /// Distance (km) beyond which the kernel is zero.
    pub cutoff_radius: T,
}

impl<T: Real> EpiParams<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return bad("alpha", format!("must be >= 0, got {}", self.alpha));
        }
        if !(self.lambda > T::zero()) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be > 0, got {}", self.lambda));
        }
        if !(self.q >= T::zero()) || !self.q.is_finite() {
            return bad("q", format!("must be >= 0, got {}", self.q));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return bad("dt", format!("must be > 0, got {}", self.dt));
        }
        if !(self.cutoff_radius >= self.lambda) || !self.cutoff_radius.is_finite() {
            return bad(
                "cutoff_radius",
                format!("must be finite and >= lambda, got {}", self.cutoff_radius),
            );
        }
        Ok(())
    }
}

/// Interaction kernel `α · exp(−‖p1 − p2‖ / λ)`, zero beyond the cutoff.
pub fn weight<T: Real>(p1: (T, T), p2: (T, T), params: &EpiParams<T>) -> T {
    let dx = p1.0 - p2.0;
    let dy = p1.1 - p2.1;
    let d = (dx * dx + dy * dy).sqrt();
    if d > params.cutoff_radius {
        T::zero()
    } else {
        params.alpha * (-d / params.lambda).exp()
    }
}

/// Precomputed kernel stencil for one grid and parameter set.
#[derive(Debug, Clone)]
pub struct SirModel<T> {
    grid: Grid<T>,
    params: EpiParams<T>,
    stencil: Vec<(isize, isize, T)>,
}

impl<T: Real> SirModel<T> {
    pub fn new(grid: Grid<T>, params: EpiParams<T>) -> Result<Self> {
        params.validate()?;
        let rx = (params.cutoff_radius / grid.dx())
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(grid.nx());
        let ry = (params.cutoff_radius / grid.dy())
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(grid.ny());
        let origin = (T::zero(), T::zero());
        let mut stencil = Vec::new();
        for di in -(rx as isize)..=(rx as isize) {
            for dj in -(ry as isize)..=(ry as isize) {
                let p = (T::of(di as f64) * grid.dx(), T::of(dj as f64) * grid.dy());
                let w = weight(origin, p, &params);
                if w > T::zero() {
                    stencil.push((di, dj, w));
                }
            }
        }
        Ok(SirModel { grid, params, stencil })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn params(&self) -> &EpiParams<T> {
        &self.params
    }

    /// `Σ_j w(c_i, c_j) I_j` for every cell `i`.
    fn exposure(&self, infected: &FieldBlock<T>) -> FieldBlock<T> {
        let (nx, ny) = self.grid.shape();
        let mut out = FieldBlock::zeros(nx, ny);
        let vals = out.values_mut();
        for ((si, sj), &inf) in infected.values().indexed_iter() {
            if inf == T::zero() {
                continue;
            }
            for &(di, dj, w) in &self.stencil {
                let ti = si as isize + di;
                let tj = sj as isize + dj;
                if ti < 0 || tj < 0 || ti >= nx as isize || tj >= ny as isize {
                    continue;
                }
                let cell = &mut vals[[ti as usize, tj as usize]];
                *cell += w * inf;
            }
        }
        out
    }

    /// Expected number of new infections in `cell` over one step.
    pub fn infection_intensity(&self, state: &ModelState<T>, cell: (usize, usize)) -> Result<T> {
        let (i, j) = cell;
        let (nx, ny) = self.grid.shape();
        if i >= nx || j >= ny {
            return Err(Error::IndexOutOfRange(i, j));
        }
        self.grid.check(state.s())?;
        let s = state.s().get(i, j);
        if s == T::zero() {
            return Ok(T::zero());
        }
        let mut acc = T::zero();
        for &(di, dj, w) in &self.stencil {
            let si = i as isize + di;
            let sj = j as isize + dj;
            if si < 0 || sj < 0 || si >= nx as isize || sj >= ny as isize {
                continue;
            }
            acc += w * state.i().get(si as usize, sj as usize);
        }
        Ok(s * acc * self.grid.cell_area() * self.params.dt)
    }

    pub fn step(&self, state: &ModelState<T>, rng: &mut RandomStream) -> Result<ModelState<T>> {
        check_state(&self.grid, state)?;
        let area_dt = self.grid.cell_area() * self.params.dt;
        let exposure = self.exposure(state.i());
        let (nx, ny) = self.grid.shape();

        let mut next = state.clone();
        let mut new_inf = FieldBlock::zeros(nx, ny);
        for (d, (&s, &e)) in new_inf
            .values_mut()
            .iter_mut()
            .zip(state.s().values().iter().zip(exposure.values().iter()))
        {
            let lam = s * e * area_dt;
            *d = T::of(rng.poisson(lam.as_f64())).min(s);
        }
        let removal = self.params.q * area_dt;
        for i in 0..nx {
            for j in 0..ny {
                let ds = new_inf.get(i, j);
                let inf = state.i().get(i, j);
                let lam = removal * inf;
                let dr = T::of(rng.poisson(lam.as_f64())).min(inf + ds);
                let s = state.s().get(i, j);
                let r = state.r().get(i, j);
                next.s_mut().values_mut()[[i, j]] = s - ds;
                next.i_mut().values_mut()[[i, j]] = (inf + ds - dr).max(T::zero());
                next.r_mut().values_mut()[[i, j]] = r + dr;
            }
        }
        next.time = state.time + self.params.dt;
        Ok(next)
    }

    pub fn advance(&self, state: &ModelState<T>, n_steps: usize, rng: &mut RandomStream) -> Result<ModelState<T>> {
        let mut cur = state.clone();
        for _ in 0..n_steps {
            cur = self.step(&cur, rng)?;
        }
        Ok(cur)
    }
}

fn check_state<T: Real>(grid: &Grid<T>, state: &ModelState<T>) -> Result<()> {
    for (b, name) in [(state.s(), "S"), (state.i(), "I"), (state.r(), "R")] {
        grid.check(b)?;
        for ((i, j), &v) in b.values().indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("model state"));
            }
            if v < T::zero() {
                return Err(Error::NegativeState { block: name, i, j });
            }
        }
    }
    Ok(())
}

pub fn infection_intensity<T: Real>(
    state: &ModelState<T>,
    grid: &Grid<T>,
    cell: (usize, usize),
    params: &EpiParams<T>,
) -> Result<T> {
    SirModel::new(*grid, *params)?.infection_intensity(state, cell)
}

pub fn step_stochastic<T: Real>(
    state: &ModelState<T>,
    grid: &Grid<T>,
    params: &EpiParams<T>,
    rng: &mut RandomStream,
) -> Result<ModelState<T>> {
    SirModel::new(*grid, *params)?.step(state, rng)
}

pub fn advance<T: Real>(
    state: &ModelState<T>,
    grid: &Grid<T>,
    n_steps: usize,
    params: &EpiParams<T>,
    rng: &mut RandomStream,
) -> Result<ModelState<T>> {
    SirModel::new(*grid, *params)?.advance(state, n_steps, rng)
}
