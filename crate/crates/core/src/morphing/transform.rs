//! Morphing representation `(T, r^(1), …, r^(M))` of a model state relative
//! to a reference member, and the initial ensemble built from it.

use crate::error::{Error, Result};
use crate::grid::{Ensemble, FieldBlock, Grid, ModelState, StateBlocks};
use crate::rng::RandomStream;
use crate::scalar::Real;
use crate::spectral::{random_smooth_field, random_smooth_mapping, SmoothnessSpec};

use super::warp::{invert_mapping, warp, InversionOptions, WarpMapping};

/// Extended state: blocks `[tx, ty, r^(1), …, r^(M)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphState<T> {
    blocks: Vec<FieldBlock<T>>,
}

impl<T: Real> MorphState<T> {
    pub fn new(warp: WarpMapping<T>, residuals: Vec<FieldBlock<T>>) -> Result<Self> {
        let shape = warp.shape();
        if let Some(r) = residuals.iter().find(|r| r.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: r.shape(),
            });
        }
        let mut blocks = vec![warp.tx, warp.ty];
        blocks.extend(residuals);
        Ok(MorphState { blocks })
    }

    pub fn warp(&self) -> WarpMapping<T> {
        WarpMapping {
            tx: self.blocks[0].clone(),
            ty: self.blocks[1].clone(),
        }
    }

    pub fn residuals(&self) -> &[FieldBlock<T>] {
        &self.blocks[2..]
    }

    pub fn residual(&self, j: usize) -> &FieldBlock<T> {
        &self.blocks[2 + j]
    }

    /// Block index of residual `j` within [`StateBlocks::blocks`].
    pub fn residual_block(j: usize) -> usize {
        2 + j
    }

    pub fn zero_warp_boundary(&mut self) {
        self.blocks[0].zero_boundary();
        self.blocks[1].zero_boundary();
    }
}

impl<T: Real> StateBlocks<T> for MorphState<T> {
    fn blocks(&self) -> &[FieldBlock<T>] {
        &self.blocks
    }

    fn blocks_mut(&mut self) -> &mut [FieldBlock<T>] {
        &mut self.blocks
    }
}

/// `r^(j) = u^(j) ∘ (I + T)⁻¹ − reference^(j)` for every block.
pub fn morph_transform<T: Real>(
    member: &ModelState<T>,
    reference: &ModelState<T>,
    mapping: &WarpMapping<T>,
    grid: &Grid<T>,
    opts: &InversionOptions<T>,
) -> Result<MorphState<T>> {
    for b in member.blocks().iter().chain(reference.blocks()) {
        grid.check(b)?;
    }
    let inverse = invert_mapping(mapping, grid, opts)?;
    let residuals = member
        .blocks()
        .iter()
        .zip(reference.blocks())
        .map(|(u, r)| warp(u, &inverse, grid).sub(r))
        .collect();
    MorphState::new(mapping.clone(), residuals)
}

/// `u^(j) = (reference^(j) + r^(j)) ∘ (I + T)`; model time is taken from
/// the reference.
pub fn morph_inverse<T: Real>(m: &MorphState<T>, reference: &ModelState<T>, grid: &Grid<T>) -> ModelState<T> {
    let mapping = m.warp();
    let mut out = reference.clone();
    for (j, blk) in out.blocks_mut().iter_mut().enumerate() {
        *blk = warp(&blk.add(m.residual(j)), &mapping, grid);
    }
    out
}

/// How the amplitude part of the initial perturbation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudePerturbation {
    /// Warp every block, then multiply it by `1 + s` with a smooth random
    /// `s`; zero cells stay zero.
    #[default]
    Multiplicative,
    /// `(u + r) ∘ (I + T)` with an independent smooth random `r` per block.
    Additive,
}

/// Smallest factor `1 + s` allowed by the multiplicative perturbation.
const MIN_FACTOR: f64 = 1e-3;

/// One randomly displaced and rescaled copy of `u`.
pub fn perturb_state<T: Real>(
    u: &ModelState<T>,
    grid: &Grid<T>,
    warp_spec: &SmoothnessSpec<T>,
    amp_spec: &SmoothnessSpec<T>,
    mode: AmplitudePerturbation,
    rng: &mut RandomStream,
) -> Result<ModelState<T>> {
    let mapping = random_smooth_mapping(grid, warp_spec, rng)?;
    let mut out = u.clone();
    match mode {
        AmplitudePerturbation::Multiplicative => {
            let s = random_smooth_field(grid, amp_spec, rng)?;
            let floor = T::of(MIN_FACTOR);
            let factor = s.map(|v| (T::one() + v).max(floor));
            for blk in out.blocks_mut() {
                let mut w = warp(blk, &mapping, grid);
                *w.values_mut() *= factor.values();
                *blk = w;
            }
        }
        AmplitudePerturbation::Additive => {
            for blk in out.blocks_mut() {
                let r = random_smooth_field(grid, amp_spec, rng)?;
                *blk = warp(&blk.add(&r), &mapping, grid);
            }
        }
    }
    Ok(out)
}

/// `N` perturbed copies of `u` with `u` itself as the reference member.
pub fn initial_ensemble<T: Real>(
    u: &ModelState<T>,
    n: usize,
    grid: &Grid<T>,
    warp_spec: &SmoothnessSpec<T>,
    amp_spec: &SmoothnessSpec<T>,
    rng: &mut RandomStream,
) -> Result<Ensemble<ModelState<T>>> {
    let bases = vec![u.clone(); n];
    initial_ensemble_from(
        &bases,
        u,
        grid,
        warp_spec,
        amp_spec,
        AmplitudePerturbation::Multiplicative,
        rng,
    )
}

/// Member `k` is a perturbation of `bases[k]`; `reference` is appended
/// unperturbed.
pub fn initial_ensemble_from<T: Real>(
    bases: &[ModelState<T>],
    reference: &ModelState<T>,
    grid: &Grid<T>,
    warp_spec: &SmoothnessSpec<T>,
    amp_spec: &SmoothnessSpec<T>,
    mode: AmplitudePerturbation,
    rng: &mut RandomStream,
) -> Result<Ensemble<ModelState<T>>> {
    if bases.len() < 2 {
        return Err(Error::EnsembleTooSmall(bases.len()));
    }
    let members = bases
        .iter()
        .map(|b| perturb_state(b, grid, warp_spec, amp_spec, mode, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble::with_reference(members, reference.clone()))
}
