//! FFT EnKF: the forecast covariance is approximated by a diagonal matrix
//! in the sine-transform domain, so the analysis becomes an independent
//! scalar update per mode.
//!
//! For observed block `o` with variance `r_o` and any block `j`, mode `i`
//! of member `k` is updated by
//!
//! ```text
//! û_k^(j) += ĉ^(jo)_i / (ĉ^(oo)_i + r_o) · (d̂_o + ê_ko − û_k^(o))_i
//! ```
//!
//! where `ĉ` are per-mode sample (cross-)covariances with divisor `N − 1`.
//! When several blocks are observed, covariances between two distinct
//! observed blocks are neglected.

use ndarray::{Array2, Zip};

use crate::enkf::{check_inputs, perturb_all, ObsSpec};
use crate::error::{Error, Result};
use crate::grid::{Ensemble, FieldBlock, StateBlocks};
use crate::rng::RandomStream;
use crate::scalar::Real;
use crate::spectral::{dst1_matrix, dst2_forward, dst2_inverse, SpectralField};

/// Per-mode variance or cross-covariance, shaped like a [`SpectralField`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDiag<T> {
    c_hat: Array2<T>,
}

impl<T: Real> SpectralDiag<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.c_hat
    }

    pub fn shape(&self) -> (usize, usize) {
        self.c_hat.dim()
    }

    /// Value at the 1-based mode `(p, q)`.
    pub fn mode(&self, p: usize, q: usize) -> T {
        self.c_hat[[p - 1, q - 1]]
    }
}

/// Per-mode sample variance of the members' coefficients.
pub fn spectral_variance<T: Real>(member_coeffs: &[SpectralField<T>]) -> Result<SpectralDiag<T>> {
    let mut diag = spectral_cross_covariance(member_coeffs, member_coeffs)?;
    // nonnegative by construction; guards rounding
    diag.c_hat.mapv_inplace(|v| v.max(T::zero()));
    Ok(diag)
}

/// Per-mode sample cross-covariance between two coefficient sequences.
pub fn spectral_cross_covariance<T: Real>(
    coeffs_j: &[SpectralField<T>],
    coeffs_1: &[SpectralField<T>],
) -> Result<SpectralDiag<T>> {
    let n = coeffs_j.len();
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    if coeffs_1.len() != n {
        return Err(Error::BlockMismatch);
    }
    let shape = coeffs_j[0].shape();
    for c in coeffs_j.iter().chain(coeffs_1) {
        if c.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: c.shape(),
            });
        }
    }
    let inv_n = T::one() / T::of_usize(n);
    let mean = |cs: &[SpectralField<T>]| {
        let mut m = Array2::<T>::zeros(shape);
        for c in cs {
            m += c.coeffs();
        }
        m.mapv(|v| v * inv_n)
    };
    let mj = mean(coeffs_j);
    let m1 = mean(coeffs_1);
    let mut acc = Array2::<T>::zeros(shape);
    for (a, b) in coeffs_j.iter().zip(coeffs_1) {
        Zip::from(&mut acc)
            .and(a.coeffs())
            .and(&mj)
            .and(b.coeffs())
            .and(&m1)
            .for_each(|s, &x, &mx, &y, &my| *s += (x - mx) * (y - my));
    }
    let denom = T::of_usize(n - 1);
    Ok(SpectralDiag {
        c_hat: acc.mapv(|v| v / denom),
    })
}

/// Per-mode gains `ĉ^(jo) / (ĉ^(oo) + r_o)`, indexed `[block][obs]`;
/// `None` marks a neglected or absent coupling.
fn spectral_gains<T: Real>(
    coeffs: &[Vec<SpectralField<T>>],
    n_blocks: usize,
    obs: &[ObsSpec<T>],
) -> Result<Vec<Vec<Option<Array2<T>>>>> {
    let per_block = |b: usize| -> Vec<SpectralField<T>> { coeffs.iter().map(|m| m[b].clone()).collect() };
    let observed: Vec<usize> = obs.iter().map(|o| o.observed_block).collect();
    let mut gains = vec![vec![None; obs.len()]; n_blocks];
    for (p, o) in obs.iter().enumerate() {
        let ob = o.observed_block;
        let obs_coeffs = per_block(ob);
        let c_oo = spectral_variance(&obs_coeffs)?;
        let denom = c_oo.c_hat.mapv(|c| c + o.r);
        for (j, row) in gains.iter_mut().enumerate() {
            if j != ob && observed.contains(&j) {
                continue;
            }
            let c_jo = if j == ob {
                c_oo.clone()
            } else {
                spectral_cross_covariance(&per_block(j), &obs_coeffs)?
            };
            row[p] = Some(&c_jo.c_hat / &denom);
        }
    }
    Ok(gains)
}

/// FFT EnKF update with the given perturbed data (physical space).
pub fn fft_analysis_with<T: Real, M: StateBlocks<T>>(
    members: &[M],
    obs: &[ObsSpec<T>],
    perturbed: &[Vec<FieldBlock<T>>],
) -> Result<Vec<M>> {
    let (nb, _) = check_inputs(members, obs, perturbed)?;
    let coeffs: Vec<Vec<SpectralField<T>>> = members
        .iter()
        .map(|m| m.blocks().iter().map(dst2_forward).collect())
        .collect();
    let gains = spectral_gains(&coeffs, nb, obs)?;

    members
        .iter()
        .zip(coeffs)
        .zip(perturbed)
        .map(|((member, mut mc), pert)| {
            let innov: Vec<SpectralField<T>> = obs
                .iter()
                .zip(pert)
                .map(|(o, d)| dst2_forward(&d.sub(&member.blocks()[o.observed_block])))
                .collect();
            let mut out = member.clone();
            for (j, row) in gains.iter().enumerate() {
                let mut touched = false;
                for (g, iv) in row.iter().zip(&innov) {
                    if let Some(g) = g {
                        Zip::from(mc[j].coeffs_mut())
                            .and(g)
                            .and(iv.coeffs())
                            .for_each(|u, &gi, &di| *u += gi * di);
                        touched = true;
                    }
                }
                if touched {
                    out.blocks_mut()[j] = dst2_inverse(&mc[j]);
                }
            }
            Ok(out)
        })
        .collect()
}

/// FFT EnKF analysis of one observed block with freshly drawn perturbations.
pub fn fft_enkf_analysis<T: Real, M: StateBlocks<T>>(
    ens: &Ensemble<M>,
    obs: &ObsSpec<T>,
    rng: &mut RandomStream,
) -> Result<Ensemble<M>> {
    fft_enkf_analysis_multi(ens, std::slice::from_ref(obs), rng)
}

pub fn fft_enkf_analysis_multi<T: Real, M: StateBlocks<T>>(
    ens: &Ensemble<M>,
    obs: &[ObsSpec<T>],
    rng: &mut RandomStream,
) -> Result<Ensemble<M>> {
    let perturbed = perturb_all(obs, ens.len(), rng);
    let members = fft_analysis_with(&ens.members, obs, &perturbed)?;
    Ok(Ensemble {
        members,
        reference: ens.reference.clone(),
    })
}

/// The covariance the FFT EnKF uses, materialized over the flattened state:
/// block `(j, l)` is `F⁻¹ diag(ĉ^(jl)) F`, and blocks coupling two distinct
/// observed blocks are zero. Layout matches [`crate::enkf::sample_covariance`].
pub fn spectral_covariance_matrix<T: Real, M: StateBlocks<T>>(members: &[M], observed: &[usize]) -> Result<Array2<T>> {
    let (nb, (nx, ny)) = crate::grid::block_layout(members)?;
    let cells = nx * ny;
    let dim = nb * cells;
    if dim > crate::enkf::MAX_DENSE_DIM {
        return Err(Error::StateTooLarge(dim));
    }
    let sx = dst1_matrix::<T>(nx);
    let sy = dst1_matrix::<T>(ny);
    // F = Sx ⊗ Sy on row-major flattened fields
    let f = Array2::from_shape_fn((cells, cells), |(a, b)| sx[[a / ny, b / ny]] * sy[[a % ny, b % ny]]);
    let coeffs: Vec<Vec<SpectralField<T>>> = members
        .iter()
        .map(|m| m.blocks().iter().map(dst2_forward).collect())
        .collect();
    let per_block = |b: usize| -> Vec<SpectralField<T>> { coeffs.iter().map(|m| m[b].clone()).collect() };
    let mut cov = Array2::<T>::zeros((dim, dim));
    for j in 0..nb {
        for l in 0..nb {
            if j != l && observed.contains(&j) && observed.contains(&l) {
                continue;
            }
            let c = if j == l {
                spectral_variance(&per_block(j))?
            } else {
                spectral_cross_covariance(&per_block(j), &per_block(l))?
            };
            let diag: Vec<T> = c.c_hat.iter().copied().collect();
            let mut scaled = f.clone();
            for (mut col, d) in scaled.columns_mut().into_iter().zip(&diag) {
                col.mapv_inplace(|v| v * *d);
            }
            let block = scaled.dot(&f);
            cov.slice_mut(ndarray::s![j * cells..(j + 1) * cells, l * cells..(l + 1) * cells])
                .assign(&block);
        }
    }
    Ok(cov)
}
