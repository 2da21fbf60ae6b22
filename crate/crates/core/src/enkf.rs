//! Standard (dense) EnKF analysis with perturbed observations.
//!
//! The state of a member is the concatenation of its blocks; the
//! observation operator selects one or more whole blocks and the data error
//! covariance is `r_o · I` on observed block `o`. The default path never
//! forms the state covariance: with `A` the scaled anomaly matrix and
//! `C_N = A Aᵀ`, the gain applied to an innovation `D` is
//!
//! ```text
//! C_N Hᵀ (H C_N Hᵀ + R)⁻¹ D = A (I + (HA)ᵀ R⁻¹ HA)⁻¹ (HA)ᵀ R⁻¹ D,
//! ```
//!
//! so only an `N × N` system is factored. [`dense_analysis_with_covariance`]
//! takes an arbitrary explicit covariance instead and is meant for small
//! grids.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::{block_layout, block_mean, Ensemble, FieldBlock, StateBlocks};
use crate::linalg::Cholesky;
use crate::rng::RandomStream;
use crate::scalar::Real;

/// Largest flattened state dimension for which a covariance is materialized.
pub const MAX_DENSE_DIM: usize = 10_000;

/// Observation of one whole block: `d ~ N(u^(block), r I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpec<T> {
    pub observed_block: usize,
    pub r: T,
    pub data: FieldBlock<T>,
}

impl<T: Real> ObsSpec<T> {
    pub fn new(observed_block: usize, r: T, data: FieldBlock<T>) -> Result<Self> {
        let obs = ObsSpec {
            observed_block,
            r,
            data,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > T::zero()) || !self.r.is_finite() {
            return Err(Error::InvalidVariance(self.r.as_f64()));
        }
        if !self.data.is_finite() {
            return Err(Error::NonFinite("observation data"));
        }
        Ok(())
    }
}

/// `d + e` with `e ~ N(0, r I)`.
pub fn perturb_data<T: Real>(obs: &ObsSpec<T>, rng: &mut RandomStream) -> FieldBlock<T> {
    let sd = obs.r.sqrt();
    obs.data.map(|d| d + sd * T::of(rng.standard_normal()))
}

/// Perturbed data for `n_members` members, member-major then observation
/// order. Both analysis paths consume this layout, so one draw can be
/// shared between them.
pub fn perturb_all<T: Real>(obs: &[ObsSpec<T>], n_members: usize, rng: &mut RandomStream) -> Vec<Vec<FieldBlock<T>>> {
    (0..n_members)
        .map(|_| obs.iter().map(|o| perturb_data(o, rng)).collect())
        .collect()
}

pub(crate) fn check_inputs<T: Real, M: StateBlocks<T>>(
    members: &[M],
    obs: &[ObsSpec<T>],
    perturbed: &[Vec<FieldBlock<T>>],
) -> Result<(usize, (usize, usize))> {
    if members.len() < 2 {
        return Err(Error::EnsembleTooSmall(members.len()));
    }
    let (nb, shape) = block_layout(members)?;
    for o in obs {
        o.validate()?;
        if o.observed_block >= nb {
            return Err(Error::InvalidBlock(o.observed_block));
        }
        if o.data.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: o.data.shape(),
            });
        }
    }
    if perturbed.len() != members.len() || perturbed.iter().any(|p| p.len() != obs.len()) {
        return Err(Error::BlockMismatch);
    }
    for m in members {
        if m.blocks().iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("ensemble member"));
        }
    }
    Ok((nb, shape))
}

fn dot<T: Real>(a: &FieldBlock<T>, b: &FieldBlock<T>) -> T {
    a.values().iter().zip(b.values().iter()).map(|(x, y)| *x * *y).sum()
}

/// Scaled anomalies `(u_k − ū) / √(N − 1)`, indexed `[member][block]`.
fn anomalies<T: Real, M: StateBlocks<T>>(members: &[M]) -> Result<Vec<Vec<FieldBlock<T>>>> {
    let mean = block_mean(members)?;
    let scale = T::one() / T::of_usize(members.len() - 1).sqrt();
    Ok(members
        .iter()
        .map(|m| {
            m.blocks()
                .iter()
                .zip(mean.blocks())
                .map(|(b, mb)| b.sub(mb).scale(scale))
                .collect()
        })
        .collect())
}

/// Ensemble-space EnKF update with the given perturbed data.
pub fn dense_analysis_with<T: Real, M: StateBlocks<T>>(
    members: &[M],
    obs: &[ObsSpec<T>],
    perturbed: &[Vec<FieldBlock<T>>],
) -> Result<Vec<M>> {
    check_inputs(members, obs, perturbed)?;
    let n = members.len();
    let anom = anomalies(members)?;

    // R⁻¹-weighted anomaly Gram matrix over the observed blocks
    let mut gram = Array2::<T>::eye(n);
    for k in 0..n {
        for l in k..n {
            let mut q = T::zero();
            for o in obs {
                let b = o.observed_block;
                q += dot(&anom[k][b], &anom[l][b]) / o.r;
            }
            gram[[k, l]] += q;
            if l != k {
                gram[[l, k]] += q;
            }
        }
    }
    let chol = Cholesky::factor(&gram)?;

    members
        .iter()
        .zip(perturbed)
        .map(|(member, pert)| {
            let mut y = Array1::<T>::zeros(n);
            for (o, d) in obs.iter().zip(pert) {
                let innov = d.sub(&member.blocks()[o.observed_block]);
                for l in 0..n {
                    y[l] += dot(&anom[l][o.observed_block], &innov) / o.r;
                }
            }
            let w = chol.solve(&y);
            let mut out = member.clone();
            for (b, blk) in out.blocks_mut().iter_mut().enumerate() {
                for (wl, a) in w.iter().zip(&anom) {
                    *blk = blk.axpy(*wl, &a[b]);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Standard EnKF analysis of one observed block with freshly drawn
/// perturbations. Unobserved blocks are updated through the ensemble
/// cross-covariance.
pub fn dense_analysis<T: Real, M: StateBlocks<T>>(
    ens: &Ensemble<M>,
    obs: &ObsSpec<T>,
    rng: &mut RandomStream,
) -> Result<Ensemble<M>> {
    dense_analysis_multi(ens, std::slice::from_ref(obs), rng)
}

/// [`dense_analysis`] with several observed blocks.
pub fn dense_analysis_multi<T: Real, M: StateBlocks<T>>(
    ens: &Ensemble<M>,
    obs: &[ObsSpec<T>],
    rng: &mut RandomStream,
) -> Result<Ensemble<M>> {
    let perturbed = perturb_all(obs, ens.len(), rng);
    let members = dense_analysis_with(&ens.members, obs, &perturbed)?;
    Ok(Ensemble {
        members,
        reference: ens.reference.clone(),
    })
}

fn flat_len<T: Real, M: StateBlocks<T>>(m: &M) -> usize {
    m.blocks().iter().map(|b| b.values().len()).sum()
}

fn flatten<T: Real, M: StateBlocks<T>>(m: &M) -> Array1<T> {
    m.blocks().iter().flat_map(|b| b.values().iter().copied()).collect()
}

/// Unbiased sample covariance (divisor `N − 1`) of the flattened states.
/// Blocks are concatenated in order, each flattened row-major.
pub fn sample_covariance<T: Real, M: StateBlocks<T>>(ens: &Ensemble<M>) -> Result<Array2<T>> {
    let members = &ens.members;
    if members.len() < 2 {
        return Err(Error::EnsembleTooSmall(members.len()));
    }
    block_layout(members)?;
    let dim = flat_len(&members[0]);
    if dim > MAX_DENSE_DIM {
        return Err(Error::StateTooLarge(dim));
    }
    let n = members.len();
    let flat: Vec<Array1<T>> = members.iter().map(flatten).collect();
    let mut mean = Array1::<T>::zeros(dim);
    for f in &flat {
        mean += f;
    }
    mean.mapv_inplace(|v| v / T::of_usize(n));
    let mut cov = Array2::<T>::zeros((dim, dim));
    let denom = T::of_usize(n - 1);
    for f in &flat {
        let a = f - &mean;
        for i in 0..dim {
            if a[i] == T::zero() {
                continue;
            }
            for j in 0..dim {
                cov[[i, j]] += a[i] * a[j];
            }
        }
    }
    cov.mapv_inplace(|v| v / denom);
    Ok(cov)
}

/// EnKF update `u + C Hᵀ (H C Hᵀ + R)⁻¹ (d + e − H u)` with an explicit
/// state covariance `cov` over the flattened state.
pub fn dense_analysis_with_covariance<T: Real, M: StateBlocks<T>>(
    members: &[M],
    obs: &[ObsSpec<T>],
    perturbed: &[Vec<FieldBlock<T>>],
    cov: &Array2<T>,
) -> Result<Vec<M>> {
    let (nb, shape) = check_inputs(members, obs, perturbed)?;
    let cells = shape.0 * shape.1;
    let dim = nb * cells;
    if cov.dim() != (dim, dim) {
        return Err(Error::ShapeMismatch {
            expected: (dim, dim),
            got: cov.dim(),
        });
    }
    // flattened indices of the observed entries
    let rows: Vec<usize> = obs
        .iter()
        .flat_map(|o| (0..cells).map(move |c| o.observed_block * cells + c))
        .collect();
    let m = rows.len();
    let mut s = Array2::<T>::zeros((m, m));
    for (a, &ra) in rows.iter().enumerate() {
        for (b, &rb) in rows.iter().enumerate() {
            s[[a, b]] = cov[[ra, rb]];
        }
    }
    for (p, o) in obs.iter().enumerate() {
        for c in 0..cells {
            let idx = p * cells + c;
            s[[idx, idx]] += o.r;
        }
    }
    let chol = Cholesky::factor(&s)?;

    members
        .iter()
        .zip(perturbed)
        .map(|(member, pert)| {
            let mut innov = Array1::<T>::zeros(m);
            for (p, (o, d)) in obs.iter().zip(pert).enumerate() {
                let u = &member.blocks()[o.observed_block];
                for (c, (dv, uv)) in d.values().iter().zip(u.values().iter()).enumerate() {
                    innov[p * cells + c] = *dv - *uv;
                }
            }
            let x = chol.solve(&innov);
            let mut flat = flatten(member);
            for i in 0..dim {
                let mut acc = T::zero();
                for (a, &ra) in rows.iter().enumerate() {
                    acc += cov[[i, ra]] * x[a];
                }
                flat[i] += acc;
            }
            let mut out = member.clone();
            for b in 0..nb {
                let slice = flat.slice(ndarray::s![b * cells..(b + 1) * cells]);
                let arr = slice
                    .to_owned()
                    .into_shape_with_order(shape)
                    .map_err(|_| Error::BlockMismatch)?;
                out.blocks_mut()[b] = FieldBlock::from_array_unchecked(arr);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, ModelState};

    /// Single-block state used for scalar and small-vector checks.
    #[derive(Debug, Clone, PartialEq)]
    struct One(Vec<FieldBlock<f64>>);

    impl StateBlocks<f64> for One {
        fn blocks(&self) -> &[FieldBlock<f64>] {
            &self.0
        }
        fn blocks_mut(&mut self) -> &mut [FieldBlock<f64>] {
            &mut self.0
        }
    }

    fn cells(vals: &[f64]) -> One {
        let f = FieldBlock::from_array(Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap()).unwrap();
        One(vec![f])
    }

    fn scalar_obs(d: f64, r: f64) -> ObsSpec<f64> {
        ObsSpec::new(0, r, FieldBlock::constant(1, 1, d)).unwrap()
    }

    #[test]
    fn scalar_hand_case() {
        let members = vec![cells(&[1.0]), cells(&[3.0])];
        let obs = [scalar_obs(4.0, 2.0)];
        let pert = vec![vec![obs[0].data.clone()]; 2];
        let out = dense_analysis_with(&members, &obs, &pert).unwrap();
        assert!((out[0].0[0].get(0, 0) - 2.5).abs() < 1e-12);
        assert!((out[1].0[0].get(0, 0) - 3.5).abs() < 1e-12);

        // same through the explicit covariance route
        let cov = sample_covariance(&Ensemble::new(members.clone())).unwrap();
        assert_eq!(cov[[0, 0]], 2.0);
        let out = dense_analysis_with_covariance(&members, &obs, &pert, &cov).unwrap();
        assert!((out[0].0[0].get(0, 0) - 2.5).abs() < 1e-12);
        assert!((out[1].0[0].get(0, 0) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn zero_spread_is_identity() {
        let members = vec![cells(&[1.0, 2.0, 3.0]); 4];
        let obs = [ObsSpec::new(0, 0.5, FieldBlock::constant(1, 3, 9.0)).unwrap()];
        let mut rng = RandomStream::from_seed(1);
        let pert = perturb_all(&obs, 4, &mut rng);
        let out = dense_analysis_with(&members, &obs, &pert).unwrap();
        assert_eq!(out, members);
    }

    #[test]
    fn huge_variance_vanishing_gain() {
        let members = vec![cells(&[1.0, 0.0]), cells(&[3.0, 1.0]), cells(&[2.0, 5.0])];
        let obs = [ObsSpec::new(0, 1e12, FieldBlock::constant(1, 2, 4.0)).unwrap()];
        let pert = vec![vec![obs[0].data.clone()]; 3];
        let out = dense_analysis_with(&members, &obs, &pert).unwrap();
        for (a, f) in out.iter().zip(&members) {
            for (x, y) in a.0[0].values().iter().zip(f.0[0].values()) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn members_equal_to_data_stay_put() {
        let members = vec![cells(&[2.0, -1.0]); 3];
        let obs = [ObsSpec::new(0, 1.0, members[0].0[0].clone()).unwrap()];
        let pert = vec![vec![obs[0].data.clone()]; 3];
        let out = dense_analysis_with(&members, &obs, &pert).unwrap();
        assert_eq!(out, members);
    }

    #[test]
    fn errors() {
        assert!(ObsSpec::new(0, 0.0, FieldBlock::<f64>::zeros(1, 1)).is_err());
        assert!(ObsSpec::new(0, f64::INFINITY, FieldBlock::<f64>::zeros(1, 1)).is_err());
        let one = vec![cells(&[1.0])];
        let obs = [scalar_obs(1.0, 1.0)];
        let pert = vec![vec![obs[0].data.clone()]];
        assert!(matches!(
            dense_analysis_with(&one, &obs, &pert),
            Err(Error::EnsembleTooSmall(1))
        ));
        let two = vec![cells(&[1.0]), cells(&[2.0])];
        let bad = [ObsSpec {
            observed_block: 3,
            r: 1.0,
            data: FieldBlock::zeros(1, 1),
        }];
        let pert = vec![vec![bad[0].data.clone()]; 2];
        assert!(matches!(
            dense_analysis_with(&two, &bad, &pert),
            Err(Error::InvalidBlock(3))
        ));
        let neg = [ObsSpec {
            observed_block: 0,
            r: -1.0,
            data: FieldBlock::zeros(1, 1),
        }];
        assert!(matches!(
            dense_analysis_with(&two, &neg, &pert),
            Err(Error::InvalidVariance(_))
        ));
    }

    #[test]
    fn covariance_hand_cases() {
        let same = Ensemble::new(vec![cells(&[1.0, 2.0]); 2]);
        assert!(sample_covariance(&same).unwrap().iter().all(|v| *v == 0.0));

        let e = Ensemble::new(vec![cells(&[0.0, 5.0]), cells(&[2.0, 5.0])]);
        let c = sample_covariance(&e).unwrap();
        assert_eq!(c[[0, 0]], 2.0);
        assert_eq!(c[[1, 1]], 0.0);

        assert!(matches!(
            sample_covariance(&Ensemble::new(vec![cells(&[1.0])])),
            Err(Error::EnsembleTooSmall(1))
        ));
        let big = Ensemble::new(vec![cells(&vec![0.0; MAX_DENSE_DIM + 1]); 2]);
        assert!(matches!(sample_covariance(&big), Err(Error::StateTooLarge(_))));
    }

    #[test]
    fn covariance_two_pass_oracle() {
        let mut rng = RandomStream::from_seed(8);
        let members: Vec<One> = (0..5)
            .map(|_| {
                cells(&[
                    rng.standard_normal(),
                    rng.standard_normal(),
                    3.0 * rng.standard_normal(),
                ])
            })
            .collect();
        let c = sample_covariance(&Ensemble::new(members.clone())).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let xa: Vec<f64> = members.iter().map(|m| m.0[0].get(0, a)).collect();
                let xb: Vec<f64> = members.iter().map(|m| m.0[0].get(0, b)).collect();
                let ma = xa.iter().sum::<f64>() / 5.0;
                let mb = xb.iter().sum::<f64>() / 5.0;
                let s: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 4.0;
                assert!((c[[a, b]] - s).abs() < 1e-12);
                assert_eq!(c[[a, b]], c[[b, a]]);
            }
        }
    }

    #[test]
    fn perturbation_statistics() {
        let obs = ObsSpec::new(0, 1e-30, FieldBlock::constant(3, 3, 2.0)).unwrap();
        let p = perturb_data(&obs, &mut RandomStream::from_seed(4));
        assert!(p.max_abs_diff(&obs.data) < 1e-10);

        let obs = ObsSpec::new(0, 0.7, FieldBlock::constant(4, 4, 1.0)).unwrap();
        let a = perturb_data(&obs, &mut RandomStream::from_seed(5));
        let b = perturb_data(&obs, &mut RandomStream::from_seed(5));
        assert_eq!(a, b);

        let obs = ObsSpec::new(0, 0.7, FieldBlock::constant(1, 1, 0.0)).unwrap();
        let mut rng = RandomStream::from_seed(6);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| perturb_data(&obs, &mut rng).get(0, 0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.7).abs() < 0.05 * 0.7, "var {var}");
    }

    #[test]
    fn woodbury_matches_explicit_multiblock() {
        let g = Grid::new(4, 5, 1.0, 1.0).unwrap();
        let mut rng = RandomStream::from_seed(31);
        let mut field = || FieldBlock::from_fn(4, 5, |_| rng.standard_normal());
        let members: Vec<ModelState<f64>> = (0..5)
            .map(|_| ModelState::new(field(), field(), field(), 0.0).unwrap())
            .collect();
        let obs = [
            ObsSpec::new(1, 0.3, g.zeros()).unwrap(),
            ObsSpec::new(2, 2.0, FieldBlock::constant(4, 5, 1.0)).unwrap(),
        ];
        let pert = perturb_all(&obs, 5, &mut rng);
        let cov = sample_covariance(&Ensemble::new(members.clone())).unwrap();
        let a = dense_analysis_with(&members, &obs, &pert).unwrap();
        let b = dense_analysis_with_covariance(&members, &obs, &pert, &cov).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (bx, by) in x.blocks().iter().zip(y.blocks()) {
                assert!(bx.max_abs_diff(by) < 1e-10);
            }
        }
    }

    #[test]
    fn scalar_gain_shrinks_toward_data() {
        let mut rng = RandomStream::from_seed(12);
        for _ in 0..50 {
            let members: Vec<One> = (0..4).map(|_| cells(&[3.0 * rng.standard_normal()])).collect();
            let d = 5.0 * rng.standard_normal();
            let obs = [scalar_obs(d, 0.5 + rng.uniform())];
            let pert = perturb_all(&obs, 4, &mut rng);
            let out = dense_analysis_with(&members, &obs, &pert).unwrap();
            let fmean = members.iter().map(|m| m.0[0].get(0, 0)).sum::<f64>() / 4.0;
            let amean = out.iter().map(|m| m.0[0].get(0, 0)).sum::<f64>() / 4.0;
            let emean = pert.iter().map(|p| p[0].get(0, 0) - d).sum::<f64>() / 4.0;
            assert!((amean - d).abs() <= (fmean - d).abs() + emean.abs() + 1e-12);
        }
    }
}
