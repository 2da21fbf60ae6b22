//! Orthonormal two-dimensional sine transform (DST-I) and random smooth
//! fields generated in the sine domain.
//!
//! The transform runs over all grid nodes; the implied zero boundary sits
//! one cell outside the grid on every side. Coefficient `[p, q]` belongs to
//! mode `(p + 1, q + 1)`. With orthonormal scaling the transform matrix is
//! symmetric and orthogonal, so the inverse is the same operation.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{FieldBlock, Grid};
use crate::morphing::WarpMapping;
use crate::rng::RandomStream;
use crate::scalar::Real;

/// DST coefficients of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField<T> {
    coeffs: Array2<T>,
}

impl<T: Real> SpectralField<T> {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        SpectralField {
            coeffs: Array2::zeros((nx, ny)),
        }
    }

    pub fn from_array(coeffs: Array2<T>) -> Self {
        SpectralField { coeffs }
    }

    pub fn coeffs(&self) -> &Array2<T> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array2<T> {
        &mut self.coeffs
    }

    pub fn into_array(self) -> Array2<T> {
        self.coeffs
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coeffs.dim()
    }

    /// Coefficient of the 1-based mode `(p, q)`.
    pub fn mode(&self, p: usize, q: usize) -> T {
        self.coeffs[[p - 1, q - 1]]
    }
}

/// Orthonormal DST-I matrix of size `n`, `S[p, i] = √(2/(n+1)) sin(π(p+1)(i+1)/(n+1))`.
pub fn dst1_matrix<T: Real>(n: usize) -> Array2<T> {
    let m = n + 1;
    let period = 2 * m;
    let norm = (2.0 / m as f64).sqrt();
    let step = std::f64::consts::PI / m as f64;
    Array2::from_shape_fn((n, n), |(p, i)| {
        // reduce the product mod 2(n+1) so large arguments keep full accuracy
        let k = ((p + 1) * (i + 1)) % period;
        T::of(norm * (step * k as f64).sin())
    })
}

fn apply_separable<T: Real>(x: &Array2<T>) -> Array2<T> {
    let (nx, ny) = x.dim();
    let sx = dst1_matrix::<T>(nx);
    if nx == ny {
        sx.dot(x).dot(&sx)
    } else {
        let sy = dst1_matrix::<T>(ny);
        sx.dot(x).dot(&sy)
    }
}

/// Forward orthonormal 2-D DST-I.
pub fn dst2_forward<T: Real>(field: &FieldBlock<T>) -> SpectralField<T> {
    SpectralField {
        coeffs: apply_separable(field.values()),
    }
}

/// Inverse orthonormal 2-D DST-I.
pub fn dst2_inverse<T: Real>(coeffs: &SpectralField<T>) -> FieldBlock<T> {
    FieldBlock::from_array_unchecked(apply_separable(&coeffs.coeffs))
}

/// Parameters of the per-mode standard deviation law
/// `amplitude · exp(−decay · √(p² + q²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessSpec<T> {
    pub amplitude: T,
    pub decay: T,
}

impl<T: Real> SmoothnessSpec<T> {
    pub fn new(amplitude: T, decay: T) -> Result<Self> {
        let spec = SmoothnessSpec { amplitude, decay };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= T::zero()) || !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter {
                name: "amplitude",
                reason: format!("must be >= 0, got {}", self.amplitude),
            });
        }
        if !(self.decay > T::zero()) || !self.decay.is_finite() {
            return Err(Error::InvalidParameter {
                name: "decay",
                reason: format!("must be > 0, got {}", self.decay),
            });
        }
        Ok(())
    }

    /// Law whose random fields on an `nx × ny` sine basis have expected
    /// root-mean-square value `rms` over the nodes.
    pub fn with_rms(rms: T, decay: T, nx: usize, ny: usize) -> Result<Self> {
        let unit = SmoothnessSpec::new(T::one(), decay)?;
        let mut total = T::zero();
        for p in 1..=nx {
            for q in 1..=ny {
                let sd = unit.mode_std(p, q);
                total += sd * sd;
            }
        }
        let amplitude = rms * (T::of_usize(nx * ny) / total).sqrt();
        SmoothnessSpec::new(amplitude, decay)
    }

    /// Standard deviation of the coefficient of 1-based mode `(p, q)`.
    pub fn mode_std(&self, p: usize, q: usize) -> T {
        let radius = T::of(((p * p + q * q) as f64).sqrt());
        self.amplitude * (-self.decay * radius).exp()
    }
}

fn random_coefficients<T: Real>(
    nx: usize,
    ny: usize,
    spec: &SmoothnessSpec<T>,
    rng: &mut RandomStream,
) -> SpectralField<T> {
    let mut coeffs = Array2::zeros((nx, ny));
    for p in 0..nx {
        for q in 0..ny {
            let z = T::of(rng.standard_normal());
            coeffs[[p, q]] = spec.mode_std(p + 1, q + 1) * z;
        }
    }
    SpectralField { coeffs }
}

/// Zero-mean random field with independent sine coefficients whose standard
/// deviation decays exponentially with the radial mode number.
pub fn random_smooth_field<T: Real>(
    grid: &Grid<T>,
    spec: &SmoothnessSpec<T>,
    rng: &mut RandomStream,
) -> Result<FieldBlock<T>> {
    spec.validate()?;
    let coeffs = random_coefficients(grid.nx(), grid.ny(), spec, rng);
    Ok(dst2_inverse(&coeffs))
}

/// Interior-supported random field: the sine series runs over the
/// `(nx − 2) × (ny − 2)` interior nodes and the outer ring is exactly zero.
pub fn random_interior_field<T: Real>(
    grid: &Grid<T>,
    spec: &SmoothnessSpec<T>,
    rng: &mut RandomStream,
) -> Result<FieldBlock<T>> {
    spec.validate()?;
    let (nx, ny) = grid.shape();
    let coeffs = random_coefficients(nx - 2, ny - 2, spec, rng);
    let interior = apply_separable(&coeffs.coeffs);
    let mut out = Array2::zeros((nx, ny));
    out.slice_mut(ndarray::s![1..nx - 1, 1..ny - 1]).assign(&interior);
    Ok(FieldBlock::from_array_unchecked(out))
}

/// Random smooth displacement field (km) vanishing on the grid boundary.
/// `spec.amplitude` is in km.
pub fn random_smooth_mapping<T: Real>(
    grid: &Grid<T>,
    spec: &SmoothnessSpec<T>,
    rng: &mut RandomStream,
) -> Result<WarpMapping<T>> {
    let tx = random_interior_field(grid, spec, rng)?;
    let ty = random_interior_field(grid, spec, rng)?;
    WarpMapping::new(tx, ty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn random_field(nx: usize, ny: usize, seed: u64) -> FieldBlock<f64> {
        let mut rng = RandomStream::from_seed(seed);
        FieldBlock::from_fn(nx, ny, |_| rng.standard_normal())
    }

    #[test]
    fn rms_scaling_matches_sampled_fields() {
        let g = Grid::new(20, 12, 1.0, 1.0).unwrap();
        let spec = SmoothnessSpec::with_rms(3.0, 0.4, 20, 12).unwrap();
        let mut rng = RandomStream::from_seed(4);
        let draws = 2000;
        let mut mean_sq = 0.0;
        for _ in 0..draws {
            let f = random_smooth_field(&g, &spec, &mut rng).unwrap();
            mean_sq += f.values().iter().map(|v| v * v).sum::<f64>() / 240.0;
        }
        let rms = (mean_sq / draws as f64).sqrt();
        assert!((rms - 3.0).abs() < 0.1, "{rms}");
    }

    /// Brute-force O(n⁴) orthonormal DST-I.
    fn dst2_oracle(f: &FieldBlock<f64>) -> Array2<f64> {
        let (nx, ny) = f.shape();
        let (mx, my) = ((nx + 1) as f64, (ny + 1) as f64);
        let norm = (2.0 / mx).sqrt() * (2.0 / my).sqrt();
        Array2::from_shape_fn((nx, ny), |(p, q)| {
            let mut acc = 0.0;
            for i in 0..nx {
                for j in 0..ny {
                    acc += f.get(i, j)
                        * (PI * ((p + 1) * (i + 1)) as f64 / mx).sin()
                        * (PI * ((q + 1) * (j + 1)) as f64 / my).sin();
                }
            }
            norm * acc
        })
    }

    #[test]
    fn zero_field_zero_coefficients() {
        let z = FieldBlock::<f64>::zeros(6, 5);
        assert_eq!(dst2_forward(&z).coeffs().iter().map(|c| c.abs()).sum::<f64>(), 0.0);
        assert_eq!(dst2_inverse(&SpectralField::<f64>::zeros(6, 5)).max_abs(), 0.0);
    }

    #[test]
    fn lowest_mode_is_single_coefficient() {
        let n = 9;
        let f = FieldBlock::from_fn(n, n, |(i, j)| {
            (PI * (i + 1) as f64 / (n + 1) as f64).sin() * (PI * (j + 1) as f64 / (n + 1) as f64).sin()
        });
        let c = dst2_forward(&f);
        let c11 = c.mode(1, 1);
        assert!(c11 > 1.0);
        for p in 0..n {
            for q in 0..n {
                if (p, q) != (0, 0) {
                    assert!(c.coeffs()[[p, q]].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_matches_brute_force() {
        let f = random_field(8, 8, 5);
        let oracle = dst2_oracle(&f);
        let c = dst2_forward(&f);
        let err = c
            .coeffs()
            .iter()
            .zip(oracle.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "err {err}");

        let f = random_field(5, 7, 6);
        let oracle = dst2_oracle(&f);
        let c = dst2_forward(&f);
        let err = c
            .coeffs()
            .iter()
            .zip(oracle.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn single_mode_inverse_is_product_sine() {
        let (nx, ny) = (6, 10);
        let mut c = SpectralField::zeros(nx, ny);
        c.coeffs_mut()[[0, 0]] = 1.0;
        let f = dst2_inverse(&c);
        let norm = (2.0 / (nx + 1) as f64).sqrt() * (2.0 / (ny + 1) as f64).sqrt();
        for i in 0..nx {
            for j in 0..ny {
                let want = norm
                    * (PI * (i + 1) as f64 / (nx + 1) as f64).sin()
                    * (PI * (j + 1) as f64 / (ny + 1) as f64).sin();
                assert!((f.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn round_trip_64() {
        let f = random_field(64, 64, 9);
        let back = dst2_inverse(&dst2_forward(&f));
        assert!(back.max_abs_diff(&f) < 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let f = FieldBlock::from_fn(12, 9, |(i, j)| ((i * 3 + j) % 5) as f32 - 2.0);
        let back = dst2_inverse(&dst2_forward(&f));
        assert!(back.max_abs_diff(&f) < 1e-4);
    }

    #[test]
    fn smooth_field_zero_amplitude_and_determinism() {
        let g = Grid::new(16, 12, 1.0, 1.0).unwrap();
        let zero = SmoothnessSpec::new(0.0, 0.5).unwrap();
        let f = random_smooth_field(&g, &zero, &mut RandomStream::from_seed(1)).unwrap();
        assert_eq!(f.max_abs(), 0.0);

        let spec = SmoothnessSpec::new(2.0, 0.3).unwrap();
        let a = random_smooth_field(&g, &spec, &mut RandomStream::from_seed(77)).unwrap();
        let b = random_smooth_field(&g, &spec, &mut RandomStream::from_seed(77)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs() > 0.0);
    }

    #[test]
    fn invalid_smoothness_spec() {
        assert!(SmoothnessSpec::new(-1.0, 1.0).is_err());
        assert!(SmoothnessSpec::new(1.0, 0.0).is_err());
        assert!(SmoothnessSpec::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn mode_variance_follows_decay_law() {
        let g = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let spec = SmoothnessSpec::new(1.5, 0.4).unwrap();
        let mut rng = RandomStream::from_seed(2024);
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let f = random_smooth_field(&g, &spec, &mut rng).unwrap();
            let c = dst2_forward(&f).mode(1, 1);
            acc += c * c;
        }
        let var = acc / draws as f64;
        let want = 1.5f64.powi(2) * (-2.0 * 0.4 * 2f64.sqrt()).exp();
        assert!((var - want).abs() < 0.05 * want, "var {var} want {want}");
    }

    #[test]
    fn mapping_vanishes_on_boundary() {
        let g = Grid::new(20, 17, 10.0, 10.0).unwrap();
        let spec = SmoothnessSpec::new(30.0, 0.3).unwrap();
        let m = random_smooth_mapping(&g, &spec, &mut RandomStream::from_seed(4)).unwrap();
        for t in [&m.tx, &m.ty] {
            for i in 0..20 {
                assert_eq!(t.get(i, 0), 0.0);
                assert_eq!(t.get(i, 16), 0.0);
            }
            for j in 0..17 {
                assert_eq!(t.get(0, j), 0.0);
                assert_eq!(t.get(19, j), 0.0);
            }
        }
        assert!(m.max_displacement() > 0.0);

        let again = random_smooth_mapping(&g, &spec, &mut RandomStream::from_seed(4)).unwrap();
        let bits = |f: &FieldBlock<f64>| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m.tx), bits(&again.tx));
        assert_eq!(bits(&m.ty), bits(&again.ty));

        let zero = SmoothnessSpec::new(0.0, 0.3).unwrap();
        let m = random_smooth_mapping(&g, &zero, &mut RandomStream::from_seed(4)).unwrap();
        assert_eq!(m.max_displacement(), 0.0);
    }
}
