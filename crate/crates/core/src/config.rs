//! Experiment configuration: a TOML document with one table per concern.
//!
//! Every key is optional; omitted keys take the defaults below, which give
//! an ensemble of 5, a 100-step spinup, 20-step cycles, 3 cycles and a 1%
//! infection threshold on a 100×100 grid of 10 km cells. Unknown keys are
//! rejected.
//!
//! ```toml
//! [grid]
//! nx = 100
//! ny = 100
//!
//! [ensemble]
//! n_ensemble = 5
//! seed = 7
//!
//! [filter]
//! variant = "morphing_fft_enkf"
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::morphing::{AmplitudePerturbation, RegistrationOptions};
use crate::sir::EpiParams;
use crate::spectral::SmoothnessSpec;

/// The four analysis variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Enkf,
    FftEnkf,
    MorphingEnkf,
    MorphingFftEnkf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Enkf,
        Variant::FftEnkf,
        Variant::MorphingEnkf,
        Variant::MorphingFftEnkf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Enkf => "enkf",
            Variant::FftEnkf => "fft_enkf",
            Variant::MorphingEnkf => "morphing_enkf",
            Variant::MorphingFftEnkf => "morphing_fft_enkf",
        }
    }

    pub fn is_morphing(self) -> bool {
        matches!(self, Variant::MorphingEnkf | Variant::MorphingFftEnkf)
    }

    pub fn is_spectral(self) -> bool {
        matches!(self, Variant::FftEnkf | Variant::MorphingFftEnkf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter {
                name: "variant",
                reason: format!("unknown variant {s:?} (expected enkf, fft_enkf, morphing_enkf or morphing_fft_enkf)"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    /// Cell size, km.
    pub dx: f64,
    pub dy: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 100,
            ny: 100,
            dx: 10.0,
            dy: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub alpha: f64,
    /// km.
    pub lambda: f64,
    pub q: f64,
    pub dt: f64,
    /// km.
    pub cutoff_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alpha: 4e-8,
            lambda: 10.0,
            q: 5e-4,
            dt: 1.0,
            cutoff_radius: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    /// Every cell holds `density` people.
    Constant,
    /// `density` plus `blob_count` Gaussian blobs at random positions.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub kind: PopulationKind,
    /// People per cell.
    pub density: f64,
    pub blob_count: usize,
    /// Extra people per cell at a blob center.
    pub blob_peak: f64,
    /// km.
    pub blob_radius: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            kind: PopulationKind::Constant,
            density: 1e4,
            blob_count: 4,
            blob_peak: 2e4,
            blob_radius: 100.0,
        }
    }
}

/// Initial infection: a disc in which a fraction of the population is
/// infected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutbreakConfig {
    /// Disc center, km; the domain center when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    /// km.
    pub radius: f64,
    pub infected_fraction: f64,
}

impl Default for OutbreakConfig {
    fn default() -> Self {
        OutbreakConfig {
            x: None,
            y: None,
            radius: 15.0,
            infected_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_ensemble: usize,
    pub spinup_steps: usize,
    pub cycle_steps: usize,
    pub n_cycles: usize,
    /// Master seed.
    pub seed: u64,
    /// Worker threads for advancing members.
    pub lanes: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_ensemble: 5,
            spinup_steps: 100,
            cycle_steps: 20,
            n_cycles: 3,
            seed: 1,
            lanes: 1,
        }
    }
}

/// Initial ensemble perturbation: a smooth random warp and a smooth random
/// amplitude factor `1 + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Root-mean-square displacement per component, km.
    pub position_rms: f64,
    pub position_decay: f64,
    /// Root-mean-square of `s` (multiplicative), or of the added field in
    /// people per cell (additive).
    pub amplitude_rms: f64,
    pub amplitude_decay: f64,
    pub amplitude_mode: AmplitudePerturbation,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            position_rms: 30.0,
            position_decay: 0.5,
            amplitude_rms: 0.1,
            amplitude_decay: 0.5,
            amplitude_mode: AmplitudePerturbation::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub variant: Variant,
    /// Infected fractions below this are set to zero after the analysis.
    pub threshold: f64,
    /// Set the observation variances from the cycle-1 forecast spread.
    pub auto_tune: bool,
    /// Variance of the infected fraction, plain variants.
    pub absolute_variance: f64,
    /// Variance of each warp component (km²), morphing variants.
    pub position_variance: f64,
    /// Variance of the infected-fraction residual, morphing variants.
    pub amplitude_variance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            variant: Variant::MorphingFftEnkf,
            threshold: 0.01,
            auto_tune: true,
            absolute_variance: 1e-3,
            position_variance: 400.0,
            amplitude_variance: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub smoothness_weight: f64,
    pub gradient_weight: f64,
    pub max_iters: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let d = RegistrationOptions::<f64>::default();
        RegistrationConfig {
            levels: d.levels,
            smoothness_weight: d.smoothness_weight,
            gradient_weight: d.gradient_weight,
            max_iters: d.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub population: PopulationConfig,
    pub outbreak: OutbreakConfig,
    pub ensemble: EnsembleConfig,
    pub perturbation: PerturbationConfig,
    pub filter: FilterConfig,
    pub registration: RegistrationConfig,
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(name: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be finite and >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<Grid<f64>> {
        Grid::new(self.grid.nx, self.grid.ny, self.grid.dx, self.grid.dy)
    }

    pub fn epi_params(&self) -> EpiParams<f64> {
        EpiParams {
            alpha: self.model.alpha,
            lambda: self.model.lambda,
            q: self.model.q,
            dt: self.model.dt,
            cutoff_radius: self.model.cutoff_radius,
        }
    }

    pub fn registration_options(&self) -> RegistrationOptions<f64> {
        RegistrationOptions {
            levels: self.registration.levels,
            smoothness_weight: self.registration.smoothness_weight,
            gradient_weight: self.registration.gradient_weight,
            max_iters: self.registration.max_iters,
            ..RegistrationOptions::default()
        }
    }

    /// Smoothness law of the warp perturbation, km.
    pub fn position_spec(&self) -> Result<SmoothnessSpec<f64>> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let p = &self.perturbation;
        SmoothnessSpec::with_rms(
            p.position_rms,
            p.position_decay,
            nx.saturating_sub(2).max(1),
            ny.saturating_sub(2).max(1),
        )
    }

    /// Smoothness law of the amplitude perturbation `s`.
    pub fn amplitude_spec(&self) -> Result<SmoothnessSpec<f64>> {
        let p = &self.perturbation;
        SmoothnessSpec::with_rms(p.amplitude_rms, p.amplitude_decay, self.grid.nx, self.grid.ny)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.epi_params().validate()?;
        self.registration_options().validate()?;

        let pop = &self.population;
        positive("population.density", pop.density)?;
        nonnegative("population.blob_peak", pop.blob_peak)?;
        positive("population.blob_radius", pop.blob_radius)?;

        let ob = &self.outbreak;
        nonnegative("outbreak.radius", ob.radius)?;
        if !(0.0..=1.0).contains(&ob.infected_fraction) {
            return Err(invalid(
                "outbreak.infected_fraction",
                format!("must lie in [0, 1], got {}", ob.infected_fraction),
            ));
        }
        for (name, v) in [("outbreak.x", ob.x), ("outbreak.y", ob.y)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(invalid(name, "must be finite"));
                }
            }
        }

        let en = &self.ensemble;
        if en.n_ensemble < 2 {
            return Err(invalid(
                "ensemble.n_ensemble",
                format!("must be at least 2, got {}", en.n_ensemble),
            ));
        }
        if en.lanes < 1 {
            return Err(invalid("ensemble.lanes", "must be at least 1"));
        }

        let p = &self.perturbation;
        nonnegative("perturbation.position_rms", p.position_rms)?;
        positive("perturbation.position_decay", p.position_decay)?;
        nonnegative("perturbation.amplitude_rms", p.amplitude_rms)?;
        positive("perturbation.amplitude_decay", p.amplitude_decay)?;

        let f = &self.filter;
        if !(f.threshold >= 0.0 && f.threshold < 1.0) {
            return Err(invalid(
                "filter.threshold",
                format!("must lie in [0, 1), got {}", f.threshold),
            ));
        }
        positive("filter.absolute_variance", f.absolute_variance)?;
        positive("filter.position_variance", f.position_variance)?;
        positive("filter.amplitude_variance", f.amplitude_variance)?;
        Ok(())
    }

    /// The configuration as a TOML document that parses back to itself.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    config.validate()?;
    Ok(config)
}
