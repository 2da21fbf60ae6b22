//! Morphing representation: warps, registration, the morphing transform
//! and EnKF analysis in morphing coordinates.
//!
//! Composition convention: `(u ∘ (I + T))(x) = u(x + T(x))`, and a member
//! registered against the reference satisfies `u ≈ reference ∘ (I + T)`.

mod analysis;
mod register;
mod transform;
mod warp;

pub use analysis::{
    morph_forecast, morph_update, morphing_analysis, FilterKind, MorphForecast, MorphingOptions, MorphingOutcome,
};
pub use register::{register, Registration, RegistrationOptions};
pub use transform::{
    initial_ensemble, initial_ensemble_from, morph_inverse, morph_transform, perturb_state, AmplitudePerturbation,
    MorphState,
};
pub use warp::{compose, inversion_defect, invert_mapping, sample_bilinear, warp, InversionOptions, WarpMapping};
