//! Particle samplers for guided diffusion targets.
//!
//! Slowly annealed Langevin dynamics (SALD), its velocity-aware variant
//! (VA-SALD) for VP diffusions and flow matching, and a local Doob
//! proposal baseline (DOIT), all run against analytic Gaussian-mixture
//! marginal families so every score, velocity and terminal target is exact.
//!
//! Module map:
//!
//! - [`schedules`]: β schedule, VP coefficients, time slowdown.
//! - [`targets`]: mixture data, VP and flow marginal families, gridded targets.
//! - [`guides`]: guide potentials, bilinear caches, zeroth-order gradients.
//! - [`samplers`]: the four particle samplers and budget matching.
//! - [`metrics`]: grid KL, mean penalty, α-complexity, residual variance.
//! - [`harness`]: experiment configs, sweeps, reports and self-validation.

pub mod error;
pub mod guides;
pub mod harness;
pub mod metrics;
pub mod point;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod targets;

pub use error::{Error, Result};
pub use point::Vec2;
