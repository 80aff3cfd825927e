//! Stochastic flows on nilpotent Lie groups driven by left-invariant vector
//! fields, and numerical checks of their Malliavin derivatives.
//!
//! * [`algebra`]: structure constants, brackets, `exp(ad)`, BCH products.
//! * [`group`]: group models in exponential coordinates, invariant frames,
//!   `∇̂` / `∇̃` gradients.
//! * [`wiener`]: Brownian and Cameron–Martin paths, `∂_h` and `∂_h^*` on
//!   cylinder functionals.
//! * [`flow`]: the rolling-map SDE, the adjoint process and the variation
//!   processes.
//! * [`cutoff`]: smooth cutoffs `φ_m`, `ψ` and the coefficients built from
//!   them.
//! * [`malliavin`]: derivative formula vs finite-difference oracle,
//!   Malliavin kernel, integration by parts, cutoff convergence studies.

pub mod algebra;
pub mod cutoff;
pub mod error;
pub mod flow;
pub mod group;
pub mod malliavin;
pub mod stats;
pub mod tolerances;
pub mod wiener;

pub use algebra::{AlgebraVector, LieAlgebraSpec};
pub use error::{LabError, Result};
pub use group::{GroupModel, GroupPoint, ScalarField};
pub use wiener::{BrownianPath, CameronMartinPath, PathGrid};

/// Crate version, echoed into experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
