//! Finite-M and mean-field limit dynamics of a quantum system coupled to a
//! reservoir of M identical units.

pub mod analysis;
pub mod effective;
pub mod error;
pub mod exact;
pub mod model;
pub mod operator;
pub mod quadrature;
pub mod reservoir;

pub use effective::{EffectivePotential, EffectivePropagator, PropagationResult};
pub use error::{Error, Result};
pub use model::{ClusterInteraction, Coupling, Hamiltonian, InteractionId, SiteModel, SystemModel};
pub use operator::{DensityMatrix, Operator};
pub use reservoir::{BoundProfile, QuasiPeriodic, ReservoirEnsembleState};

/// CSV number format: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
