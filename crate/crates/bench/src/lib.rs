//! Fixtures shared by the benchmarks.

use meanfield_core::model::{Coupling, InteractionId, SiteModel, SystemModel};
use meanfield_core::operator::{c64, pauli, CVector, DensityMatrix};
use meanfield_core::ReservoirEnsembleState;

/// `σ_z` system coupled through `σ_x` to `σ_z` sites, sites in `|+⟩`, system in `|0⟩`.
pub fn qubit_fixture() -> (SystemModel, SiteModel, ReservoirEnsembleState, DensityMatrix) {
    let sys = SystemModel::new(pauli::z(), vec![Coupling::new(pauli::x(), InteractionId::Site(0))]).unwrap();
    let site = SiteModel::new(pauli::z(), vec![pauli::x()]).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let plus = DensityMatrix::pure(&CVector::from_vec(vec![c64(s, 0.0), c64(s, 0.0)]), vec![2]).unwrap();
    let zero = DensityMatrix::pure(&CVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)]), vec![2]).unwrap();
    (sys, site, ReservoirEnsembleState::product(plus), zero)
}
