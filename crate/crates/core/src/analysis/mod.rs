//! Distances, entanglement measures, M-sweeps, one-dimensional spectra and the
//! field-overlap decay.

pub mod decay;
pub mod spectral;
pub mod sweep;

pub use decay::{bump, field_overlap_decay, DecaySample, FieldOverlapSpec};
pub use spectral::{bound_state_count, stark_halfline_spectrum, BoundStates, Domain, SpectralProblem};
pub use sweep::{m_sweep, write_sweep_csv, SweepRow};

use crate::error::{Error, Result};
use crate::operator::{c64, eigh, partial_transpose, trace_norm, CMatrix, DensityMatrix, Operator};

/// `½‖ρ − σ‖₁`.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch("states differ in dimension".into()));
    }
    Ok(0.5 * trace_norm(&(rho.op() - sigma.op())))
}

/// Sum of the magnitudes of the negative eigenvalues of `ρ^{T_B}`, with `B` the
/// listed factors of `ρ`.
pub fn negativity(rho: &DensityMatrix, transposed: &[usize]) -> Result<f64> {
    let n = rho.dims().len();
    if n < 2 || transposed.is_empty() || transposed.len() >= n || transposed.iter().any(|&f| f >= n) {
        return Err(Error::InvalidArgument(format!(
            "factors {transposed:?} do not split a {n}-factor state into two parts"
        )));
    }
    let pt = partial_transpose(rho.op(), transposed)?;
    Ok(pt.eigenvalues()?.iter().filter(|&&x| x < 0.0).map(|x| -x).sum())
}

/// Wootters concurrence of a two-qubit state.
pub fn concurrence(rho: &DensityMatrix) -> Result<f64> {
    if rho.dims() != [2, 2] {
        return Err(Error::DimensionMismatch("concurrence needs a two-qubit state".into()));
    }
    let yy = {
        let y = crate::operator::pauli::y();
        y.data().kronecker(y.data())
    };
    let tilde = &yy * rho.data().conjugate() * &yy;
    let (vals, vecs) = eigh(rho.op())?;
    let sqrt_rho: CMatrix = &vecs * CMatrix::from_diagonal(&vals.map(|x| c64(x.max(0.0).sqrt(), 0.0))) * vecs.adjoint();
    let r = &sqrt_rho * tilde * &sqrt_rho;
    let r = Operator::from_matrix((&r + r.adjoint()).scale(0.5))?;
    let mut ev: Vec<f64> = eigh(&r)?.0.iter().map(|x| x.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok((ev[0] - ev[1] - ev[2] - ev[3]).max(0.0))
}
