//! Limit dynamics: effective potentials `ω_r(v_j(t))`, the time-ordered
//! propagator of `H_S + Σ_j ω_r(v_j(t)) G_j`, and De Finetti mixtures of orbits.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{InteractionId, SiteModel, SystemModel};
use crate::operator::{
    embed_at_site, expm_hermitian, kron_all, local_factor, split_local_sum, trace_norm, DensityMatrix, Operator,
};
use crate::reservoir::{quasi_periodic_expectation, QuasiPeriodic, ReservoirEnsembleState};

/// Required step-halving error estimate of the adaptive solver.
pub const STEP_TOL: f64 = 1e-7;
/// Unitarity defect allowed on propagator output.
pub const PROPAGATOR_UNITARY_TOL: f64 = 1e-8;
const MAX_SUBSTEPS: usize = 1 << 14;

/// Natural cubic spline through `(grid[k], values[k])`.
///
/// For `f ∈ C⁴` the interpolation error is bounded by `(5/384) h⁴ max|f⁗|` away
/// from the ends, with `h` the largest grid spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    grid: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if n < 2 || values.len() != n {
            return Err(Error::InvalidArgument("spline needs at least two matching samples".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("spline grid must be strictly increasing".into()));
        }
        // Tridiagonal solve for the second derivatives with natural end conditions.
        let mut second = vec![0.0; n];
        let mut u = vec![0.0; n];
        for i in 1..n - 1 {
            let sig = (grid[i] - grid[i - 1]) / (grid[i + 1] - grid[i - 1]);
            let p = sig * second[i - 1] + 2.0;
            second[i] = (sig - 1.0) / p;
            let d = (values[i + 1] - values[i]) / (grid[i + 1] - grid[i]) - (values[i] - values[i - 1]) / (grid[i] - grid[i - 1]);
            u[i] = (6.0 * d / (grid[i + 1] - grid[i - 1]) - sig * u[i - 1]) / p;
        }
        second[n - 1] = 0.0;
        for k in (0..n - 1).rev() {
            second[k] = second[k] * second[k + 1] + u[k];
        }
        Ok(Self { grid, values, second })
    }

    /// Value at `t`; outside the grid the end cubic is extended.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.grid.len();
        let hi = self.grid.partition_point(|&g| g < t).clamp(1, n - 1);
        let lo = hi - 1;
        let h = self.grid[hi] - self.grid[lo];
        let a = (self.grid[hi] - t) / h;
        let b = (t - self.grid[lo]) / h;
        a * self.values[lo]
            + b * self.values[hi]
            + ((a * a * a - a) * self.second[lo] + (b * b * b - b) * self.second[hi]) * h * h / 6.0
    }
}

/// One scalar coefficient function `w_j(t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum PotentialRepr {
    QuasiPeriodic(QuasiPeriodic),
    Sampled(CubicSpline),
}

impl PotentialRepr {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            PotentialRepr::QuasiPeriodic(q) => q.eval(t),
            PotentialRepr::Sampled(s) => s.eval(t),
        }
    }
}

/// Coefficient functions aligned with the couplings of a [`SystemModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct EffectivePotential {
    pub terms: Vec<PotentialRepr>,
}

impl EffectivePotential {
    pub fn new(terms: Vec<PotentialRepr>) -> Self {
        Self { terms }
    }

    /// Potential that vanishes for every coupling.
    pub fn zero(couplings: usize) -> Self {
        Self {
            terms: vec![PotentialRepr::QuasiPeriodic(QuasiPeriodic::constant(0.0)); couplings],
        }
    }

    pub fn eval(&self, j: usize, t: f64) -> f64 {
        self.terms[j].eval(t)
    }

    fn check(&self, sys: &SystemModel) -> Result<()> {
        if self.terms.len() != sys.couplings.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} potential terms for {} couplings",
                self.terms.len(),
                sys.couplings.len()
            )));
        }
        Ok(())
    }

    /// `H_S + Σ_j w_j(t) G_j`.
    pub fn hamiltonian(&self, sys: &SystemModel, t: f64) -> Operator {
        let mut j = 0;
        sys.effective_hamiltonian(|_| {
            let w = self.eval(j, t);
            j += 1;
            w
        })
    }
}

/// Quasi-periodic potentials generated by a single-site state `σ`.
///
/// A cluster coupling uses `σ^{⊗ν}` evolved by `Σ_i h^{[i]}` on the ν sites.
pub fn potential_for_site_state(sigma: &DensityMatrix, site: &SiteModel, sys: &SystemModel) -> Result<EffectivePotential> {
    let terms = sys
        .couplings
        .iter()
        .map(|c| {
            let q = match c.interaction {
                InteractionId::Site(j) => quasi_periodic_expectation(sigma, &site.h_site, site.interaction(j)?)?,
                InteractionId::Cluster(k) => {
                    let cluster = site.cluster(k)?;
                    let nu = cluster.nu;
                    let mut h = Operator::zeros(&vec![site.dim; nu]);
                    for i in 0..nu {
                        h = &h + &embed_at_site(&site.h_site, i, nu, site.dim)?;
                    }
                    let mut state = sigma.clone();
                    for _ in 1..nu {
                        state = state.tensor(sigma);
                    }
                    quasi_periodic_expectation(&state, &h, &cluster.v_cluster)?
                }
            };
            Ok(PotentialRepr::QuasiPeriodic(q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectivePotential { terms })
}

/// Effective potential of a reservoir state; macroscopic states use `Σ_k λ_k σ_k`.
pub fn effective_potential(state: &ReservoirEnsembleState, site: &SiteModel, sys: &SystemModel) -> Result<EffectivePotential> {
    let sigma = state.effective_site_state()?;
    potential_for_site_state(&sigma, site, sys)
}

/// Per-atom potentials of a De Finetti state.
pub fn definetti_potentials(
    state: &ReservoirEnsembleState,
    site: &SiteModel,
    sys: &SystemModel,
) -> Result<Vec<(f64, EffectivePotential)>> {
    match state {
        ReservoirEnsembleState::DeFinetti(atoms) => atoms
            .iter()
            .map(|(w, s)| Ok((*w, potential_for_site_state(s, site, sys)?)))
            .collect(),
        _ => Err(Error::InvalidArgument("state is not a De Finetti mixture".into())),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Midpoint steps per grid interval.
    pub substeps: usize,
    /// Step-halving estimate of the error of the returned propagator.
    pub error_estimate: f64,
    pub max_unitarity_defect: f64,
}

/// `U(t_k) = U(t_k, 0)` on a time grid.
#[derive(Clone, Debug)]
pub struct EffectivePropagator {
    pub times: Vec<f64>,
    pub unitaries: Vec<Operator>,
    pub diagnostics: StepDiagnostics,
}

impl EffectivePropagator {
    /// `U(t_k, t_{k−1}) = U(t_k) U(t_{k−1})†`.
    pub fn step_factor(&self, k: usize) -> Operator {
        self.unitaries[k].matmul(&self.unitaries[k - 1].adjoint())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(Error::InvalidArgument("time grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Uniform grid `0, dt, …` up to `t_end` (inclusive within rounding).
pub fn uniform_grid(t_end: f64, dt: f64) -> Vec<f64> {
    let n = (t_end / dt).round() as usize;
    (0..=n).map(|k| k as f64 * dt).collect()
}

/// Midpoint-exponential propagation with a fixed number of steps per grid interval.
pub fn propagate_fixed(sys: &SystemModel, w: &EffectivePotential, grid: &[f64], substeps: usize) -> Result<EffectivePropagator> {
    check_grid(grid)?;
    w.check(sys)?;
    if substeps == 0 {
        return Err(Error::InvalidArgument("at least one step per interval".into()));
    }
    let mut u = Operator::identity(sys.h_sys.dims());
    let mut unitaries = Vec::with_capacity(grid.len());
    unitaries.push(u.clone());
    let mut defect: f64 = 0.0;
    for pair in grid.windows(2) {
        let delta = (pair[1] - pair[0]) / substeps as f64;
        for s in 0..substeps {
            let mid = pair[0] + (s as f64 + 0.5) * delta;
            let step = expm_hermitian(&w.hamiltonian(sys, mid), delta)?;
            u = step.matmul(&u);
        }
        defect = defect.max(u.unitarity_defect());
        unitaries.push(u.clone());
    }
    Ok(EffectivePropagator {
        times: grid.to_vec(),
        unitaries,
        diagnostics: StepDiagnostics {
            substeps,
            error_estimate: f64::NAN,
            max_unitarity_defect: defect,
        },
    })
}

fn max_grid_diff(a: &EffectivePropagator, b: &EffectivePropagator) -> f64 {
    a.unitaries
        .iter()
        .zip(&b.unitaries)
        .fold(0.0_f64, |m, (x, y)| m.max(x.max_abs_diff(y)))
}

/// Solves `i U' = H_eff(t) U`, doubling the steps per interval until the
/// step-halving estimate `max_k |U_s(t_k) − U_{2s}(t_k)| / 3` is at most [`STEP_TOL`].
pub fn propagate_effective(sys: &SystemModel, w: &EffectivePotential, grid: &[f64]) -> Result<EffectivePropagator> {
    let mut coarse = propagate_fixed(sys, w, grid, 1)?;
    let mut substeps = 1;
    let mut last = f64::INFINITY;
    while substeps < MAX_SUBSTEPS {
        substeps *= 2;
        let mut fine = propagate_fixed(sys, w, grid, substeps)?;
        let est = max_grid_diff(&coarse, &fine) / 3.0;
        last = est;
        if est <= STEP_TOL {
            if fine.diagnostics.max_unitarity_defect > PROPAGATOR_UNITARY_TOL {
                return Err(Error::NonConvergence {
                    what: "effective propagator unitarity",
                    achieved: fine.diagnostics.max_unitarity_defect,
                    required: PROPAGATOR_UNITARY_TOL,
                });
            }
            fine.diagnostics.error_estimate = est;
            return Ok(fine);
        }
        coarse = fine;
    }
    Err(Error::NonConvergence {
        what: "effective propagator step halving",
        achieved: last,
        required: STEP_TOL,
    })
}

/// Local data of subsystem `f`: Hamiltonian part, couplings and their potentials.
fn local_system(sys: &SystemModel, w: &EffectivePotential, f: usize, h_parts: &[Operator], factors: &[usize]) -> Result<(SystemModel, EffectivePotential)> {
    let mut couplings = Vec::new();
    let mut terms = Vec::new();
    for (j, c) in sys.couplings.iter().enumerate() {
        if factors[j] == f {
            let g = local_factor(&c.g, f)?.expect("coupling locality checked");
            couplings.push(crate::model::Coupling::new(g, c.interaction));
            terms.push(w.terms[j].clone());
        }
    }
    Ok((SystemModel::new(h_parts[f].clone(), couplings)?, EffectivePotential::new(terms)))
}

/// Product propagator `U_1(t) ⊗ ⋯ ⊗ U_N(t)` for subsystems with local couplings.
pub fn propagate_subsystems(sys: &SystemModel, w: &EffectivePotential, grid: &[f64]) -> Result<EffectivePropagator> {
    w.check(sys)?;
    let factors = sys.coupling_factors()?;
    let h_parts = split_local_sum(&sys.h_sys)?.ok_or_else(|| {
        Error::InvalidArgument("system Hamiltonian couples subsystem factors".into())
    })?;
    let systems = (0..sys.subsystem_dims.len())
        .map(|f| local_system(sys, w, f, &h_parts, &factors))
        .collect::<Result<Vec<_>>>()?;
    // All factors share the finest step any of them needs, so the product is the
    // joint midpoint propagator at that step.
    let adaptive = systems
        .iter()
        .map(|(local, lw)| propagate_effective(local, lw, grid))
        .collect::<Result<Vec<_>>>()?;
    let substeps = adaptive.iter().map(|p| p.diagnostics.substeps).max().unwrap_or(1);
    let locals = systems
        .iter()
        .zip(&adaptive)
        .map(|((local, lw), p)| {
            if p.diagnostics.substeps == substeps {
                Ok(p.clone())
            } else {
                propagate_fixed(local, lw, grid, substeps)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let unitaries: Vec<Operator> = (0..grid.len())
        .map(|k| {
            let refs: Vec<&Operator> = locals.iter().map(|p| &p.unitaries[k]).collect();
            kron_all(&refs)
        })
        .collect();
    let defect = unitaries.iter().fold(0.0_f64, |m, u| m.max(u.unitarity_defect()));
    Ok(EffectivePropagator {
        times: grid.to_vec(),
        unitaries,
        diagnostics: StepDiagnostics {
            substeps,
            error_estimate: adaptive.iter().map(|p| p.diagnostics.error_estimate).sum(),
            max_unitarity_defect: defect,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrajectoryDiagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_drift: f64,
    pub max_unitarity_defect: f64,
    /// Reservoir weight discarded when decomposing into pure branches.
    pub mass_defect: f64,
}

/// Reduced system trajectory on a time grid.
#[derive(Clone, Debug)]
pub struct PropagationResult {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub diagnostics: TrajectoryDiagnostics,
}

const TRAJECTORY_MAGIC: &[u8; 4] = b"MFTR";
const TRAJECTORY_VERSION: u32 = 1;

impl PropagationResult {
    pub fn from_states(times: Vec<f64>, states: Vec<DensityMatrix>, unitarity_defect: f64, mass_defect: f64) -> Self {
        let mut diagnostics = TrajectoryDiagnostics {
            max_unitarity_defect: unitarity_defect,
            mass_defect,
            ..Default::default()
        };
        for s in &states {
            let tr = s.op().trace();
            diagnostics.max_trace_drift = diagnostics.max_trace_drift.max((tr.re - 1.0).abs().max(tr.im.abs()));
            diagnostics.max_hermiticity_drift = diagnostics.max_hermiticity_drift.max(s.op().hermiticity_deviation());
        }
        Self {
            times,
            states,
            diagnostics,
        }
    }

    /// Rows `t, <name>_re, <name>_im…, purity, trace_drift`.
    pub fn write_csv<W: Write>(&self, w: W, observables: &[(&str, &Operator)]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for (name, _) in observables {
            header.push(format!("{name}_re"));
            header.push(format!("{name}_im"));
        }
        header.push("purity".into());
        header.push("trace_drift".into());
        out.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut rec = vec![crate::fmt_f64(*t)];
            for (_, x) in observables {
                let e = s.expectation(x);
                rec.push(crate::fmt_f64(e.re));
                rec.push(crate::fmt_f64(e.im));
            }
            rec.push(crate::fmt_f64(s.purity()));
            rec.push(crate::fmt_f64(s.op().trace().re - 1.0));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Layout: `"MFTR"`, u32 version, u32 count, then per sample an f64 time and an
    /// operator in the binary operator format. Little-endian throughout.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TRAJECTORY_MAGIC)?;
        w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
        w.write_all(&(self.states.len() as u32).to_le_bytes())?;
        for (t, s) in self.times.iter().zip(&self.states) {
            w.write_all(&t.to_le_bytes())?;
            s.op().write_binary(w)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRAJECTORY_MAGIC {
            return Err(Error::Parse("not a trajectory file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != TRAJECTORY_VERSION {
            return Err(Error::Parse("unsupported trajectory version".into()));
        }
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        let mut times = Vec::with_capacity(count);
        let mut states = Vec::with_capacity(count);
        for _ in 0..count {
            let mut tb = [0u8; 8];
            r.read_exact(&mut tb)?;
            times.push(f64::from_le_bytes(tb));
            states.push(DensityMatrix::new(Operator::read_binary(r)?)?);
        }
        Ok(Self::from_states(times, states, 0.0, 0.0))
    }

    /// `max_k ½‖ρ(t_k) − σ(t_k)‖₁` against another trajectory on the same grid.
    pub fn max_trace_distance(&self, other: &PropagationResult) -> Result<f64> {
        if self.states.len() != other.states.len() {
            return Err(Error::DimensionMismatch("trajectories differ in length".into()));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| 0.5 * trace_norm(&(a.op() - b.op())))
            .fold(0.0, f64::max))
    }
}

/// `ρ(t_k) = U(t_k) ρ_0 U(t_k)†`.
pub fn evolve_state(u: &EffectivePropagator, rho0: &DensityMatrix) -> Result<PropagationResult> {
    if rho0.dim() != u.unitaries[0].dim() {
        return Err(Error::DimensionMismatch("initial state and propagator differ in dimension".into()));
    }
    let rho0 = DensityMatrix::new(rho0.op().clone().with_dims(u.unitaries[0].dims().to_vec())?)?;
    let states = u.unitaries.iter().map(|x| rho0.evolve(x)).collect();
    Ok(PropagationResult::from_states(
        u.times.clone(),
        states,
        u.diagnostics.max_unitarity_defect,
        0.0,
    ))
}

/// `ρ(t) = Σ_k w_k U_k(t) ρ_0 U_k(t)†` with one propagator per atom.
pub fn propagate_definetti(
    sys: &SystemModel,
    atoms: &[(f64, EffectivePotential)],
    rho0: &DensityMatrix,
    grid: &[f64],
) -> Result<PropagationResult> {
    let total: f64 = atoms.iter().map(|a| a.0).sum();
    if atoms.is_empty() || atoms.iter().any(|a| !(a.0 >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "atom weights must be nonnegative and sum to 1 (sum {total})"
        )));
    }
    let orbits = atoms
        .par_iter()
        .map(|(_, w)| evolve_state(&propagate_effective(sys, w, grid)?, rho0))
        .collect::<Result<Vec<_>>>()?;
    let defect = orbits.iter().fold(0.0_f64, |m, o| m.max(o.diagnostics.max_unitarity_defect));
    let states = (0..grid.len())
        .map(|k| {
            let parts: Vec<(f64, &DensityMatrix)> = atoms.iter().map(|a| a.0).zip(orbits.iter().map(|o| &o.states[k])).collect();
            DensityMatrix::mixture(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagationResult::from_states(grid.to_vec(), states, defect, 0.0))
}

/// Limit trajectory of the reduced system state for any reservoir ensemble.
pub fn limit_trajectory(
    sys: &SystemModel,
    site: &SiteModel,
    state: &ReservoirEnsembleState,
    rho0: &DensityMatrix,
    grid: &[f64],
) -> Result<PropagationResult> {
    match state {
        ReservoirEnsembleState::DeFinetti(_) => {
            propagate_definetti(sys, &definetti_potentials(state, site, sys)?, rho0, grid)
        }
        _ => {
            let w = effective_potential(state, site, sys)?;
            let u = if sys.subsystem_dims.len() > 1 {
                propagate_subsystems(sys, &w, grid)?
            } else {
                propagate_effective(sys, &w, grid)?
            };
            evolve_state(&u, rho0)
        }
    }
}
