//! Finite-M reference dynamics on `system ⊗ site^{⊗M}`, the truncated Dyson
//! series, and the finite-M versus limit gap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::effective::{limit_trajectory, PropagationResult};
use crate::error::{Error, Result};
use crate::model::{total_terms, Hamiltonian, SiteModel, SystemModel, TermKind, TermList, DENSE_CUTOFF};
use crate::operator::{c64, partial_trace_op, trace_norm, CMatrix, CVector, DensityMatrix, Operator, Spectral};
use crate::quadrature::gauss_legendre;
use crate::reservoir::ReservoirEnsembleState;

/// Largest joint dimension handled by the Krylov path.
pub const KRYLOV_LIMIT: usize = 200_000;
/// Branch cap for the Krylov path.
pub const MAX_BRANCHES: usize = 16;
/// Reservoir branches lighter than this are dropped on the Krylov path.
pub const MIN_BRANCH_WEIGHT: f64 = 1e-8;
/// Branch cap on the dense path before falling back to density-matrix evolution.
const DENSE_MAX_BRANCHES: usize = 256;
const KRYLOV_TOL: f64 = 1e-12;
const KRYLOV_DIM: usize = 30;

/// Inputs of one finite-M run.
#[derive(Clone, Debug)]
pub struct FiniteMRun {
    pub sys: SystemModel,
    pub site: SiteModel,
    pub sites: usize,
    pub rho_s0: DensityMatrix,
    pub reservoir: ReservoirEnsembleState,
    pub grid: Vec<f64>,
}

impl FiniteMRun {
    pub fn joint_dim(&self) -> usize {
        self.sys.dim().saturating_mul(self.site.dim.saturating_pow(self.sites as u32))
    }
}

fn reservoir_dim(run: &FiniteMRun) -> usize {
    run.site.dim.pow(run.sites as u32)
}

/// `Ψ Ψ†` for `ψ` reshaped as a `d_S × d_R` matrix (system factor outermost).
fn reduce_pure(psi: &CVector, d_s: usize, d_r: usize) -> CMatrix {
    let m = CMatrix::from_fn(d_s, d_r, |s, r| psi[s * d_r + r]);
    &m * m.adjoint()
}

fn system_branches(rho: &DensityMatrix) -> Result<Vec<(f64, CVector)>> {
    let sp = Spectral::new(rho.op())?;
    Ok((0..sp.values.len())
        .filter(|&j| sp.values[j] > 1e-14)
        .map(|j| (sp.values[j], sp.vectors.column(j).into_owned()))
        .collect())
}

fn finish(run: &FiniteMRun, reduced: Vec<CMatrix>, mass_defect: f64) -> Result<PropagationResult> {
    let dims = run.sys.subsystem_dims.clone();
    let states = reduced
        .into_iter()
        .map(|m| {
            let tr = m.trace();
            let m = if mass_defect > 0.0 { m / tr } else { m };
            DensityMatrix::new(Operator::new(m, dims.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagationResult::from_states(run.grid.clone(), states, 0.0, mass_defect))
}

fn validate(run: &FiniteMRun) -> Result<()> {
    if run.rho_s0.dim() != run.sys.dim() {
        return Err(Error::DimensionMismatch("initial system state and system model differ".into()));
    }
    if run.reservoir.site_dim() != run.site.dim {
        return Err(Error::DimensionMismatch("reservoir state and site model differ".into()));
    }
    if run.grid.is_empty() || run.grid.windows(2).any(|w| !(w[1] > w[0])) || run.grid[0] < 0.0 {
        return Err(Error::InvalidArgument("time grid must be nonnegative and strictly increasing".into()));
    }
    Ok(())
}

/// `ρ_S^{(M)}(t_k) = Tr_R(e^{−itH_M} ρ_S ⊗ ρ_{R,M} e^{itH_M})`.
///
/// Up to [`DENSE_CUTOFF`] the joint Hamiltonian is diagonalized once; beyond it and
/// up to [`KRYLOV_LIMIT`] pure branches are evolved by Lanczos exponentials.
pub fn propagate_exact(run: &FiniteMRun) -> Result<PropagationResult> {
    validate(run)?;
    let dim = run.joint_dim();
    if dim > KRYLOV_LIMIT {
        return Err(Error::SizeOverflow {
            what: "exact propagation",
            dim,
            limit: KRYLOV_LIMIT,
        });
    }
    let h = crate::model::assemble_total(&run.sys, &run.site, run.sites)?;
    match h {
        Hamiltonian::Dense(op) => propagate_dense(run, &op),
        Hamiltonian::Terms(terms) => propagate_krylov(run, &terms),
    }
}

fn propagate_dense(run: &FiniteMRun, h: &Operator) -> Result<PropagationResult> {
    let d_s = run.sys.dim();
    let d_r = reservoir_dim(run);
    let sp = Spectral::new(h)?;
    let sys_branches = system_branches(&run.rho_s0)?;
    let res_branches = run
        .reservoir
        .pure_branches(run.sites, DENSE_MAX_BRANCHES / sys_branches.len().max(1), 0.0)?;
    let Some((res_branches, _)) = res_branches else {
        return propagate_dense_mixed(run, &sp);
    };
    let pairs: Vec<(f64, CVector)> = sys_branches
        .iter()
        .flat_map(|(ws, phi)| res_branches.iter().map(move |(wr, chi)| (ws * wr, phi.kronecker(chi))))
        .collect();
    let vectors = &sp.vectors;
    let values = &sp.values;
    let reduced = run
        .grid
        .par_iter()
        .map(|&t| {
            let mut acc = CMatrix::zeros(d_s, d_s);
            for (w, psi0) in &pairs {
                let mut c = vectors.ad_mul(psi0);
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj *= Complex64::from_polar(1.0, -t * values[j]);
                }
                let psi = vectors * c;
                acc += reduce_pure(&psi, d_s, d_r) * c64(*w, 0.0);
            }
            acc
        })
        .collect::<Vec<_>>();
    finish(run, reduced, 0.0)
}

fn propagate_dense_mixed(run: &FiniteMRun, sp: &Spectral) -> Result<PropagationResult> {
    let rho_r = run.reservoir.materialize(run.sites)?;
    let rho0 = run.rho_s0.data().kronecker(rho_r.data());
    let v = &sp.vectors;
    let rotated = v.adjoint() * rho0 * v;
    let n = rotated.nrows();
    let dims = {
        let mut d = vec![run.sys.dim()];
        d.extend(vec![run.site.dim; run.sites]);
        d
    };
    let reduced = run
        .grid
        .par_iter()
        .map(|&t| {
            let phase: Vec<Complex64> = sp.values.iter().map(|l| Complex64::from_polar(1.0, -t * l)).collect();
            let evolved = CMatrix::from_fn(n, n, |a, b| rotated[(a, b)] * phase[a] * phase[b].conj());
            let rho = v * evolved * v.adjoint();
            let op = Operator::new(rho, dims.clone())?;
            Ok(partial_trace_op(&op, &[0])?.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    finish(run, reduced, 0.0)
}

/// `e^{−iτH} ψ` by Lanczos with full reorthogonalization and step subdivision.
pub fn krylov_expm<F>(apply: &F, psi: &CVector, tau: f64, tol: f64) -> Result<CVector>
where
    F: Fn(&CVector) -> CVector,
{
    let mut out = psi.clone();
    let mut remaining = tau;
    let mut step = tau;
    let mut guard = 0;
    while remaining > 0.0 {
        guard += 1;
        if guard > 100_000 {
            return Err(Error::NonConvergence {
                what: "Krylov exponential",
                achieved: f64::NAN,
                required: tol,
            });
        }
        let h = step.min(remaining);
        let (next, err) = lanczos_step(apply, &out, h)?;
        if err <= tol * (h / tau.max(1e-300)).max(1e-3) {
            out = next;
            remaining -= h;
            if err < 1e-3 * tol {
                step *= 2.0;
            }
        } else {
            step = h / 2.0;
            if step < 1e-12 * tau.max(1.0) {
                return Err(Error::NonConvergence {
                    what: "Krylov exponential",
                    achieved: err,
                    required: tol,
                });
            }
        }
    }
    Ok(out)
}

fn lanczos_step<F>(apply: &F, psi: &CVector, tau: f64) -> Result<(CVector, f64)>
where
    F: Fn(&CVector) -> CVector,
{
    let beta0 = psi.norm();
    if beta0 == 0.0 {
        return Ok((psi.clone(), 0.0));
    }
    let mut basis: Vec<CVector> = vec![psi / c64(beta0, 0.0)];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut tail_beta = 0.0;
    for j in 0..KRYLOV_DIM.min(psi.len()) {
        let mut w = apply(&basis[j]);
        let a = basis[j].dotc(&w).re;
        alpha.push(a);
        for v in &basis {
            let proj = v.dotc(&w);
            w.axpy(-proj, v, c64(1.0, 0.0));
        }
        let b = w.norm();
        tail_beta = b;
        if b < 1e-13 * (a.abs() + 1.0) || j + 1 == KRYLOV_DIM.min(psi.len()) {
            break;
        }
        beta.push(b);
        basis.push(w / c64(b, 0.0));
    }
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let first = eig.eigenvectors.row(0).transpose();
    let coeffs: DVector<Complex64> = DVector::from_fn(m, |i, _| {
        (0..m).fold(c64(0.0, 0.0), |acc, k| {
            acc + Complex64::from_polar(1.0, -tau * eig.eigenvalues[k]) * eig.eigenvectors[(i, k)] * first[k]
        })
    });
    let mut out = CVector::zeros(psi.len());
    for (v, c) in basis.iter().zip(coeffs.iter()) {
        out.axpy(c * beta0, v, c64(1.0, 0.0));
    }
    let err = beta0 * tail_beta * coeffs[m - 1].norm() * tau;
    let err = if tail_beta < 1e-13 { 0.0 } else { err };
    Ok((out, err))
}

fn propagate_krylov(run: &FiniteMRun, terms: &TermList) -> Result<PropagationResult> {
    let d_s = run.sys.dim();
    let d_r = reservoir_dim(run);
    let sys_branches = system_branches(&run.rho_s0)?;
    let budget = (MAX_BRANCHES / sys_branches.len().max(1)).max(1);
    let (res_branches, dropped) = run
        .reservoir
        .pure_branches(run.sites, budget, MIN_BRANCH_WEIGHT)?
        .ok_or(Error::SizeOverflow {
            what: "reservoir branch decomposition",
            dim: budget + 1,
            limit: budget,
        })?;
    let pairs: Vec<(f64, CVector)> = sys_branches
        .iter()
        .flat_map(|(ws, phi)| res_branches.iter().map(move |(wr, chi)| (ws * wr, phi.kronecker(chi))))
        .collect();
    let apply = |v: &CVector| terms.apply(v);
    let trajectories = pairs
        .par_iter()
        .map(|(w, psi0)| {
            let mut psi = psi0.clone();
            let mut t_prev = 0.0;
            let mut out = Vec::with_capacity(run.grid.len());
            for &t in &run.grid {
                if t > t_prev {
                    psi = krylov_expm(&apply, &psi, t - t_prev, KRYLOV_TOL)?;
                    t_prev = t;
                }
                out.push(reduce_pure(&psi, d_s, d_r) * c64(*w, 0.0));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let reduced = (0..run.grid.len())
        .map(|k| trajectories.iter().fold(CMatrix::zeros(d_s, d_s), |acc, tr| acc + &tr[k]))
        .collect();
    finish(run, reduced, dropped)
}

/// Joint density matrix `ρ_S ⊗ ρ_{R,M}` and the split `H_M = H_0 + V`.
fn interaction_picture_data(
    sys: &SystemModel,
    site: &SiteModel,
    state: &ReservoirEnsembleState,
    sites: usize,
    rho_s: &DensityMatrix,
) -> Result<(CMatrix, Operator, Operator)> {
    let terms = total_terms(sys, site, sites)?;
    if terms.dim() > DENSE_CUTOFF {
        return Err(Error::SizeOverflow {
            what: "Dyson series",
            dim: terms.dim(),
            limit: DENSE_CUTOFF,
        });
    }
    let h0 = terms.filtered(&[TermKind::System, TermKind::Reservoir]).to_dense()?;
    let v = terms.filtered(&[TermKind::Interaction]).to_dense()?;
    let rho = rho_s.data().kronecker(state.materialize(sites)?.data());
    Ok((rho, h0, v))
}

/// Partial sums `Σ_{k≤n} (−i)^k X_k(t)` of the interaction-picture series, in the
/// eigenbasis of `H_0`, with `X_k(s) = ∫_0^s [V_I(u), X_{k−1}(u)] du` by nested
/// `nodes`-point Gauss–Legendre rules.
fn dyson_terms(v_eig: &CMatrix, lambda: &[f64], rho_eig: &CMatrix, order: usize, t: f64, nodes: usize) -> Vec<CMatrix> {
    let (x, w) = gauss_legendre(nodes);
    let n = lambda.len();
    let v_at = |u: f64| {
        let phase: Vec<Complex64> = lambda.iter().map(|l| Complex64::from_polar(1.0, u * l)).collect();
        CMatrix::from_fn(n, n, |a, b| v_eig[(a, b)] * phase[a] * phase[b].conj())
    };
    fn rec(
        k: usize,
        s: f64,
        x: &[f64],
        w: &[f64],
        rho: &CMatrix,
        v_at: &dyn Fn(f64) -> CMatrix,
    ) -> CMatrix {
        if k == 0 {
            return rho.clone();
        }
        let mut acc = CMatrix::zeros(rho.nrows(), rho.ncols());
        for (xi, wi) in x.iter().zip(w) {
            let u = 0.5 * s * (1.0 + xi);
            let inner = rec(k - 1, u, x, w, rho, v_at);
            let vu = v_at(u);
            acc += (&vu * &inner - &inner * &vu) * c64(wi * 0.5 * s, 0.0);
        }
        acc
    }
    (0..=order).map(|k| rec(k, t, &x, &w, rho_eig, &v_at)).collect()
}

/// Truncated Dyson approximation of `ρ_S^{(M)}(t)` up to order `n_max ≤ 4`.
///
/// The truncated series is Hermitian with unit trace but not positive in general,
/// so the result is an [`Operator`].
pub fn dyson_truncated(
    sys: &SystemModel,
    site: &SiteModel,
    state: &ReservoirEnsembleState,
    sites: usize,
    rho_s: &DensityMatrix,
    n_max: usize,
    t: f64,
) -> Result<Operator> {
    if n_max > 4 {
        return Err(Error::InvalidArgument("Dyson order is limited to 4".into()));
    }
    let (rho, h0, v) = interaction_picture_data(sys, site, state, sites, rho_s)?;
    let sp = Spectral::new(&h0)?;
    let basis = &sp.vectors;
    let v_eig = basis.adjoint() * v.data() * basis;
    let rho_eig = basis.adjoint() * &rho * basis;
    let lambda: Vec<f64> = sp.values.iter().copied().collect();

    let sum = |terms: &[CMatrix]| {
        terms.iter().enumerate().fold(CMatrix::zeros(rho.nrows(), rho.ncols()), |acc, (k, x)| {
            acc + x * c64(0.0, -1.0).powu(k as u32)
        })
    };
    let mut nodes = 8;
    let mut current = sum(&dyson_terms(&v_eig, &lambda, &rho_eig, n_max, t, nodes));
    loop {
        nodes *= 2;
        let next = sum(&dyson_terms(&v_eig, &lambda, &rho_eig, n_max, t, nodes));
        let change = (&next - &current).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        current = next;
        if change < 1e-8 {
            break;
        }
        if nodes >= 32 {
            return Err(Error::NonConvergence {
                what: "Dyson quadrature",
                achieved: change,
                required: 1e-8,
            });
        }
    }
    let rho_i = basis * current * basis.adjoint();
    let mut dims = vec![sys.dim()];
    dims.extend(vec![site.dim; sites]);
    let reduced = partial_trace_op(&Operator::new(rho_i, dims)?, &[0])?;
    let u = crate::operator::expm_hermitian(&sys.h_sys, t)?;
    let out = reduced.conjugate_by(&u.with_dims(vec![sys.dim()])?);
    out.with_dims(sys.subsystem_dims.clone())
}

/// `½‖ρ_S^{(M)}(t_k) − ρ_S^{eff}(t_k)‖₁` along the grid.
pub fn convergence_gap(
    sys: &SystemModel,
    site: &SiteModel,
    state: &ReservoirEnsembleState,
    sites: usize,
    rho0: &DensityMatrix,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let run = FiniteMRun {
        sys: sys.clone(),
        site: site.clone(),
        sites,
        rho_s0: rho0.clone(),
        reservoir: state.clone(),
        grid: grid.to_vec(),
    };
    let exact = propagate_exact(&run)?;
    let limit = limit_trajectory(sys, site, state, rho0, grid)?;
    Ok(exact
        .states
        .iter()
        .zip(&limit.states)
        .map(|(a, b)| 0.5 * trace_norm(&(a.op() - b.op())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::uniform_grid;
    use crate::model::{assemble_total, Coupling, InteractionId};
    use crate::operator::{embed_at_site, expm_hermitian, kron, pauli, site_permutation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plus() -> DensityMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DensityMatrix::pure(&CVector::from_vec(vec![c64(s, 0.0), c64(s, 0.0)]), vec![2]).unwrap()
    }

    fn qubit_run(sites: usize, grid: Vec<f64>) -> FiniteMRun {
        FiniteMRun {
            sys: SystemModel::new(pauli::z(), vec![Coupling::new(pauli::x(), InteractionId::Site(0))]).unwrap(),
            site: SiteModel::new(pauli::z(), vec![pauli::x()]).unwrap(),
            sites,
            rho_s0: DensityMatrix::basis(2, 0).unwrap(),
            reservoir: ReservoirEnsembleState::product(plus()),
            grid,
        }
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> Operator {
        let a = CMatrix::from_fn(n, n, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        Operator::hermitian((&a + a.adjoint()) * c64(0.5, 0.0), vec![n]).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d: usize) -> DensityMatrix {
        let a = CMatrix::from_fn(d, d, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let p = &a * a.adjoint();
        let tr = p.trace();
        DensityMatrix::from_matrix(p / tr, vec![d]).unwrap()
    }

    #[test]
    fn uncoupled_run_is_free_evolution() {
        let mut run = qubit_run(3, uniform_grid(1.0, 0.1));
        run.sys = run.sys.scaled_couplings(0.0);
        run.rho_s0 = plus();
        let out = propagate_exact(&run).unwrap();
        for (t, rho) in run.grid.iter().zip(&out.states) {
            let u = expm_hermitian(&pauli::z(), *t).unwrap();
            assert!(rho.op().max_abs_diff(plus().evolve(&u).op()) < 1e-12);
        }
    }

    #[test]
    fn single_site_matches_direct_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut run = qubit_run(1, uniform_grid(2.0, 0.25));
        run.rho_s0 = random_state(&mut rng, 2);
        run.reservoir = ReservoirEnsembleState::product(random_state(&mut rng, 2));
        let out = propagate_exact(&run).unwrap();
        // Hand-assembled 4×4 Hamiltonian, joint density-matrix evolution, explicit partial trace.
        let h = &(&kron(&pauli::z(), &Operator::identity(&[2])) + &kron(&Operator::identity(&[2]), &pauli::z()))
            + &kron(&pauli::x(), &pauli::x());
        let rho0 = run.rho_s0.tensor(&run.reservoir.materialize(1).unwrap());
        for (t, rho) in run.grid.iter().zip(&out.states) {
            let joint = rho0.evolve(&expm_hermitian(&h, *t).unwrap());
            let d = joint.data();
            let reduced = CMatrix::from_fn(2, 2, |a, b| d[(2 * a, 2 * b)] + d[(2 * a + 1, 2 * b + 1)]);
            assert!((rho.data() - reduced).iter().all(|z| z.norm() < 1e-10));
        }
    }

    #[test]
    fn reservoir_observables_conserved_without_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let site = SiteModel::new(pauli::z(), vec![pauli::z()]).unwrap();
        let sys = SystemModel::new(random_hermitian(&mut rng, 2), vec![Coupling::new(Operator::zeros(&[2]), InteractionId::Site(0))]).unwrap();
        let h = assemble_total(&sys, &site, 3).unwrap();
        let h = h.as_dense().unwrap();
        let rho0 = random_state(&mut rng, 2).tensor(&ReservoirEnsembleState::product(random_state(&mut rng, 2)).materialize(3).unwrap());
        let obs = kron(&Operator::identity(&[2]), &embed_at_site(&pauli::z(), 1, 3, 2).unwrap());
        let e0 = rho0.expectation(&obs);
        for t in [0.3, 1.0, 2.5] {
            let e = rho0.evolve(&expm_hermitian(h, t).unwrap()).expectation(&obs);
            assert!((e - e0).norm() < 1e-12);
        }
    }

    #[test]
    fn dense_branch_and_mixed_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut run = qubit_run(3, uniform_grid(1.0, 0.2));
        run.rho_s0 = random_state(&mut rng, 2);
        run.reservoir = ReservoirEnsembleState::product(random_state(&mut rng, 2));
        let branches = propagate_exact(&run).unwrap();
        let h = assemble_total(&run.sys, &run.site, 3).unwrap();
        let mixed = propagate_dense_mixed(&run, &Spectral::new(h.as_dense().unwrap()).unwrap()).unwrap();
        assert!(branches.max_trace_distance(&mixed).unwrap() < 1e-12);
    }

    #[test]
    fn krylov_path_matches_dense_path() {
        let run = qubit_run(4, uniform_grid(1.0, 0.25));
        let dense = propagate_exact(&run).unwrap();
        let terms = total_terms(&run.sys, &run.site, 4).unwrap();
        let krylov = propagate_krylov(&run, &terms).unwrap();
        assert!(dense.max_trace_distance(&krylov).unwrap() < 1e-10);
    }

    #[test]
    fn krylov_exponential_matches_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let h = random_hermitian(&mut rng, 60).scale(3.0);
        let psi = CVector::from_fn(60, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let psi = &psi / c64(psi.norm(), 0.0);
        let apply = |v: &CVector| h.data() * v;
        let out = krylov_expm(&apply, &psi, 2.0, 1e-12).unwrap();
        let exact = expm_hermitian(&h, 2.0).unwrap().data() * &psi;
        assert!((out - exact).norm() < 1e-9);
    }

    #[test]
    fn large_run_uses_krylov_and_keeps_trace() {
        let mut run = qubit_run(12, vec![0.0, 0.2, 0.4]);
        run.reservoir = ReservoirEnsembleState::product(plus());
        assert!(run.joint_dim() > DENSE_CUTOFF);
        let out = propagate_exact(&run).unwrap();
        for rho in &out.states {
            assert!((rho.op().trace().re - 1.0).abs() < 1e-10);
        }
        assert_eq!(out.diagnostics.mass_defect, 0.0);
    }

    #[test]
    fn joint_purity_and_energy_are_conserved() {
        let run = qubit_run(3, uniform_grid(2.0, 0.25));
        let h = assemble_total(&run.sys, &run.site, 3).unwrap();
        let h = h.as_dense().unwrap();
        let psi0 = CVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)]).kronecker(
            &crate::operator::CVector::from_element(8, c64((1.0_f64 / 8.0).sqrt(), 0.0)),
        );
        let e0 = psi0.dotc(&(h.data() * &psi0)).re;
        for &t in &run.grid {
            let psi = expm_hermitian(h, t).unwrap().data() * &psi0;
            assert!((psi.norm() - 1.0).abs() < 1e-9);
            assert!((psi.dotc(&(h.data() * &psi)).re - e0).abs() < 1e-9);
        }
    }

    #[test]
    fn reduced_dynamics_ignores_site_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut run = qubit_run(3, uniform_grid(1.0, 0.25));
        run.reservoir = ReservoirEnsembleState::definetti(vec![(0.5, random_state(&mut rng, 2)), (0.5, plus())]).unwrap();
        let a = propagate_exact(&run).unwrap();
        // Evolve the relabeled joint state with the dense mixed path.
        let rho_r = run.reservoir.materialize(3).unwrap();
        let p = site_permutation(&[2, 0, 1], 2).unwrap();
        let h = assemble_total(&run.sys, &run.site, 3).unwrap();
        let h = h.as_dense().unwrap();
        let joint0 = run.rho_s0.tensor(&rho_r.evolve(&p));
        for (t, rho) in run.grid.iter().zip(&a.states) {
            let joint = joint0.evolve(&expm_hermitian(h, *t).unwrap());
            let reduced = partial_trace_op(joint.op(), &[0]).unwrap();
            assert!(reduced.max_abs_diff(rho.op()) < 1e-12);
        }
    }

    #[test]
    fn dyson_low_orders() {
        let run = qubit_run(2, vec![]);
        let state = &run.reservoir;
        let t = 0.3;
        let zero = dyson_truncated(&run.sys, &run.site, state, 2, &run.rho_s0, 0, t).unwrap();
        let u = expm_hermitian(&pauli::z(), t).unwrap();
        assert!(zero.max_abs_diff(run.rho_s0.evolve(&u).op()) < 1e-14);

        // First-order term against a fine midpoint rule in the Schrödinger-picture form.
        let first = dyson_truncated(&run.sys, &run.site, state, 2, &run.rho_s0, 1, t).unwrap();
        let (rho, h0, v) = interaction_picture_data(&run.sys, &run.site, state, 2, &run.rho_s0).unwrap();
        let steps = 4000;
        let h = t / steps as f64;
        let mut integral = CMatrix::zeros(8, 8);
        for k in 0..steps {
            let s = (k as f64 + 0.5) * h;
            let e = expm_hermitian(&h0, -s).unwrap();
            let vi = e.data() * v.data() * e.data().adjoint();
            integral += (&vi * &rho - &rho * &vi) * c64(h, 0.0);
        }
        let term = partial_trace_op(&Operator::new(integral * c64(0.0, -1.0), vec![2, 2, 2]).unwrap(), &[0]).unwrap();
        let expected = &run.rho_s0.evolve(&u).op().clone() + &term.conjugate_by(&u);
        assert!(first.max_abs_diff(&expected) < 1e-8);
    }

    #[test]
    fn dyson_error_shrinks_with_order() {
        let run = qubit_run(2, vec![0.0, 0.3]);
        let exact = propagate_exact(&run).unwrap();
        let target = exact.states[1].op();
        let gaps: Vec<f64> = (0..=4)
            .map(|n| {
                let d = dyson_truncated(&run.sys, &run.site, &run.reservoir, 2, &run.rho_s0, n, 0.3).unwrap();
                trace_norm(&(&d - target))
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    }

    #[test]
    fn zero_coupling_gap_vanishes() {
        let run = qubit_run(3, uniform_grid(1.0, 0.1));
        let sys = run.sys.scaled_couplings(0.0);
        let gap = convergence_gap(&sys, &run.site, &run.reservoir, 3, &run.rho_s0, &run.grid).unwrap();
        assert!(gap.iter().all(|g| *g < 1e-7));
    }
}
