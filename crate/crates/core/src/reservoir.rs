//! Reservoir ensemble states, single-site potentials, multi-time moments of
//! mean-field averages and the moment bounds.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{SiteModel, DENSE_CUTOFF};
use crate::operator::{
    c64, embed_at_site, embed_at_sites, kron_all, trace_of_product, CMatrix, CVector, DensityMatrix, Operator,
    Spectral,
};

/// Tolerance on weights and fractions summing to one.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Tolerance on `Σ K†K = 1`.
pub const KRAUS_TOL: f64 = 1e-10;
/// Imaginary residue of a real expectation value that is silently discarded.
pub const IMAG_TOL: f64 = 1e-10;
/// Site eigenvalues at or below this are roundoff when splitting a state into pure branches.
const BRANCH_FLOOR: f64 = 1e-14;

#[derive(Clone, Debug)]
pub enum ReservoirEnsembleState {
    /// `ρ^{⊗M}`.
    Product(DensityMatrix),
    /// Position average of `ρ^{⊗j} ⊗ E(ρ^{⊗L}) ⊗ ρ^{⊗(M−L−j)}`.
    ChannelCorrelated {
        site_state: DensityMatrix,
        l: usize,
        kraus: Vec<CMatrix>,
    },
    /// `Σ_k w_k σ_k^{⊗M}`.
    DeFinetti(Vec<(f64, DensityMatrix)>),
    /// `⊗_k σ_k^{⊗M_k}` with `M_k/M → λ_k`.
    Macroscopic(Vec<(f64, DensityMatrix)>),
}

fn check_weights(parts: &[(f64, DensityMatrix)], what: &str) -> Result<()> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("{what}: no components")))?;
    if parts.iter().any(|(_, s)| s.dim() != first.1.dim()) {
        return Err(Error::DimensionMismatch(format!("{what}: components differ in dimension")));
    }
    let total: f64 = parts.iter().map(|(w, _)| *w).sum();
    if parts.iter().any(|(w, _)| !(*w >= 0.0)) || (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidArgument(format!(
            "{what}: weights must be nonnegative and sum to 1 (sum {total})"
        )));
    }
    Ok(())
}

impl ReservoirEnsembleState {
    pub fn product(site_state: DensityMatrix) -> Self {
        Self::Product(site_state)
    }

    pub fn channel_correlated(site_state: DensityMatrix, l: usize, kraus: Vec<CMatrix>) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument("correlation length must be at least 1".into()));
        }
        let d = site_state.dim().pow(l as u32);
        if kraus.is_empty() || kraus.iter().any(|k| k.nrows() != d || k.ncols() != d) {
            return Err(Error::DimensionMismatch(format!(
                "Kraus operators must be {d}x{d} for L={l} sites"
            )));
        }
        let sum = kraus.iter().fold(CMatrix::zeros(d, d), |acc, k| acc + k.adjoint() * k);
        let defect = (sum - CMatrix::identity(d, d)).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        if defect > KRAUS_TOL {
            return Err(Error::InvalidArgument(format!(
                "Kraus operators are not trace preserving (defect {defect:.3e})"
            )));
        }
        Ok(Self::ChannelCorrelated { site_state, l, kraus })
    }

    /// Bell-pair channel on two qubit sites: `K = CNOT·(H⊗1)`, which maps `|00⟩` to `(|00⟩+|11⟩)/√2`.
    pub fn bell_channel(site_state: DensityMatrix) -> Result<Self> {
        if site_state.dim() != 2 {
            return Err(Error::DimensionMismatch("Bell channel needs qubit sites".into()));
        }
        Self::channel_correlated(site_state, 2, vec![bell_kraus()])
    }

    pub fn definetti(atoms: Vec<(f64, DensityMatrix)>) -> Result<Self> {
        check_weights(&atoms, "De Finetti mixture")?;
        Ok(Self::DeFinetti(atoms))
    }

    pub fn macroscopic(parts: Vec<(f64, DensityMatrix)>) -> Result<Self> {
        check_weights(&parts, "macroscopic partition")?;
        Ok(Self::Macroscopic(parts))
    }

    pub fn site_dim(&self) -> usize {
        match self {
            Self::Product(s) => s.dim(),
            Self::ChannelCorrelated { site_state, .. } => site_state.dim(),
            Self::DeFinetti(p) | Self::Macroscopic(p) => p[0].1.dim(),
        }
    }

    /// Single-site state governing the limit dynamics. Not defined for De Finetti
    /// mixtures, whose limit is a mixture of unitary orbits.
    pub fn effective_site_state(&self) -> Result<DensityMatrix> {
        match self {
            Self::Product(s) => Ok(s.clone()),
            Self::ChannelCorrelated { site_state, .. } => Ok(site_state.clone()),
            Self::Macroscopic(parts) => {
                let refs: Vec<(f64, &DensityMatrix)> = parts.iter().map(|(w, s)| (*w, s)).collect();
                DensityMatrix::mixture(&refs)
            }
            Self::DeFinetti(_) => Err(Error::InvalidArgument(
                "a De Finetti state has no single effective site state; iterate over its atoms".into(),
            )),
        }
    }

    /// Dense density matrix on `sites` reservoir factors.
    pub fn materialize(&self, sites: usize) -> Result<DensityMatrix> {
        if sites == 0 {
            return Err(Error::InvalidArgument("number of reservoir sites must be at least 1".into()));
        }
        let d = self.site_dim();
        if d.checked_pow(sites as u32).is_none_or(|n| n > DENSE_CUTOFF) {
            return Err(Error::SizeOverflow {
                what: "materialized reservoir state",
                dim: d.saturating_pow(sites as u32),
                limit: DENSE_CUTOFF,
            });
        }
        match self {
            Self::Product(s) => Ok(tensor_power(s, sites)),
            Self::ChannelCorrelated { site_state, l, kraus } => build_channel_correlated(site_state, *l, kraus, sites),
            Self::DeFinetti(atoms) => {
                let powers: Vec<DensityMatrix> = atoms.iter().map(|(_, s)| tensor_power(s, sites)).collect();
                let refs: Vec<(f64, &DensityMatrix)> = atoms.iter().map(|(w, _)| *w).zip(powers.iter()).collect();
                DensityMatrix::mixture(&refs)
            }
            Self::Macroscopic(parts) => {
                let assignment = self.site_types(sites)?;
                let states: Vec<&DensityMatrix> = assignment.iter().map(|&k| &parts[k].1).collect();
                let mut acc = states[0].clone();
                for s in &states[1..] {
                    acc = acc.tensor(s);
                }
                Ok(acc)
            }
        }
    }

    /// For a macroscopic state, the component index of every site (contiguous blocks).
    pub fn site_types(&self, sites: usize) -> Result<Vec<usize>> {
        match self {
            Self::Macroscopic(parts) => {
                let fractions: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
                let counts = macroscopic_counts(&fractions, sites);
                Ok(counts
                    .iter()
                    .enumerate()
                    .flat_map(|(k, &c)| std::iter::repeat(k).take(c))
                    .collect())
            }
            _ => Err(Error::InvalidArgument("site types are defined for macroscopic states only".into())),
        }
    }

    /// Decomposition of the `sites`-site state into weighted pure branches.
    ///
    /// Site eigenvalues at or below `BRANCH_FLOOR` are treated as zero and counted as dropped.
    ///
    /// Branches with weight below `min_weight` are dropped; returns `None` when more
    /// than `max_branches` would be kept. The second value is the dropped mass.
    pub fn pure_branches(&self, sites: usize, max_branches: usize, min_weight: f64) -> Result<Option<(Vec<(f64, CVector)>, f64)>> {
        let mixture: Vec<(f64, Vec<DensityMatrix>)> = match self {
            Self::Product(s) => vec![(1.0, vec![s.clone(); sites])],
            Self::DeFinetti(atoms) => atoms.iter().map(|(w, s)| (*w, vec![s.clone(); sites])).collect(),
            Self::Macroscopic(parts) => {
                let types = self.site_types(sites)?;
                vec![(1.0, types.iter().map(|&k| parts[k].1.clone()).collect())]
            }
            Self::ChannelCorrelated { .. } => {
                let rho = self.materialize(sites)?;
                let spectral = Spectral::new(rho.op())?;
                let mut kept = Vec::new();
                let mut dropped = 0.0;
                for (j, &w) in spectral.values.iter().enumerate() {
                    if w < min_weight {
                        dropped += w.max(0.0);
                        continue;
                    }
                    kept.push((w, spectral.vectors.column(j).into_owned()));
                    if kept.len() > max_branches {
                        return Ok(None);
                    }
                }
                return Ok(Some((kept, dropped)));
            }
        };
        let mut out = Vec::new();
        let mut dropped = 0.0;
        for (w, states) in mixture {
            let mut local: Vec<Vec<(f64, CVector)>> = Vec::with_capacity(states.len());
            for s in &states {
                // Roundoff eigenvalues of a pure site state would double the branch count per site.
                let sp = Spectral::new(s.op())?;
                let mut kept = Vec::new();
                let mut noise = 0.0;
                for j in 0..sp.values.len() {
                    if sp.values[j] > BRANCH_FLOOR {
                        kept.push((sp.values[j], sp.vectors.column(j).into_owned()));
                    } else {
                        noise += sp.values[j].max(0.0);
                    }
                }
                dropped += w * noise;
                local.push(kept);
            }
            let mut overflow = false;
            let mut stack = vec![(w, CVector::from_element(1, c64(1.0, 0.0)), 0usize)];
            let mut leaves = Vec::new();
            while let Some((weight, ket, site)) = stack.pop() {
                if weight < min_weight {
                    dropped += weight;
                    continue;
                }
                if site == local.len() {
                    leaves.push((weight, ket));
                    if leaves.len() + out.len() > max_branches {
                        overflow = true;
                        break;
                    }
                    continue;
                }
                for (p, v) in &local[site] {
                    stack.push((weight * p, ket.kronecker(v), site + 1));
                }
            }
            if overflow {
                return Ok(None);
            }
            out.extend(leaves);
        }
        Ok(Some((out, dropped)))
    }

    /// `M → ∞` limit of `ω_{R,M}(X̄_1 ⋯ X̄_n)`.
    pub fn limit_moment(&self, ops: &[Operator]) -> Result<Complex64> {
        match self {
            Self::DeFinetti(atoms) => Ok(atoms.iter().fold(c64(0.0, 0.0), |acc, (w, s)| {
                acc + ops.iter().fold(c64(*w, 0.0), |p, x| p * s.expectation(x))
            })),
            _ => {
                let s = self.effective_site_state()?;
                Ok(ops.iter().fold(c64(1.0, 0.0), |p, x| p * s.expectation(x)))
            }
        }
    }
}

/// `CNOT·(H⊗1)` on two qubits.
pub fn bell_kraus() -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let r = |x: f64| c64(x, 0.0);
    #[rustfmt::skip]
    let m = CMatrix::from_row_slice(4, 4, &[
        r(s), r(0.0), r(s), r(0.0),
        r(0.0), r(s), r(0.0), r(s),
        r(0.0), r(s), r(0.0), r(-s),
        r(s), r(0.0), r(-s), r(0.0),
    ]);
    m
}

fn tensor_power(s: &DensityMatrix, n: usize) -> DensityMatrix {
    let mut acc = s.clone();
    for _ in 1..n {
        acc = acc.tensor(s);
    }
    acc
}

/// Site counts `M_k` with `Σ M_k = M`, rounding `λ_k M` by largest remainder (ties to the lower index).
pub fn macroscopic_counts(fractions: &[f64], sites: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|l| l * sites as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(sites.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// `(M−L+1)^{-1} Σ_{j=0}^{M−L} ρ^{⊗j} ⊗ E(ρ^{⊗L}) ⊗ ρ^{⊗(M−L−j)}`.
pub fn build_channel_correlated(site_state: &DensityMatrix, l: usize, kraus: &[CMatrix], sites: usize) -> Result<DensityMatrix> {
    if sites < l {
        return Err(Error::InvalidArgument(format!(
            "correlation length {l} exceeds {sites} reservoir sites"
        )));
    }
    let d = site_state.dim();
    let total = d.pow(sites as u32);
    if total > DENSE_CUTOFF {
        return Err(Error::SizeOverflow {
            what: "channel-correlated reservoir state",
            dim: total,
            limit: DENSE_CUTOFF,
        });
    }
    let block = tensor_power(site_state, l);
    let channel_out = kraus
        .iter()
        .fold(CMatrix::zeros(block.dim(), block.dim()), |acc, k| acc + k * block.data() * k.adjoint());
    let channel_out = Operator::new(channel_out, vec![d; l])?;
    let placements = sites - l + 1;
    let mut acc = CMatrix::zeros(total, total);
    for j in 0..placements {
        let mut factors: Vec<Operator> = Vec::new();
        if j > 0 {
            factors.push(tensor_power(site_state, j).into_operator());
        }
        factors.push(channel_out.clone());
        if sites - l - j > 0 {
            factors.push(tensor_power(site_state, sites - l - j).into_operator());
        }
        let refs: Vec<&Operator> = factors.iter().collect();
        acc += kron_all(&refs).data();
    }
    acc /= c64(placements as f64, 0.0);
    DensityMatrix::new(Operator::new(acc, vec![d; sites])?)
}

/// Quasi-periodic function `Σ_j a_j e^{i ν_j t}` with distinct frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct QuasiPeriodic {
    pub terms: Vec<(f64, Complex64)>,
}

impl QuasiPeriodic {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: vec![(0.0, c64(c, 0.0))],
        }
    }

    pub fn eval_complex(&self, t: f64) -> Complex64 {
        self.terms
            .iter()
            .fold(c64(0.0, 0.0), |acc, (nu, a)| acc + a * Complex64::from_polar(1.0, nu * t))
    }

    /// Real part; the construction guarantees the imaginary part is below [`IMAG_TOL`].
    pub fn eval(&self, t: f64) -> f64 {
        self.eval_complex(t).re
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|(nu, a)| (*nu, a * s)).collect(),
        }
    }

    /// Largest `|imag|` over a set of probe times.
    pub fn imaginary_residue(&self, probes: &[f64]) -> f64 {
        probes.iter().fold(0.0_f64, |m, &t| m.max(self.eval_complex(t).im.abs()))
    }
}

/// `t ↦ Tr(ρ e^{ith} v e^{−ith})` as quasi-periodic data from the eigenbasis of `h`.
///
/// Terms whose Bohr frequencies coincide (within `1e-12` relative) are merged.
pub fn quasi_periodic_expectation(rho: &DensityMatrix, h: &Operator, v: &Operator) -> Result<QuasiPeriodic> {
    if rho.dim() != h.dim() || v.dim() != h.dim() {
        return Err(Error::DimensionMismatch("state, site Hamiltonian and interaction differ in dimension".into()));
    }
    let sp = Spectral::new(h)?;
    let w = &sp.vectors;
    let rho_t = w.adjoint() * rho.data() * w;
    let v_t = w.adjoint() * v.data() * w;
    let n = h.dim();
    let scale = sp.values.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let mut raw: Vec<(f64, Complex64)> = Vec::with_capacity(n * n);
    for k in 0..n {
        for l in 0..n {
            let a = rho_t[(k, l)] * v_t[(l, k)];
            if a.norm() == 0.0 {
                continue;
            }
            raw.push((sp.values[l] - sp.values[k], a));
        }
    }
    raw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut terms: Vec<(f64, Complex64)> = Vec::new();
    for (nu, a) in raw {
        match terms.last_mut() {
            Some((nu0, a0)) if (nu - *nu0).abs() <= 1e-12 * scale => *a0 += a,
            _ => terms.push((nu, a)),
        }
    }
    for (nu, _) in terms.iter_mut() {
        if nu.abs() <= 1e-12 * scale {
            *nu = 0.0;
        }
    }
    terms.retain(|(_, a)| a.norm() > 1e-300);
    let qp = QuasiPeriodic { terms };
    let probes = [0.0, 0.37, 1.3, 2.9, 7.1];
    let residue = qp.imaginary_residue(&probes);
    let mag = qp.terms.iter().map(|(_, a)| a.norm()).sum::<f64>().max(1.0);
    if residue > IMAG_TOL * mag {
        return Err(Error::NotHermitian {
            deviation: residue,
            allowed: IMAG_TOL * mag,
        });
    }
    Ok(qp)
}

/// `ω_r(v_j(t)) = Tr(ρ e^{ith} v_j e^{−ith})`.
pub fn site_expectation(state: &DensityMatrix, site: &SiteModel, v_id: usize, t: f64) -> Result<f64> {
    let qp = quasi_periodic_expectation(state, &site.h_site, site.interaction(v_id)?)?;
    let z = qp.eval_complex(t);
    if z.im.abs() > IMAG_TOL * z.norm().max(1.0) {
        return Err(Error::NotHermitian {
            deviation: z.im.abs(),
            allowed: IMAG_TOL,
        });
    }
    Ok(z.re)
}

/// Heisenberg-picture site operators `x(t_k)` generated by `h`.
pub fn heisenberg_ops(site: &SiteModel, x: &Operator, times: &[f64]) -> Result<Vec<Operator>> {
    let sp = Spectral::new(&site.h_site)?;
    Ok(times
        .iter()
        .map(|&t| x.conjugate_by(&sp.propagator(-t)))
        .collect())
}

/// All set partitions of `0..n` as block lists, blocks ordered by smallest element
/// and elements increasing inside each block.
pub fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(i: usize, max: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<Vec<usize>>>) {
        let n = labels.len();
        if i == n {
            let blocks = if n == 0 { 0 } else { max + 1 };
            let mut parts = vec![Vec::new(); blocks];
            for (k, &b) in labels.iter().enumerate() {
                parts[b].push(k);
            }
            out.push(parts);
            return;
        }
        let top = if i == 0 { 0 } else { max + 1 };
        for b in 0..=top {
            labels[i] = b;
            rec(i + 1, max.max(b), labels, out);
        }
    }
    if n == 0 {
        out.push(Vec::new());
    } else {
        rec(0, 0, &mut labels, &mut out);
    }
    out
}

/// `(m)_k / m^k` computed as a product of ratios.
fn falling_ratio(m: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| {
        if i >= m {
            0.0
        } else {
            acc * (m - i) as f64 / m as f64
        }
    })
}

fn block_value(rho: &DensityMatrix, ops: &[Operator], block: &[usize]) -> Complex64 {
    let mut prod = ops[block[0]].data().clone();
    for &k in &block[1..] {
        prod = prod * ops[k].data();
    }
    trace_of_product(rho.data(), &prod)
}

/// `(1/M^n) Σ_{m_1..m_n} ω(x_1^{[m_1]} ⋯ x_n^{[m_n]})` for `ρ^{⊗M}` by summing over set partitions.
fn product_moment(rho: &DensityMatrix, sites: usize, ops: &[Operator]) -> Complex64 {
    set_partitions(ops.len()).iter().fold(c64(0.0, 0.0), |acc, blocks| {
        let weight = falling_ratio(sites, blocks.len()) * (sites as f64).powi(blocks.len() as i32 - ops.len() as i32);
        if weight == 0.0 {
            return acc;
        }
        acc + blocks
            .iter()
            .fold(c64(weight, 0.0), |p, b| p * block_value(rho, ops, b))
    })
}

/// Same sum for sites split into types with counts `M_k` and states `σ_k`.
fn macroscopic_moment(states: &[&DensityMatrix], counts: &[usize], ops: &[Operator]) -> Complex64 {
    let sites: usize = counts.iter().sum();
    let n = ops.len();
    let kinds = states.len();
    let mut total = c64(0.0, 0.0);
    for blocks in set_partitions(n) {
        let values: Vec<Vec<Complex64>> = blocks
            .iter()
            .map(|b| states.iter().map(|s| block_value(s, ops, b)).collect())
            .collect();
        let nb = blocks.len();
        let mut assign = vec![0usize; nb];
        loop {
            let mut used = vec![0usize; kinds];
            let mut ways = 1.0;
            let mut val = c64(1.0, 0.0);
            for (b, &k) in assign.iter().enumerate() {
                ways *= counts[k].saturating_sub(used[k]) as f64;
                used[k] += 1;
                val *= values[b][k];
            }
            if ways != 0.0 {
                total += val * ways;
            }
            let mut i = 0;
            while i < nb {
                assign[i] += 1;
                if assign[i] < kinds {
                    break;
                }
                assign[i] = 0;
                i += 1;
            }
            if i == nb {
                break;
            }
        }
    }
    total / (sites as f64).powi(n as i32)
}

/// `ω_{R,M}(X̄_1 ⋯ X̄_n)` for single-site operators `x_k`, using the set-partition
/// reduction where the state allows it and the materialized state otherwise.
pub fn moment_of_ops(state: &ReservoirEnsembleState, sites: usize, ops: &[Operator]) -> Result<Complex64> {
    if sites == 0 {
        return Err(Error::InvalidArgument("number of reservoir sites must be at least 1".into()));
    }
    if ops.iter().any(|x| x.dim() != state.site_dim()) {
        return Err(Error::DimensionMismatch("moment operators do not act on a reservoir site".into()));
    }
    match state {
        ReservoirEnsembleState::Product(rho) => Ok(product_moment(rho, sites, ops)),
        ReservoirEnsembleState::DeFinetti(atoms) => Ok(atoms
            .iter()
            .fold(c64(0.0, 0.0), |acc, (w, s)| acc + product_moment(s, sites, ops) * *w)),
        ReservoirEnsembleState::Macroscopic(parts) => {
            let fractions: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
            let counts = macroscopic_counts(&fractions, sites);
            let states: Vec<&DensityMatrix> = parts.iter().map(|(_, s)| s).collect();
            Ok(macroscopic_moment(&states, &counts, ops))
        }
        ReservoirEnsembleState::ChannelCorrelated { .. } => moment_of_ops_dense(state, sites, ops),
    }
}

/// Dense evaluation of the same moment on the materialized `M`-site state.
pub fn moment_of_ops_dense(state: &ReservoirEnsembleState, sites: usize, ops: &[Operator]) -> Result<Complex64> {
    let rho = state.materialize(sites)?;
    let d = state.site_dim();
    let averaged: Vec<CMatrix> = ops
        .iter()
        .map(|x| {
            let mut acc = CMatrix::zeros(rho.dim(), rho.dim());
            for m in 0..sites {
                acc += embed_at_site(x, m, sites, d)?.data();
            }
            Ok(acc / c64(sites as f64, 0.0))
        })
        .collect::<Result<_>>()?;
    let mut prod = CMatrix::identity(rho.dim(), rho.dim());
    for a in &averaged {
        prod *= a;
    }
    Ok(trace_of_product(rho.data(), &prod))
}

/// `ω_{R,M}(V̄(t_1) ⋯ V̄(t_n))` with `V̄ = (1/M) Σ_m v^{[m]}` for interaction `v_id`.
pub fn multitime_moment(
    state: &ReservoirEnsembleState,
    sites: usize,
    site: &SiteModel,
    v_id: usize,
    times: &[f64],
) -> Result<Complex64> {
    let ops = heisenberg_ops(site, site.interaction(v_id)?, times)?;
    moment_of_ops(state, sites, &ops)
}

/// `|ω_{R,M}(V̄(t_1)⋯V̄(t_n)) − lim_M ω_{R,M}(V̄(t_1)⋯V̄(t_n))|`, where the limit is
/// the product of single-site expectations (mixed over atoms for De Finetti states).
pub fn factorization_error(
    state: &ReservoirEnsembleState,
    sites: usize,
    site: &SiteModel,
    v_id: usize,
    times: &[f64],
) -> Result<f64> {
    let ops = heisenberg_ops(site, site.interaction(v_id)?, times)?;
    let moment = moment_of_ops(state, sites, &ops)?;
    let limit = state.limit_moment(&ops)?;
    Ok((moment - limit).norm())
}

/// `max |ω_{R,M}(x_1^{[m_1]} ⋯ x_n^{[m_n]})|` over all site tuples, on the materialized state.
pub fn moment_cap(state: &ReservoirEnsembleState, sites: usize, ops: &[Operator]) -> Result<f64> {
    let rho = state.materialize(sites)?;
    let d = state.site_dim();
    let n = ops.len();
    let mut tuple = vec![0usize; n];
    let mut cap = 0.0_f64;
    loop {
        let mut prod = CMatrix::identity(rho.dim(), rho.dim());
        for (k, &m) in tuple.iter().enumerate() {
            prod *= embed_at_sites(&ops[k], &[m], sites, d)?.data();
        }
        cap = cap.max(trace_of_product(rho.data(), &prod).norm());
        let mut i = 0;
        while i < n {
            tuple[i] += 1;
            if tuple[i] < sites {
                break;
            }
            tuple[i] = 0;
            i += 1;
        }
        if i == n {
            return Ok(cap);
        }
    }
}

/// `|T(M,n)|` bound `nL·C(n)/(M−L+1)` for channel-correlated states.
pub fn correlated_bound(n: usize, l: usize, sites: usize, cap: f64) -> f64 {
    (n * l) as f64 * cap / (sites + 1 - l) as f64
}

/// `k!!` in the convention `k!! = (k−1)(k−3)⋯1` for even `k` (so `0!! = 2!! = 1`, `4!! = 3`).
///
/// Odd `k` use the usual `k(k−2)⋯1`.
pub fn double_factorial(k: u32) -> u128 {
    let mut acc: u128 = 1;
    let mut j = if k % 2 == 0 { k.saturating_sub(1) } else { k };
    while j > 1 {
        acc *= j as u128;
        j -= 2;
    }
    acc
}

/// `(2⌊n/2⌋)!! (½ + |α|)^n` for coherent oscillator sites with `v = φ`.
pub fn coherent_bound(n: u32, alpha: Complex64) -> f64 {
    double_factorial(2 * (n / 2)) as f64 * (0.5 + alpha.norm()).powi(n as i32)
}

/// `(c ν)^n` for `v = ν a†a` on states with `⟨(a†a)^k⟩ ≤ c^k`.
pub fn scattering_bound(n: u32, c: f64, nu: f64) -> f64 {
    (c * nu).powi(n as i32)
}

/// `(2c‖g‖²)^n` for the field-scattering interaction.
pub fn field_scattering_bound(n: u32, c: f64, g_norm: f64) -> f64 {
    (2.0 * c * g_norm * g_norm).powi(n as i32)
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Constants `C_{R,n}`, `C_{S,n}` (index `n` from 0) and the rates `b_S`, `b_R`.
#[derive(Clone)]
pub struct BoundProfile {
    pub c_res: Vec<f64>,
    pub c_sys: Vec<f64>,
    pub b_res: ScalarFn,
    pub b_sys: ScalarFn,
}

impl std::fmt::Debug for BoundProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundProfile")
            .field("c_res", &self.c_res)
            .field("c_sys", &self.c_sys)
            .finish_non_exhaustive()
    }
}

impl BoundProfile {
    pub fn new(c_res: Vec<f64>, c_sys: Vec<f64>, b_res: ScalarFn, b_sys: ScalarFn) -> Result<Self> {
        if c_res.len() != c_sys.len() || c_res.len() < 2 {
            return Err(Error::InvalidArgument("constant sequences must have equal length ≥ 2".into()));
        }
        if c_res.iter().chain(&c_sys).any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidArgument("bound constants must be nonnegative".into()));
        }
        Ok(Self { c_res, c_sys, b_res, b_sys })
    }

    /// Profile with `C_{R,n} = r(n)`, `C_{S,n} = s(n)` for `n ≤ n_max` and constant rates.
    pub fn from_fns(n_max: usize, r: impl Fn(usize) -> f64, s: impl Fn(usize) -> f64, b_res: f64, b_sys: f64) -> Result<Self> {
        Self::new(
            (0..=n_max).map(&r).collect(),
            (0..=n_max).map(&s).collect(),
            Arc::new(move |_| b_res),
            Arc::new(move |_| b_sys),
        )
    }

    /// `B(t) = ∫_0^t b_S(s) b_R(s) ds`, composite 8-point Gauss–Legendre on 64 panels.
    pub fn accumulated(&self, t: f64) -> f64 {
        let f = |s: f64| (self.b_sys)(s) * (self.b_res)(s);
        crate::quadrature::integrate(&f, 0.0, t, 64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Convergent,
    Divergent,
    Inconclusive,
}

#[derive(Clone, Debug)]
pub struct SeriesReport {
    pub verdict: Verdict,
    /// `2B(t)`.
    pub two_b: f64,
    pub partial_sums: Vec<f64>,
    /// Last finite term ratio `a_{n+1}/a_n`.
    pub tail_ratio: f64,
    /// `a_n^{1/n}` at the last nonzero term.
    pub tail_root: f64,
    /// Log-log slope of the ratios over the tail.
    pub ratio_trend: f64,
}

/// Ratio and root tests on `Σ_n (2B(t))^n C_{S,n} C_{R,n} / n!`.
pub fn series_condition_check(profile: &BoundProfile, t: f64) -> SeriesReport {
    let two_b = 2.0 * profile.accumulated(t);
    let n_max = profile.c_res.len() - 1;
    let mut log_fact = 0.0;
    let log_terms: Vec<f64> = (0..=n_max)
        .map(|n| {
            if n > 0 {
                log_fact += (n as f64).ln();
            }
            let c = profile.c_sys[n] * profile.c_res[n];
            if c == 0.0 || (two_b == 0.0 && n > 0) {
                f64::NEG_INFINITY
            } else {
                let lb = if n == 0 { 0.0 } else { n as f64 * two_b.ln() };
                lb + c.ln() - log_fact
            }
        })
        .collect();
    let mut partial_sums = Vec::with_capacity(n_max + 1);
    let mut acc = 0.0;
    for lt in &log_terms {
        acc += lt.exp();
        partial_sums.push(acc);
    }

    let tail_start = n_max / 2;
    let ratios: Vec<(f64, f64)> = (tail_start.max(1)..n_max)
        .filter(|&n| log_terms[n].is_finite() && log_terms[n + 1].is_finite())
        .map(|n| (n as f64, log_terms[n + 1] - log_terms[n]))
        .collect();
    let last_nonzero = (0..=n_max).rev().find(|&n| log_terms[n].is_finite());
    let tail_root = match last_nonzero {
        Some(n) if n > 0 => (log_terms[n] / n as f64).exp(),
        _ => 0.0,
    };
    let all_zero_tail = (tail_start..=n_max).all(|n| !log_terms[n].is_finite());
    if all_zero_tail || ratios.len() < 3 {
        let verdict = if all_zero_tail { Verdict::Convergent } else { Verdict::Inconclusive };
        return SeriesReport {
            verdict,
            two_b,
            partial_sums,
            tail_ratio: 0.0,
            tail_root,
            ratio_trend: 0.0,
        };
    }
    let tail_ratio = ratios.last().unwrap().1.exp();
    // Least-squares slope of ln(ratio) against ln(n); ratios ~ n^{-p} give slope −p.
    let (sx, sy, sxx, sxy) = ratios.iter().fold((0.0, 0.0, 0.0, 0.0), |(sx, sy, sxx, sxy), &(n, lr)| {
        let x = n.ln();
        (sx + x, sy + lr, sxx + x * x, sxy + x * lr)
    });
    let k = ratios.len() as f64;
    let ratio_trend = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    let max_ratio = ratios.iter().fold(f64::NEG_INFINITY, |m, r| m.max(r.1)).exp();
    let min_ratio = ratios.iter().fold(f64::INFINITY, |m, r| m.min(r.1)).exp();

    let verdict = if max_ratio < 0.95 || ratio_trend < -0.25 {
        Verdict::Convergent
    } else if min_ratio >= 1.0 - 1e-12 && ratio_trend > -0.05 {
        Verdict::Divergent
    } else {
        Verdict::Inconclusive
    };
    SeriesReport {
        verdict,
        two_b,
        partial_sums,
        tail_ratio,
        tail_root,
        ratio_trend,
    }
}

/// One row of a moment table.
#[derive(Clone, Debug)]
pub struct MomentRow {
    pub sites: usize,
    pub times: Vec<f64>,
    pub moment: Complex64,
    pub factorized: f64,
    pub error: f64,
    pub bound: f64,
}

/// Writes `M, n, t1..tn, moment_re, moment_im, factorized, error, bound`; all rows share `n`.
pub fn write_moment_csv<W: Write>(w: W, rows: &[MomentRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.times.len());
    if rows.iter().any(|r| r.times.len() != n) {
        return Err(Error::InvalidArgument("moment rows differ in order n".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["M".to_string(), "n".to_string()];
    header.extend((1..=n).map(|k| format!("t{k}")));
    header.extend(["moment_re", "moment_im", "factorized", "error", "bound"].map(String::from));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sites.to_string(), n.to_string()];
        rec.extend(r.times.iter().map(|t| crate::fmt_f64(*t)));
        rec.extend([r.moment.re, r.moment.im, r.factorized, r.error, r.bound].map(crate::fmt_f64));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fock;
    use crate::operator::{pauli, partial_trace, site_permutation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ket(v: &[(f64, f64)]) -> CVector {
        CVector::from_iterator(v.len(), v.iter().map(|(a, b)| c64(*a, *b)))
    }

    fn plus() -> DensityMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DensityMatrix::pure(&ket(&[(s, 0.0), (s, 0.0)]), vec![2]).unwrap()
    }

    fn qubit_site() -> SiteModel {
        SiteModel::new(pauli::z(), vec![pauli::x()]).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d: usize) -> DensityMatrix {
        let a = CMatrix::from_fn(d, d, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let p = &a * a.adjoint();
        let tr = p.trace();
        DensityMatrix::from_matrix(p / tr, vec![d]).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> Operator {
        let a = CMatrix::from_fn(n, n, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        Operator::hermitian((&a + a.adjoint()) * c64(0.5, 0.0), vec![n]).unwrap()
    }

    /// Direct `Tr(ρ e^{ith} v e^{−ith})` by matrix products.
    fn direct_expectation(rho: &DensityMatrix, h: &Operator, v: &Operator, t: f64) -> Complex64 {
        let u = crate::operator::expm_hermitian(h, t).unwrap();
        let vt = u.adjoint().matmul(v).matmul(&u);
        rho.expectation(&vt)
    }

    #[test]
    fn site_expectation_examples() {
        let site = qubit_site();
        let zero = DensityMatrix::basis(2, 0).unwrap();
        for k in 0..20 {
            let t = 0.17 * k as f64;
            assert!(site_expectation(&zero, &site, 0, t).unwrap().abs() < 1e-15);
            let w = site_expectation(&plus(), &site, 0, t).unwrap();
            let oracle = direct_expectation(&plus(), &pauli::z(), &pauli::x(), t);
            assert!((w - oracle.re).abs() < 1e-12);
            assert!((w - (2.0 * t).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn coherent_field_expectation() {
        let alpha = c64(0.6, 0.3);
        let omega = 1.3;
        for n in [16, 32] {
            let site = SiteModel::oscillator(n, omega, vec![fock::field(n)]).unwrap();
            let rho = DensityMatrix::pure(&fock::coherent_ket(alpha, n), vec![n]).unwrap();
            for k in 0..10 {
                let t = 0.4 * k as f64;
                let w = site_expectation(&rho, &site, 0, t).unwrap();
                let exact = std::f64::consts::SQRT_2 * (alpha * Complex64::from_polar(1.0, -omega * t)).re;
                assert!((w - exact).abs() < 1e-6, "n={n} t={t}: {w} vs {exact}");
            }
        }
    }

    #[test]
    fn stationary_scattering_potential_is_constant() {
        let n = 10;
        let nu = 0.7;
        let site = SiteModel::oscillator(n, 1.1, vec![fock::number(n).scale(nu)]).unwrap();
        let rho = DensityMatrix::pure(&fock::coherent_ket(c64(0.8, 0.0), n), vec![n]).unwrap();
        let mean = rho.expectation(&fock::number(n)).re;
        for k in 0..10 {
            let w = site_expectation(&rho, &site, 0, 0.9 * k as f64).unwrap();
            assert!((w - nu * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn commuting_potentials_are_constant_and_degenerate_frequencies_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Operator::diagonal(&[1.0, 1.0, -2.0]);
        let v = Operator::diagonal(&[0.3, -0.1, 0.7]);
        let site = SiteModel::new(h, vec![v]).unwrap();
        let rho = random_state(&mut rng, 3);
        let w0 = site_expectation(&rho, &site, 0, 0.0).unwrap();
        for k in 1..30 {
            assert!((site_expectation(&rho, &site, 0, 0.31 * k as f64).unwrap() - w0).abs() < 1e-12);
        }
        let h2 = Operator::diagonal(&[0.0, 0.0, 1.0]);
        let v2 = random_hermitian(&mut rng, 3);
        let qp = quasi_periodic_expectation(&rho, &h2, &v2).unwrap();
        let mut freqs: Vec<f64> = qp.terms.iter().map(|t| t.0).collect();
        freqs.dedup();
        assert_eq!(freqs.len(), qp.terms.len());
        assert!(qp.terms.len() <= 3);
        for k in 0..10 {
            let t = 0.7 * k as f64;
            assert!((qp.eval_complex(t) - direct_expectation(&rho, &h2, &v2, t)).norm() < 1e-12);
        }
    }

    #[test]
    fn set_partitions_are_counted_by_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52, 203];
        for (n, b) in bell.iter().enumerate() {
            assert_eq!(set_partitions(n).len(), *b);
        }
    }

    #[test]
    fn product_moment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let site = SiteModel::new(random_hermitian(&mut rng, 2), vec![random_hermitian(&mut rng, 2)]).unwrap();
        let rho = random_state(&mut rng, 2);
        let state = ReservoirEnsembleState::product(rho.clone());
        let (t1, t2) = (0.3, 1.1);
        let ops = heisenberg_ops(&site, &site.interactions[0], &[t1, t2]).unwrap();
        let w1 = rho.expectation(&ops[0]);
        let w2 = rho.expectation(&ops[1]);
        let w12 = rho.expectation(&ops[0].matmul(&ops[1]));
        for m in [1, 2, 3, 5] {
            let one = multitime_moment(&state, m, &site, 0, &[t1]).unwrap();
            assert!((one - w1).norm() < 1e-14);
            let two = multitime_moment(&state, m, &site, 0, &[t1, t2]).unwrap();
            let mf = m as f64;
            let closed = w1 * w2 * (1.0 - 1.0 / mf) + w12 / mf;
            assert!((two - closed).norm() < 1e-14);
            let err = factorization_error(&state, m, &site, 0, &[t1, t2]).unwrap();
            assert!((err - (w12 - w1 * w2).norm() / mf).abs() < 1e-14);
            assert!(factorization_error(&state, m, &site, 0, &[t1]).unwrap() < 1e-15);
        }
    }

    #[test]
    fn fast_moments_match_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let site = SiteModel::new(random_hermitian(&mut rng, 2), vec![random_hermitian(&mut rng, 2)]).unwrap();
        let a = random_state(&mut rng, 2);
        let b = random_state(&mut rng, 2);
        let states = [
            ReservoirEnsembleState::product(a.clone()),
            ReservoirEnsembleState::definetti(vec![(0.3, a.clone()), (0.7, b.clone())]).unwrap(),
            ReservoirEnsembleState::macroscopic(vec![(0.4, a.clone()), (0.6, b.clone())]).unwrap(),
        ];
        let times = [0.2, 0.9, 1.4, 0.5];
        for state in &states {
            for m in 1..=4 {
                for n in 1..=4 {
                    let ops = heisenberg_ops(&site, &site.interactions[0], &times[..n]).unwrap();
                    let fast = moment_of_ops(state, m, &ops).unwrap();
                    let dense = moment_of_ops_dense(state, m, &ops).unwrap();
                    assert!((fast - dense).norm() < 1e-12, "M={m} n={n}: {fast} vs {dense}");
                }
            }
        }
    }

    #[test]
    fn definetti_moment_is_linear_in_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let site = SiteModel::new(random_hermitian(&mut rng, 3), vec![random_hermitian(&mut rng, 3)]).unwrap();
        let a = random_state(&mut rng, 3);
        let b = random_state(&mut rng, 3);
        let mix = ReservoirEnsembleState::definetti(vec![(0.25, a.clone()), (0.75, b.clone())]).unwrap();
        let times = [0.1, 0.4, 0.8];
        let lhs = multitime_moment(&mix, 6, &site, 0, &times).unwrap();
        let ma = multitime_moment(&ReservoirEnsembleState::product(a), 6, &site, 0, &times).unwrap();
        let mb = multitime_moment(&ReservoirEnsembleState::product(b), 6, &site, 0, &times).unwrap();
        assert!((lhs - (ma * 0.25 + mb * 0.75)).norm() < 1e-14);
    }

    #[test]
    fn moments_are_invariant_under_site_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let site = SiteModel::new(random_hermitian(&mut rng, 2), vec![random_hermitian(&mut rng, 2)]).unwrap();
        let state = ReservoirEnsembleState::bell_channel(random_state(&mut rng, 2)).unwrap();
        let ops = heisenberg_ops(&site, &site.interactions[0], &[0.3, 0.6, 1.2]).unwrap();
        for m in 2..=4 {
            let rho = state.materialize(m).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.reverse();
            let p = site_permutation(&perm, 2).unwrap();
            let original = moment_of_ops_dense(&state, m, &ops).unwrap();
            let dense_rho = rho.evolve(&p);
            let mut prod = CMatrix::identity(rho.dim(), rho.dim());
            for x in &ops {
                let mut acc = CMatrix::zeros(rho.dim(), rho.dim());
                for s in 0..m {
                    acc += embed_at_site(x, s, m, 2).unwrap().data();
                }
                prod *= acc / c64(m as f64, 0.0);
            }
            let relabeled = trace_of_product(dense_rho.data(), &prod);
            assert!((original - relabeled).norm() < 1e-13);
        }
    }

    #[test]
    fn product_factorization_error_decays_like_one_over_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..5 {
            let site = SiteModel::new(random_hermitian(&mut rng, 2), vec![random_hermitian(&mut rng, 2)]).unwrap();
            let state = ReservoirEnsembleState::product(random_state(&mut rng, 2));
            let times = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            for m in [2, 8, 50] {
                let e1 = factorization_error(&state, m, &site, 0, &times).unwrap();
                let e2 = factorization_error(&state, 2 * m, &site, 0, &times).unwrap();
                if e1 > 1e-12 {
                    let r = e1 / e2;
                    assert!((1.9..=2.1).contains(&r), "ratio {r}");
                }
            }
        }
    }

    #[test]
    fn channel_correlated_examples() {
        let zero = DensityMatrix::basis(2, 0).unwrap();
        let identity = ReservoirEnsembleState::channel_correlated(zero.clone(), 2, vec![CMatrix::identity(4, 4)]).unwrap();
        let product = ReservoirEnsembleState::product(zero.clone());
        for m in 2..=4 {
            let a = identity.materialize(m).unwrap();
            let b = product.materialize(m).unwrap();
            assert!(a.op().max_abs_diff(b.op()) < 1e-15);
        }

        // M=3: (ω_0 + ω_1)/2 built from explicit kets.
        let bell = ReservoirEnsembleState::bell_channel(zero.clone()).unwrap();
        let rho = bell.materialize(3).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let b_ket = ket(&[(s, 0.0), (0.0, 0.0), (0.0, 0.0), (s, 0.0)]);
        let z_ket = ket(&[(1.0, 0.0), (0.0, 0.0)]);
        let k0 = b_ket.kronecker(&z_ket);
        let k1 = z_ket.kronecker(&b_ket);
        let expected = (&k0 * k0.adjoint() + &k1 * k1.adjoint()) * c64(0.5, 0.0);
        assert!((rho.data() - expected).norm() < 1e-15);
        assert!((rho.op().trace().re - 1.0).abs() < 1e-14);
        assert!(rho.op().eigenvalues().unwrap()[0] > -1e-12);

        // Single-site marginals: site 0 sees the pair once, site 1 twice.
        let m0 = partial_trace(&rho, &[0]).unwrap();
        let half = DensityMatrix::maximally_mixed(&[2]);
        let exp0 = DensityMatrix::mixture(&[(0.5, &half), (0.5, &zero)]).unwrap();
        assert!(m0.op().max_abs_diff(exp0.op()) < 1e-15);
        let m1 = partial_trace(&rho, &[1]).unwrap();
        assert!(m1.op().max_abs_diff(half.op()) < 1e-15);

        assert!(bell.materialize(1).is_err());
        let bad = ReservoirEnsembleState::channel_correlated(zero, 2, vec![CMatrix::identity(4, 4) * c64(0.9, 0.0)]);
        assert!(bad.is_err());
    }

    #[test]
    fn materialized_states_are_density_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let a = random_state(&mut rng, 2);
        let b = random_state(&mut rng, 2);
        let states = [
            ReservoirEnsembleState::product(a.clone()),
            ReservoirEnsembleState::bell_channel(a.clone()).unwrap(),
            ReservoirEnsembleState::definetti(vec![(0.5, a.clone()), (0.5, b.clone())]).unwrap(),
            ReservoirEnsembleState::macroscopic(vec![(0.3, a.clone()), (0.7, b.clone())]).unwrap(),
        ];
        for s in &states {
            for m in 2..=5 {
                let rho = s.materialize(m).unwrap();
                DensityMatrix::new(rho.op().clone()).unwrap();
            }
        }
        assert!(ReservoirEnsembleState::definetti(vec![(0.5, a.clone()), (0.6, b)]).is_err());
    }

    #[test]
    fn bell_channel_error_respects_correlation_bound() {
        let site = qubit_site();
        let state = ReservoirEnsembleState::bell_channel(DensityMatrix::basis(2, 0).unwrap()).unwrap();
        let times = [0.3, 0.8];
        let ops = heisenberg_ops(&site, &site.interactions[0], &times).unwrap();
        for m in 3..=6 {
            let err = factorization_error(&state, m, &site, 0, &times).unwrap();
            let cap = moment_cap(&state, m, &ops).unwrap();
            assert!(err <= correlated_bound(2, 2, m, cap));
        }
    }

    #[test]
    fn macroscopic_rounding() {
        assert_eq!(macroscopic_counts(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(macroscopic_counts(&[0.25, 0.75], 8), vec![2, 6]);
        assert_eq!(macroscopic_counts(&[1.0 / 3.0; 3], 4), vec![2, 1, 1]);
        assert_eq!(macroscopic_counts(&[0.2, 0.3, 0.5], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn macroscopic_single_component_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let a = random_state(&mut rng, 2);
        let mac = ReservoirEnsembleState::macroscopic(vec![(1.0, a.clone())]).unwrap();
        assert!(mac.effective_site_state().unwrap().op().max_abs_diff(a.op()) < 1e-15);
        let site = SiteModel::new(random_hermitian(&mut rng, 2), vec![random_hermitian(&mut rng, 2)]).unwrap();
        let x = multitime_moment(&mac, 7, &site, 0, &[0.1, 0.2, 0.3]).unwrap();
        let y = multitime_moment(&ReservoirEnsembleState::product(a), 7, &site, 0, &[0.1, 0.2, 0.3]).unwrap();
        assert!((x - y).norm() < 1e-14);
    }

    #[test]
    fn pure_branches_reconstruct_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_state(&mut rng, 2);
        let b = DensityMatrix::basis(2, 1).unwrap();
        let states = [
            ReservoirEnsembleState::product(a.clone()),
            ReservoirEnsembleState::definetti(vec![(0.5, a.clone()), (0.5, b.clone())]).unwrap(),
            ReservoirEnsembleState::bell_channel(b).unwrap(),
        ];
        for s in &states {
            let (branches, dropped) = s.pure_branches(3, 64, 0.0).unwrap().unwrap();
            let rho = s.materialize(3).unwrap();
            let recon = branches
                .iter()
                .fold(CMatrix::zeros(8, 8), |acc, (w, k)| acc + k * k.adjoint() * c64(*w, 0.0));
            assert!((recon - rho.data()).norm() < 1e-12);
            assert!(dropped.abs() < 1e-15);
        }
        assert!(states[0].pure_branches(6, 16, 0.0).unwrap().is_none());
    }

    #[test]
    fn pure_product_has_one_branch() {
        let s = DensityMatrix::pure(&ket(&[(0.8, 0.0), (0.0, 0.6)]), vec![2]).unwrap();
        let (branches, dropped) = ReservoirEnsembleState::product(s).pure_branches(8, 256, 0.0).unwrap().unwrap();
        assert_eq!(branches.len(), 1);
        assert!((branches[0].0 - 1.0).abs() < 1e-12);
        assert!(dropped < 1e-12);
    }

    #[test]
    fn coherent_bound_examples() {
        assert!((coherent_bound(1, c64(0.3, 0.4)) - 1.0).abs() < 1e-15);
        assert!((coherent_bound(4, c64(0.0, 0.0)) - 3.0 / 16.0).abs() < 1e-15);
        assert_eq!(double_factorial(0), 1);
        assert_eq!(double_factorial(2), 1);
        assert_eq!(double_factorial(6), 15);
        for n1 in 0..=10u32 {
            for n2 in 0..=10u32 {
                assert!(double_factorial(2 * (n1 + n2)) >= double_factorial(2 * n1) * double_factorial(2 * n2));
            }
        }
        assert!((scattering_bound(3, 2.0, 0.5) - 1.0).abs() < 1e-15);
        assert!((field_scattering_bound(2, 0.5, 2.0) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn series_condition_examples() {
        let exp = BoundProfile::from_fns(40, |n| 1.5_f64.powi(n as i32), |n| 2.0_f64.powi(n as i32), 1.0, 1.0).unwrap();
        for t in [0.1, 1.0, 5.0] {
            let r = series_condition_check(&exp, t);
            assert_eq!(r.verdict, Verdict::Convergent, "t={t}");
            let limit = (r.two_b * 3.0).exp();
            assert!((r.partial_sums.last().unwrap() - limit).abs() < 1e-8 * limit || t > 1.0);
        }

        let stark = BoundProfile::from_fns(
            40,
            |n| 0.8_f64.powi(n as i32),
            |n| (2.0 * (1.0 + n as f64)).powf(n as f64 / 2.0),
            1.0,
            1.0,
        )
        .unwrap();
        for t in [0.5, 2.0, 4.0] {
            assert_eq!(series_condition_check(&stark, t).verdict, Verdict::Convergent, "t={t}");
        }

        let fact = BoundProfile::from_fns(40, |n| (1..=n).map(|k| k as f64).product(), |_| 1.0, 1.0, 1.0).unwrap();
        let r = series_condition_check(&fact, 0.5);
        assert!((r.two_b - 1.0).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Divergent);
        assert!(r.partial_sums.windows(2).all(|w| w[1] - w[0] >= 1.0 - 1e-9));
    }

    #[test]
    fn moment_csv_has_header_and_full_precision() {
        let rows = vec![MomentRow {
            sites: 4,
            times: vec![0.1, 0.2],
            moment: c64(1.0 / 3.0, 0.0),
            factorized: 0.25,
            error: 1e-3,
            bound: 0.5,
        }];
        let mut buf = Vec::new();
        write_moment_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "M,n,t1,t2,moment_re,moment_im,factorized,error,bound");
        let row = lines.next().unwrap();
        let re: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(re, 1.0 / 3.0);
    }
}
