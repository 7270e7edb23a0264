//! System, reservoir-site and coupling data, and assembly of the total
//! Hamiltonian `H_M = H_S ⊗ 1 + Σ_m 1 ⊗ h^{[m]} + Σ_j G_j ⊗ V̄_{M,j}`.
//!
//! Below [`DENSE_CUTOFF`] total dimensions the Hamiltonian is materialized as a
//! dense matrix; above it, it is kept as a [`TermList`] of site-embedded factors
//! that supports matrix-vector products without building `H_M`.

use itertools_lite::combinations;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::{
    accumulate_on_factors, apply_on_factors, c64, expm_hermitian, local_factor, CMatrix, CVector, Operator,
};

/// Largest total dimension stored densely.
pub const DENSE_CUTOFF: usize = 4096;

/// Reservoir operator a system coupling attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InteractionId {
    /// Single-site operator `v_j`, averaged as `(1/M) Σ_m v_j^{[m]}`.
    Site(usize),
    /// ν-body operator, averaged over all ν-site clusters.
    Cluster(usize),
}

#[derive(Clone, Debug)]
pub struct Coupling {
    pub g: Operator,
    pub interaction: InteractionId,
}

impl Coupling {
    pub fn new(g: Operator, interaction: InteractionId) -> Self {
        Self { g, interaction }
    }
}

/// System Hamiltonian, coupling operators and the tensor factorization of the system space.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub h_sys: Operator,
    pub couplings: Vec<Coupling>,
    pub subsystem_dims: Vec<usize>,
}

impl SystemModel {
    pub fn new(h_sys: Operator, couplings: Vec<Coupling>) -> Result<Self> {
        let dims = vec![h_sys.dim()];
        Self::with_subsystems(h_sys, couplings, dims)
    }

    /// System made of several subsystems; `subsystem_dims` is re-declared on every operator.
    pub fn with_subsystems(h_sys: Operator, couplings: Vec<Coupling>, subsystem_dims: Vec<usize>) -> Result<Self> {
        let h_sys = h_sys.with_dims(subsystem_dims.clone())?.validated_hermitian()?;
        let couplings = couplings
            .into_iter()
            .map(|c| {
                let g = c.g.with_dims(subsystem_dims.clone())?.validated_hermitian()?;
                Ok(Coupling { g, ..c })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h_sys,
            couplings,
            subsystem_dims,
        })
    }

    pub fn dim(&self) -> usize {
        self.h_sys.dim()
    }

    /// Same model with every coupling operator multiplied by `s`.
    pub fn scaled_couplings(&self, s: f64) -> Self {
        Self {
            h_sys: self.h_sys.clone(),
            couplings: self
                .couplings
                .iter()
                .map(|c| Coupling::new(c.g.scale(s), c.interaction))
                .collect(),
            subsystem_dims: self.subsystem_dims.clone(),
        }
    }

    /// `H_S + Σ_c w(c) G_c` for the given coupling weights.
    pub fn effective_hamiltonian<F>(&self, mut weight: F) -> Operator
    where
        F: FnMut(InteractionId) -> f64,
    {
        self.couplings
            .iter()
            .fold(self.h_sys.clone(), |acc, c| &acc + &c.g.scale(weight(c.interaction)))
    }

    /// Index of the subsystem factor each coupling acts on; error if one is non-local.
    pub fn coupling_factors(&self) -> Result<Vec<usize>> {
        self.couplings
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                for f in 0..self.subsystem_dims.len() {
                    if local_factor(&c.g, f)?.is_some() {
                        return Ok(f);
                    }
                }
                Err(Error::InvalidArgument(format!(
                    "coupling {idx} does not act on a single subsystem factor"
                )))
            })
            .collect()
    }
}

/// ν-body reservoir operator acting on ν site factors.
#[derive(Clone, Debug)]
pub struct ClusterInteraction {
    pub nu: usize,
    pub v_cluster: Operator,
}

impl ClusterInteraction {
    pub fn new(nu: usize, v_cluster: Operator, site_dim: usize) -> Result<Self> {
        if nu == 0 {
            return Err(Error::InvalidArgument("cluster size must be at least 1".into()));
        }
        if v_cluster.dim() != site_dim.pow(nu as u32) {
            return Err(Error::DimensionMismatch(format!(
                "cluster operator of dimension {} does not act on {nu} sites of dimension {site_dim}",
                v_cluster.dim()
            )));
        }
        let v_cluster = v_cluster.with_dims(vec![site_dim; nu])?.validated_hermitian()?;
        Ok(Self { nu, v_cluster })
    }
}

/// Single reservoir site: Hamiltonian, interaction operators and optional cluster operators.
#[derive(Clone, Debug)]
pub struct SiteModel {
    pub h_site: Operator,
    pub interactions: Vec<Operator>,
    pub clusters: Vec<ClusterInteraction>,
    pub dim: usize,
    /// Number-basis truncation when the site is a truncated oscillator.
    pub fock_truncation: Option<usize>,
}

impl SiteModel {
    pub fn new(h_site: Operator, interactions: Vec<Operator>) -> Result<Self> {
        let dim = h_site.dim();
        let h_site = h_site.with_dims(vec![dim])?.validated_hermitian()?;
        let interactions = interactions
            .into_iter()
            .map(|v| {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "interaction of dimension {} on a site of dimension {dim}",
                        v.dim()
                    )));
                }
                v.with_dims(vec![dim])?.validated_hermitian()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h_site,
            interactions,
            clusters: Vec::new(),
            dim,
            fock_truncation: None,
        })
    }

    /// Truncated oscillator site `h = Ω a†a` with the given interactions.
    pub fn oscillator(n_trunc: usize, omega: f64, interactions: Vec<Operator>) -> Result<Self> {
        let mut site = Self::new(fock::number(n_trunc).scale(omega), interactions)?;
        site.fock_truncation = Some(n_trunc);
        Ok(site)
    }

    pub fn with_cluster(mut self, cluster: ClusterInteraction) -> Result<Self> {
        if cluster.v_cluster.dims().iter().any(|&d| d != self.dim) {
            return Err(Error::DimensionMismatch("cluster operator site dimension".into()));
        }
        self.clusters.push(cluster);
        Ok(self)
    }

    pub fn interaction(&self, id: usize) -> Result<&Operator> {
        self.interactions
            .get(id)
            .ok_or_else(|| Error::IndexOutOfRange(format!("interaction {id} of {}", self.interactions.len())))
    }

    pub fn cluster(&self, id: usize) -> Result<&ClusterInteraction> {
        self.clusters
            .get(id)
            .ok_or_else(|| Error::IndexOutOfRange(format!("cluster {id} of {}", self.clusters.len())))
    }

    /// Heisenberg-picture single-site operator `x(t) = e^{ith} x e^{−ith}`.
    pub fn heisenberg(&self, x: &Operator, t: f64) -> Result<Operator> {
        let u = expm_hermitian(&self.h_site, t)?;
        Ok(x.conjugate_by(&u.adjoint()))
    }
}

/// Truncated single-mode oscillator matrices in the number basis `|0⟩ … |n−1⟩`.
pub mod fock {
    use super::*;

    pub fn annihilation(n: usize) -> Operator {
        let data = CMatrix::from_fn(n, n, |i, j| {
            if j == i + 1 {
                c64((j as f64).sqrt(), 0.0)
            } else {
                c64(0.0, 0.0)
            }
        });
        Operator::from_matrix(data).expect("square")
    }

    pub fn creation(n: usize) -> Operator {
        annihilation(n).adjoint()
    }

    /// `a†a`.
    pub fn number(n: usize) -> Operator {
        Operator::diagonal(&(0..n).map(|k| k as f64).collect::<Vec<_>>())
    }

    /// Field operator `(a† + a)/√2`.
    pub fn field(n: usize) -> Operator {
        let a = annihilation(n);
        let sum = &a + &a.adjoint();
        sum.scale(std::f64::consts::FRAC_1_SQRT_2)
            .validated_hermitian()
            .expect("field operator is Hermitian")
    }

    /// Coherent state `|α⟩` truncated to `n` levels and renormalized.
    pub fn coherent_ket(alpha: Complex64, n: usize) -> CVector {
        let mut ket = CVector::zeros(n);
        let mut coeff = c64((-0.5 * alpha.norm_sqr()).exp(), 0.0);
        for k in 0..n {
            ket[k] = coeff;
            coeff = coeff * alpha / ((k + 1) as f64).sqrt();
        }
        let norm = ket.norm();
        ket / c64(norm, 0.0)
    }

    /// Number state `|k⟩`.
    pub fn number_ket(k: usize, n: usize) -> CVector {
        let mut ket = CVector::zeros(n);
        ket[k] = c64(1.0, 0.0);
        ket
    }
}

/// Role of a Hamiltonian term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    System,
    Reservoir,
    Interaction,
}

/// `coeff · S ⊗ R` with `S` on the system factor and `R` on the listed reservoir sites.
#[derive(Clone, Debug)]
pub struct Term {
    pub kind: TermKind,
    pub coeff: f64,
    pub system: Option<CMatrix>,
    pub reservoir: Option<(Vec<usize>, CMatrix)>,
}

/// Hamiltonian on `system ⊗ site^{⊗M}` stored as a sum of embedded terms.
#[derive(Clone, Debug)]
pub struct TermList {
    pub sys_dim: usize,
    pub site_dim: usize,
    pub sites: usize,
    pub terms: Vec<Term>,
}

impl TermList {
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.sys_dim];
        dims.extend(vec![self.site_dim; self.sites]);
        dims
    }

    pub fn dim(&self) -> usize {
        self.sys_dim * self.site_dim.pow(self.sites as u32)
    }

    /// Keeps only terms of the given kinds.
    pub fn filtered(&self, kinds: &[TermKind]) -> TermList {
        TermList {
            terms: self.terms.iter().filter(|t| kinds.contains(&t.kind)).cloned().collect(),
            ..*self
        }
    }

    /// `H ψ`.
    pub fn apply(&self, psi: &CVector) -> CVector {
        let dims = self.dims();
        let mut out = CVector::zeros(psi.len());
        for term in &self.terms {
            let mut phi = match &term.reservoir {
                Some((sites, op)) => {
                    let factors: Vec<usize> = sites.iter().map(|s| s + 1).collect();
                    apply_on_factors(psi, &dims, &factors, op)
                }
                None => psi.clone(),
            };
            if let Some(s) = &term.system {
                phi = apply_on_factors(&phi, &dims, &[0], s);
            }
            out.axpy(c64(term.coeff, 0.0), &phi, c64(1.0, 0.0));
        }
        out
    }

    pub fn to_dense(&self) -> Result<Operator> {
        let dims = self.dims();
        let n = self.dim();
        if n > DENSE_CUTOFF {
            return Err(Error::SizeOverflow {
                what: "dense Hamiltonian",
                dim: n,
                limit: DENSE_CUTOFF,
            });
        }
        let mut data = CMatrix::zeros(n, n);
        for term in &self.terms {
            match (&term.system, &term.reservoir) {
                (Some(s), Some((sites, r))) => {
                    let mut factors = vec![0];
                    factors.extend(sites.iter().map(|s| s + 1));
                    accumulate_on_factors(&mut data, term.coeff, &s.kronecker(r), &dims, &factors);
                }
                (Some(s), None) => accumulate_on_factors(&mut data, term.coeff, s, &dims, &[0]),
                (None, Some((sites, r))) => {
                    let factors: Vec<usize> = sites.iter().map(|s| s + 1).collect();
                    accumulate_on_factors(&mut data, term.coeff, r, &dims, &factors);
                }
                (None, None) => {
                    for i in 0..n {
                        data[(i, i)] += c64(term.coeff, 0.0);
                    }
                }
            }
        }
        Operator::new(data, dims)?.validated_hermitian()
    }
}

/// Dense or term-list Hamiltonian.
#[derive(Clone, Debug)]
pub enum Hamiltonian {
    Dense(Operator),
    Terms(TermList),
}

impl Hamiltonian {
    fn from_terms(terms: TermList) -> Result<Self> {
        if terms.dim() <= DENSE_CUTOFF {
            Ok(Hamiltonian::Dense(terms.to_dense()?))
        } else {
            Ok(Hamiltonian::Terms(terms))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Hamiltonian::Dense(op) => op.dim(),
            Hamiltonian::Terms(t) => t.dim(),
        }
    }

    pub fn apply(&self, psi: &CVector) -> CVector {
        match self {
            Hamiltonian::Dense(op) => op.data() * psi,
            Hamiltonian::Terms(t) => t.apply(psi),
        }
    }

    pub fn as_dense(&self) -> Option<&Operator> {
        match self {
            Hamiltonian::Dense(op) => Some(op),
            Hamiltonian::Terms(_) => None,
        }
    }
}

fn check_sites(sites: usize) -> Result<()> {
    if sites == 0 {
        return Err(Error::InvalidArgument("number of reservoir sites must be at least 1".into()));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn interaction_terms(g: &Operator, v: &Operator, sites: usize) -> Vec<Term> {
    let w = 1.0 / sites as f64;
    (0..sites)
        .map(|m| Term {
            kind: TermKind::Interaction,
            coeff: w,
            system: Some(g.data().clone()),
            reservoir: Some((vec![m], v.data().clone())),
        })
        .collect()
}

fn cluster_terms(g: &Operator, cluster: &ClusterInteraction, sites: usize) -> Result<Vec<Term>> {
    if cluster.nu > sites {
        return Err(Error::InvalidArgument(format!(
            "cluster size {} exceeds {sites} reservoir sites",
            cluster.nu
        )));
    }
    let w = 1.0 / binomial(sites, cluster.nu);
    Ok(combinations(sites, cluster.nu)
        .into_iter()
        .map(|lambda| Term {
            kind: TermKind::Interaction,
            coeff: w,
            system: Some(g.data().clone()),
            reservoir: Some((lambda, cluster.v_cluster.data().clone())),
        })
        .collect())
}

/// `G ⊗ (1/M) Σ_m v^{[m]}`.
pub fn assemble_mean_field_interaction(g: &Operator, v: &Operator, sites: usize) -> Result<Hamiltonian> {
    check_sites(sites)?;
    Hamiltonian::from_terms(TermList {
        sys_dim: g.dim(),
        site_dim: v.dim(),
        sites,
        terms: interaction_terms(g, v, sites),
    })
}

/// `G ⊗ binom(M,ν)^{-1} Σ_Λ (v^ν)^{[Λ]}` over clusters in lexicographic order.
pub fn assemble_cluster_interaction(g: &Operator, cluster: &ClusterInteraction, sites: usize) -> Result<Hamiltonian> {
    check_sites(sites)?;
    let site_dim = cluster.v_cluster.dims()[0];
    Hamiltonian::from_terms(TermList {
        sys_dim: g.dim(),
        site_dim,
        sites,
        terms: cluster_terms(g, cluster, sites)?,
    })
}

/// All terms of `H_M`, tagged by role.
pub fn total_terms(sys: &SystemModel, site: &SiteModel, sites: usize) -> Result<TermList> {
    check_sites(sites)?;
    let mut terms = vec![Term {
        kind: TermKind::System,
        coeff: 1.0,
        system: Some(sys.h_sys.data().clone()),
        reservoir: None,
    }];
    for m in 0..sites {
        terms.push(Term {
            kind: TermKind::Reservoir,
            coeff: 1.0,
            system: None,
            reservoir: Some((vec![m], site.h_site.data().clone())),
        });
    }
    for c in &sys.couplings {
        match c.interaction {
            InteractionId::Site(j) => terms.extend(interaction_terms(&c.g, site.interaction(j)?, sites)),
            InteractionId::Cluster(k) => terms.extend(cluster_terms(&c.g, site.cluster(k)?, sites)?),
        }
    }
    Ok(TermList {
        sys_dim: sys.dim(),
        site_dim: site.dim,
        sites,
        terms,
    })
}

/// `H_M = H_S ⊗ 1 + Σ_m 1 ⊗ h^{[m]} + Σ_c G_c ⊗ V̄_{M,c}`.
pub fn assemble_total(sys: &SystemModel, site: &SiteModel, sites: usize) -> Result<Hamiltonian> {
    Hamiltonian::from_terms(total_terms(sys, site, sites)?)
}

/// Multi-subsystem Hamiltonian; every `G_j` must act on a single subsystem factor.
pub fn assemble_multisystem(sys: &SystemModel, site: &SiteModel, sites: usize) -> Result<Hamiltonian> {
    sys.coupling_factors()?;
    assemble_total(sys, site, sites)
}

/// Tiny combinatorics helpers.
mod itertools_lite {
    /// All k-subsets of `0..n` as increasing index lists, in lexicographic order.
    pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if k > n {
            return out;
        }
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.clone());
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + n - k {
                    break;
                }
                if i == 0 {
                    return out;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
}

pub use itertools_lite::combinations as cluster_subsets;
