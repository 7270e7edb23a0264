//! TOML experiment configs and their conversion into core model objects.

use std::collections::HashSet;

use meanfield_core::model::{fock, ClusterInteraction, Coupling, InteractionId, SiteModel, SystemModel};
use meanfield_core::operator::{c64, pauli, CMatrix, CVector, DensityMatrix, Operator};
use meanfield_core::ReservoirEnsembleState;
use num_complex::Complex64;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Convergence,
    Entanglement,
    Moments,
    Spectrum,
    Definetti,
    Decay,
    Dyson,
    Propagator,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Convergence => "convergence",
            Kind::Entanglement => "entanglement",
            Kind::Moments => "moments",
            Kind::Spectrum => "spectrum",
            Kind::Definetti => "definetti",
            Kind::Decay => "decay",
            Kind::Dyson => "dyson",
            Kind::Propagator => "propagator",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub kind: Kind,
    pub model: Option<ModelBlock>,
    pub reservoir: Option<ReservoirBlock>,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub outputs: OutputsBlock,
    pub moments: Option<MomentsBlock>,
    pub spectrum: Option<SpectrumBlock>,
    pub decay: Option<DecayBlock>,
    pub dyson: Option<DysonBlock>,
    pub propagator: Option<PropagatorBlock>,
}

/// A matrix: a named preset, rows of `[re, im]` pairs, or a Kronecker product,
/// sum or multiple of other matrices.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Preset(String),
    Entries(Vec<Vec<[f64; 2]>>),
    Kron {
        kron: Vec<MatrixSpec>,
    },
    Sum {
        sum: Vec<MatrixSpec>,
    },
    Scaled {
        scale: f64,
        of: Box<MatrixSpec>,
    },
}

impl MatrixSpec {
    /// `dim` sizes the presets that are not qubit matrices (`identity`, `field`, `number`).
    pub fn resolve(&self, dim: usize) -> Result<CMatrix, CliError> {
        match self {
            MatrixSpec::Preset(name) => Ok(match name.as_str() {
                "x" => pauli::x().data().clone(),
                "y" => pauli::y().data().clone(),
                "z" => pauli::z().data().clone(),
                "identity" => CMatrix::identity(dim, dim),
                "zero" => CMatrix::zeros(dim, dim),
                "field" => fock::field(dim).data().clone(),
                "number" => fock::number(dim).data().clone(),
                other => return Err(CliError::config(format!("unknown matrix preset {other:?}"))),
            }),
            MatrixSpec::Entries(rows) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(CliError::config("matrix entries must form a nonempty square array"));
                }
                Ok(CMatrix::from_fn(n, n, |i, j| c64(rows[i][j][0], rows[i][j][1])))
            }
            MatrixSpec::Kron { kron } => {
                let mut out = CMatrix::identity(1, 1);
                for m in kron {
                    out = out.kronecker(&m.resolve(dim)?);
                }
                Ok(out)
            }
            MatrixSpec::Sum { sum } => {
                let mut parts = sum.iter().map(|m| m.resolve(dim));
                let first = parts.next().ok_or_else(|| CliError::config("empty matrix sum"))??;
                parts.try_fold(first, |acc, m| {
                    let m = m?;
                    if m.shape() != acc.shape() {
                        return Err(CliError::config("matrix sum terms differ in shape"));
                    }
                    Ok(acc + m)
                })
            }
            MatrixSpec::Scaled { scale, of } => Ok(of.resolve(dim)? * c64(*scale, 0.0)),
        }
    }
}

/// A state: preset (`0`, `1`, `plus`, `minus`, `bell`, `mixed`), ket, density
/// matrix, coherent state or number state.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Preset(String),
    Ket {
        ket: Vec<[f64; 2]>,
    },
    Matrix {
        matrix: MatrixSpec,
    },
    Coherent {
        coherent: [f64; 2],
    },
    Number {
        number: usize,
    },
}

impl StateSpec {
    pub fn resolve(&self, dims: &[usize]) -> Result<DensityMatrix, CliError> {
        let dim: usize = dims.iter().product();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ket = |v: Vec<f64>| CVector::from_iterator(v.len(), v.into_iter().map(|x| c64(x, 0.0)));
        let pure = |k: CVector| -> Result<DensityMatrix, CliError> {
            if k.len() != dim {
                return Err(CliError::config(format!("state of dimension {} where {dim} is needed", k.len())));
            }
            DensityMatrix::pure(&k, dims.to_vec()).map_err(CliError::build)
        };
        match self {
            StateSpec::Preset(name) => match name.as_str() {
                "0" => pure(ket((0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect())),
                "1" if dim >= 2 => pure(ket((0..dim).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect())),
                "plus" => pure(ket(vec![s, s])),
                "minus" => pure(ket(vec![s, -s])),
                "bell" => pure(ket(vec![s, 0.0, 0.0, s])),
                "mixed" => Ok(DensityMatrix::maximally_mixed(dims)),
                other => Err(CliError::config(format!("unknown state preset {other:?} for dimension {dim}"))),
            },
            StateSpec::Ket { ket } => pure(CVector::from_iterator(ket.len(), ket.iter().map(|z| c64(z[0], z[1])))),
            StateSpec::Matrix { matrix } => {
                let m = matrix.resolve(dim)?;
                let op = Operator::new(m, dims.to_vec()).map_err(CliError::build)?;
                DensityMatrix::new(op).map_err(CliError::build)
            }
            StateSpec::Coherent { coherent } => pure(fock::coherent_ket(c64(coherent[0], coherent[1]), dim)),
            StateSpec::Number { number } => {
                if *number >= dim {
                    return Err(CliError::config(format!("number state {number} beyond truncation {dim}")));
                }
                pure(fock::number_ket(*number, dim))
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub system: SystemBlock,
    pub site: SiteBlock,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub hamiltonian: MatrixSpec,
    /// Tensor factorization of the system space; one factor by default.
    pub subsystems: Option<Vec<usize>>,
    #[serde(default)]
    pub couplings: Vec<CouplingBlock>,
    pub initial: StateSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingBlock {
    pub g: MatrixSpec,
    /// Index into `site.interactions`.
    pub interaction: Option<usize>,
    /// Index into `site.clusters`.
    pub cluster: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteBlock {
    pub hamiltonian: Option<MatrixSpec>,
    pub oscillator: Option<OscillatorBlock>,
    #[serde(default)]
    pub interactions: Vec<MatrixSpec>,
    #[serde(default)]
    pub clusters: Vec<ClusterBlock>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorBlock {
    pub levels: usize,
    pub omega: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterBlock {
    pub nu: usize,
    pub v: MatrixSpec,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ReservoirKind {
    Product,
    BellChannel,
    Definetti,
    Macroscopic,
}

impl ReservoirKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReservoirKind::Product => "product",
            ReservoirKind::BellChannel => "bell_channel",
            ReservoirKind::Definetti => "definetti",
            ReservoirKind::Macroscopic => "macroscopic",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirBlock {
    pub kind: ReservoirKind,
    /// Site state for `product` and `bell_channel`.
    pub state: Option<StateSpec>,
    /// Weighted site states for `definetti` and `macroscopic`.
    #[serde(default)]
    pub components: Vec<ComponentBlock>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentBlock {
    pub weight: f64,
    pub state: StateSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    /// Reservoir sizes, strictly increasing.
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Largest accepted dropped branch weight in exact runs.
    #[serde(default = "default_mass_tol")]
    pub max_mass_defect: f64,
    /// Largest accepted unitarity defect of effective propagators.
    #[serde(default = "default_unitarity_tol")]
    pub max_unitarity_defect: f64,
}

fn default_t_end() -> f64 {
    2.0
}
fn default_dt() -> f64 {
    0.05
}
fn default_mass_tol() -> f64 {
    1e-6
}
fn default_unitarity_tol() -> f64 {
    1e-8
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            m: Vec::new(),
            t_end: default_t_end(),
            dt: default_dt(),
            max_mass_defect: default_mass_tol(),
            max_unitarity_defect: default_unitarity_tol(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsBlock {
    /// CSV file name inside the output directory; `<name>.csv` by default.
    pub csv: Option<String>,
    /// JSON summary file name; `<name>.json` by default.
    pub json: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    #[default]
    None,
    Coherent,
    Correlated,
    Scattering,
    FieldScattering,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::None => "none",
            BoundKind::Coherent => "coherent",
            BoundKind::Correlated => "correlated",
            BoundKind::Scattering => "scattering",
            BoundKind::FieldScattering => "field_scattering",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsBlock {
    /// Orders `n = 1 ..= max_order`, using the first `n` entries of `times`.
    pub max_order: usize,
    pub times: Vec<f64>,
    #[serde(default)]
    pub interaction: usize,
    #[serde(default)]
    pub bound: BoundKind,
    /// Coherent amplitudes swept in place of the reservoir state (coherent bound only).
    #[serde(default)]
    pub alphas: Vec<[f64; 2]>,
    /// `c` of the scattering bounds.
    pub c: Option<f64>,
    /// `ν` of the oscillator scattering bound.
    pub nu: Option<f64>,
    /// `‖g‖` of the field scattering bound.
    pub g_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumProblem {
    Stark,
    Well,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    #[default]
    HalfLine,
    Line,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumBlock {
    pub problem: SpectrumProblem,
    /// Field slopes for `stark`.
    #[serde(default)]
    pub slopes: Vec<f64>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Well depths `V₀` for `well`.
    #[serde(default)]
    pub depths: Vec<f64>,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default)]
    pub domain: DomainKind,
    #[serde(default = "default_x_max")]
    pub x_max: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub threshold: f64,
}

fn default_levels() -> usize {
    3
}
fn default_width() -> f64 {
    1.0
}
fn default_x_max() -> f64 {
    10.0
}
fn default_grid() -> usize {
    1000
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Gaussian,
    Bump,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBlock {
    pub kind: ProfileKind,
    /// Gaussian: `exp(−r²/(2 s²))` with `s = width`; bump: half-width of the support.
    #[serde(default = "default_width")]
    pub width: f64,
    /// Bump centre.
    #[serde(default = "default_centre")]
    pub centre: f64,
    pub r_max: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

fn default_centre() -> f64 {
    2.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayBlock {
    pub profiles: Vec<ProfileBlock>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DysonBlock {
    pub sites: usize,
    pub times: Vec<f64>,
    #[serde(default = "default_order")]
    pub max_order: usize,
}

fn default_order() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagatorBlock {
    /// Number of random qubit Hamiltonians (seeded by `--seed`); the configured
    /// model is used when absent.
    pub random: Option<usize>,
    #[serde(default = "default_substeps")]
    pub substeps: [usize; 3],
}

fn default_substeps() -> [usize; 3] {
    [4, 8, 16]
}

/// Model objects built from a config.
pub struct Built {
    pub sys: SystemModel,
    pub site: SiteModel,
    pub rho0: DensityMatrix,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn require<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        block
            .as_ref()
            .ok_or_else(|| CliError::config(format!("kind {} needs a [{name}] block", self.kind.as_str())))
    }

    /// Checks every invariant that does not need numerical work.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::config("name must be nonempty and use only [A-Za-z0-9_-]"));
        }
        let r = &self.run;
        if r.m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::config(format!("run.m must be strictly increasing, got {:?}", r.m)));
        }
        if r.m.contains(&0) {
            return Err(CliError::config("run.m entries must be positive"));
        }
        for (name, v) in [
            ("run.t_end", r.t_end),
            ("run.dt", r.dt),
            ("run.max_mass_defect", r.max_mass_defect),
            ("run.max_unitarity_defect", r.max_unitarity_defect),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::config(format!("{name} must be positive")));
            }
        }
        for name in [&self.outputs.csv, &self.outputs.json].into_iter().flatten() {
            if name.is_empty() || name.contains('/') || name.contains('\\') || name == "." || name == ".." {
                return Err(CliError::config(format!("output name {name:?} must be a plain file name")));
            }
        }
        let needs_model = matches!(
            self.kind,
            Kind::Convergence | Kind::Entanglement | Kind::Moments | Kind::Definetti | Kind::Dyson
        );
        if needs_model {
            self.require(&self.model, "model")?;
            self.require(&self.reservoir, "reservoir")?;
        }
        if matches!(self.kind, Kind::Convergence | Kind::Entanglement | Kind::Definetti | Kind::Moments) && r.m.is_empty() {
            return Err(CliError::config(format!("kind {} needs a nonempty run.m", self.kind.as_str())));
        }
        match self.kind {
            Kind::Moments => {
                let m = self.require(&self.moments, "moments")?;
                if m.max_order == 0 || m.times.len() < m.max_order {
                    return Err(CliError::config("moments.times must hold at least max_order ≥ 1 entries"));
                }
                match m.bound {
                    BoundKind::Scattering if m.c.is_none() || m.nu.is_none() => {
                        return Err(CliError::config("scattering bound needs moments.c and moments.nu"))
                    }
                    BoundKind::FieldScattering if m.c.is_none() || m.g_norm.is_none() => {
                        return Err(CliError::config("field_scattering bound needs moments.c and moments.g_norm"))
                    }
                    _ => {}
                }
                if !m.alphas.is_empty() && m.bound != BoundKind::Coherent {
                    return Err(CliError::config("moments.alphas is only used with the coherent bound"));
                }
            }
            Kind::Spectrum => {
                let s = self.require(&self.spectrum, "spectrum")?;
                match s.problem {
                    SpectrumProblem::Stark if s.slopes.is_empty() || s.slopes.iter().any(|f| !(*f > 0.0)) => {
                        return Err(CliError::config("spectrum.slopes must be a nonempty list of positive slopes"))
                    }
                    SpectrumProblem::Well if s.depths.is_empty() || s.depths.iter().any(|d| !(*d >= 0.0)) => {
                        return Err(CliError::config("spectrum.depths must be a nonempty list of nonnegative depths"))
                    }
                    _ => {}
                }
                if s.levels == 0 || !(s.width > 0.0) || !(s.x_max > 0.0) || s.grid < 64 {
                    return Err(CliError::config("spectrum needs levels ≥ 1, width > 0, x_max > 0, grid ≥ 64"));
                }
            }
            Kind::Decay => {
                let d = self.require(&self.decay, "decay")?;
                if d.profiles.is_empty() {
                    return Err(CliError::config("decay.profiles must not be empty"));
                }
                for p in &d.profiles {
                    if !(p.r_max > 0.0 && p.width > 0.0 && p.dt > 0.0 && p.t_end >= p.t_start && p.t_start >= 0.0) {
                        return Err(CliError::config("decay profile needs r_max, width, dt > 0 and 0 ≤ t_start ≤ t_end"));
                    }
                }
            }
            Kind::Dyson => {
                let d = self.require(&self.dyson, "dyson")?;
                if d.sites == 0 || d.times.is_empty() || d.times.iter().any(|t| !(*t > 0.0)) || !(1..=4).contains(&d.max_order) {
                    return Err(CliError::config("dyson needs sites ≥ 1, positive times and 1 ≤ max_order ≤ 4"));
                }
            }
            Kind::Propagator => {
                let p = self.require(&self.propagator, "propagator")?;
                if p.random.is_none() {
                    self.require(&self.model, "model")?;
                }
                if p.random == Some(0) || p.substeps[0] == 0 || p.substeps.windows(2).any(|w| w[1] != 2 * w[0]) {
                    return Err(CliError::config("propagator.substeps must be s, 2s, 4s with s ≥ 1 and random ≥ 1"));
                }
            }
            _ => {}
        }
        if let Some(res) = &self.reservoir {
            match res.kind {
                ReservoirKind::Product | ReservoirKind::BellChannel if res.state.is_none() => {
                    return Err(CliError::config("reservoir.state is required for product and bell_channel"))
                }
                ReservoirKind::Definetti | ReservoirKind::Macroscopic if res.components.is_empty() => {
                    return Err(CliError::config("reservoir.components is required for definetti and macroscopic"))
                }
                _ => {}
            }
        }
        if let Some(model) = &self.model {
            for c in &model.system.couplings {
                if c.interaction.is_some() == c.cluster.is_some() {
                    return Err(CliError::config("each coupling names exactly one of interaction or cluster"));
                }
            }
            if model.site.hamiltonian.is_some() == model.site.oscillator.is_some() {
                return Err(CliError::config("site needs exactly one of hamiltonian or oscillator"));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Built, CliError> {
        let model = self.require(&self.model, "model")?;
        let site = build_site(&model.site)?;
        let h = model.system.hamiltonian.resolve(2)?;
        let dims = model.system.subsystems.clone().unwrap_or_else(|| vec![h.nrows()]);
        let couplings = model
            .system
            .couplings
            .iter()
            .map(|c| {
                let g = Operator::new(c.g.resolve(2)?, vec![h.nrows()]).map_err(CliError::build)?;
                let id = match (c.interaction, c.cluster) {
                    (Some(i), _) => InteractionId::Site(i),
                    (_, Some(k)) => InteractionId::Cluster(k),
                    _ => unreachable!("validated"),
                };
                match id {
                    InteractionId::Site(i) if i >= site.interactions.len() => {
                        Err(CliError::config(format!("coupling refers to missing site interaction {i}")))
                    }
                    InteractionId::Cluster(k) if k >= site.clusters.len() => {
                        Err(CliError::config(format!("coupling refers to missing cluster {k}")))
                    }
                    _ => Ok(Coupling::new(g, id)),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let h = Operator::new(h, vec![dims.iter().product()]).map_err(CliError::build)?;
        let sys = SystemModel::with_subsystems(h, couplings, dims.clone()).map_err(CliError::build)?;
        let rho0 = model.system.initial.resolve(&dims)?;
        Ok(Built { sys, site, rho0 })
    }

    pub fn build_reservoir(&self, site_dim: usize) -> Result<ReservoirEnsembleState, CliError> {
        let res = self.require(&self.reservoir, "reservoir")?;
        let d = [site_dim];
        let components = || {
            res.components
                .iter()
                .map(|c| Ok((c.weight, c.state.resolve(&d)?)))
                .collect::<Result<Vec<_>, CliError>>()
        };
        match res.kind {
            ReservoirKind::Product => Ok(ReservoirEnsembleState::product(res.state.as_ref().expect("validated").resolve(&d)?)),
            ReservoirKind::BellChannel => {
                ReservoirEnsembleState::bell_channel(res.state.as_ref().expect("validated").resolve(&d)?).map_err(CliError::build)
            }
            ReservoirKind::Definetti => ReservoirEnsembleState::definetti(components()?).map_err(CliError::build),
            ReservoirKind::Macroscopic => ReservoirEnsembleState::macroscopic(components()?).map_err(CliError::build),
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        meanfield_core::effective::uniform_grid(self.run.t_end, self.run.dt)
    }
}

fn build_site(block: &SiteBlock) -> Result<SiteModel, CliError> {
    let (dim, mut site) = match (&block.hamiltonian, &block.oscillator) {
        (Some(h), None) => {
            let h = h.resolve(2)?;
            let dim = h.nrows();
            let ops = resolve_all(&block.interactions, dim)?;
            (dim, SiteModel::new(Operator::new(h, vec![dim]).map_err(CliError::build)?, ops).map_err(CliError::build)?)
        }
        (None, Some(osc)) => {
            if osc.levels < 2 {
                return Err(CliError::config("oscillator needs at least 2 levels"));
            }
            let ops = resolve_all(&block.interactions, osc.levels)?;
            (osc.levels, SiteModel::oscillator(osc.levels, osc.omega, ops).map_err(CliError::build)?)
        }
        _ => return Err(CliError::config("site needs exactly one of hamiltonian or oscillator")),
    };
    for c in &block.clusters {
        let v = c.v.resolve(dim)?;
        let n = v.nrows();
        let cl = ClusterInteraction::new(c.nu, Operator::new(v, vec![n]).map_err(CliError::build)?, dim).map_err(CliError::build)?;
        site = site.with_cluster(cl).map_err(CliError::build)?;
    }
    Ok(site)
}

fn resolve_all(specs: &[MatrixSpec], dim: usize) -> Result<Vec<Operator>, CliError> {
    specs
        .iter()
        .map(|m| Operator::new(m.resolve(dim)?, vec![dim]).map_err(CliError::build))
        .collect()
}

/// Config names must be unique across a catalog.
pub fn unique_names<'a>(names: impl IntoIterator<Item = &'a str>) -> bool {
    let mut seen = HashSet::new();
    names.into_iter().all(|n| seen.insert(n))
}

pub fn complex(z: [f64; 2]) -> Complex64 {
    c64(z[0], z[1])
}
