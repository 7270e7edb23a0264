//! One function per experiment kind; each returns the CSV bytes and a JSON summary.

use std::sync::Arc;

use meanfield_core::analysis::{
    bound_state_count, bump, field_overlap_decay, m_sweep, negativity, stark_halfline_spectrum, trace_distance,
    write_sweep_csv, Domain, FieldOverlapSpec, SpectralProblem,
};
use meanfield_core::effective::{
    definetti_potentials, effective_potential, evolve_state, limit_trajectory, propagate_effective, propagate_fixed,
    PotentialRepr,
};
use meanfield_core::exact::{dyson_truncated, propagate_exact, FiniteMRun};
use meanfield_core::model::{fock, Coupling, InteractionId, SystemModel};
use meanfield_core::operator::{c64, trace_norm, CMatrix, DensityMatrix, Operator};
use meanfield_core::reservoir::{
    coherent_bound, correlated_bound, field_scattering_bound, heisenberg_ops, moment_cap, moment_of_ops,
    scattering_bound, QuasiPeriodic,
};
use meanfield_core::{fmt_f64, EffectivePotential, EffectivePropagator, PropagationResult, ReservoirEnsembleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{complex, BoundKind, DomainKind, ExperimentConfig, Kind, ProfileKind, SpectrumProblem};
use crate::{at, CliError};

pub struct Artifacts {
    pub csv: Vec<u8>,
    pub summary: Value,
}

/// Builds every model object a run would need, without running it.
pub fn check_buildable(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.model.is_some() {
        let b = cfg.build_model()?;
        if cfg.reservoir.is_some() {
            cfg.build_reservoir(b.site.dim)?;
        }
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts, CliError> {
    let (csv, details) = match cfg.kind {
        Kind::Convergence => convergence(cfg)?,
        Kind::Entanglement => entanglement(cfg)?,
        Kind::Moments => moments(cfg)?,
        Kind::Spectrum => spectrum(cfg)?,
        Kind::Definetti => definetti(cfg)?,
        Kind::Decay => decay(cfg)?,
        Kind::Dyson => dyson(cfg)?,
        Kind::Propagator => propagator(cfg, seed)?,
    };
    Ok(Artifacts {
        csv,
        summary: json!({
            "name": cfg.name,
            "kind": cfg.kind.as_str(),
            "description": cfg.description,
            "results": details,
        }),
    })
}

type Output = Result<(Vec<u8>, Value), CliError>;

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Io(format!("csv: {e}")))
}

fn exact_runs(
    cfg: &ExperimentConfig,
    b: &crate::config::Built,
    state: &ReservoirEnsembleState,
    grid: &[f64],
) -> Result<Vec<PropagationResult>, CliError> {
    let runs = cfg
        .run
        .m
        .par_iter()
        .map(|&sites| {
            propagate_exact(&FiniteMRun {
                sys: b.sys.clone(),
                site: b.site.clone(),
                sites,
                rho_s0: b.rho0.clone(),
                reservoir: state.clone(),
                grid: grid.to_vec(),
            })
            .map_err(at("exact::propagate_exact"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (r, m) in runs.iter().zip(&cfg.run.m) {
        if r.diagnostics.mass_defect > cfg.run.max_mass_defect {
            return Err(CliError::Tolerance(format!(
                "exact::propagate_exact at M={m} dropped branch weight {:.3e} > {:.3e}",
                r.diagnostics.mass_defect, cfg.run.max_mass_defect
            )));
        }
    }
    Ok(runs)
}

fn check_unitarity(cfg: &ExperimentConfig, defect: f64, op: &str) -> Result<(), CliError> {
    if defect > cfg.run.max_unitarity_defect {
        return Err(CliError::Tolerance(format!(
            "{op}: unitarity defect {defect:.3e} > {:.3e}",
            cfg.run.max_unitarity_defect
        )));
    }
    Ok(())
}

fn convergence(cfg: &ExperimentConfig) -> Output {
    let b = cfg.build_model()?;
    let state = cfg.build_reservoir(b.site.dim)?;
    let grid = cfg.grid();
    let rows = m_sweep(&b.sys, &b.site, &state, &b.rho0, &grid, &cfg.run.m).map_err(at("analysis::m_sweep"))?;
    if let Some(r) = rows.iter().find(|r| r.mass_defect > cfg.run.max_mass_defect) {
        return Err(CliError::Tolerance(format!(
            "analysis::m_sweep at M={} dropped branch weight {:.3e}",
            r.sites, r.mass_defect
        )));
    }
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows).map_err(at("analysis::write_sweep_csv"))?;
    let decreasing = rows.windows(2).all(|w| w[1].gap < w[0].gap);
    let table: Vec<Value> = rows
        .iter()
        .map(|r| json!({"M": r.sites, "gap": r.gap, "ratio": r.ratio}))
        .collect();
    Ok((csv, json!({"rows": table, "strictly_decreasing": decreasing})))
}

fn entanglement(cfg: &ExperimentConfig) -> Output {
    let b = cfg.build_model()?;
    let n_factors = b.sys.subsystem_dims.len();
    if n_factors < 2 {
        return Err(CliError::config("entanglement needs at least two system subsystems"));
    }
    let state = cfg.build_reservoir(b.site.dim)?;
    let grid = cfg.grid();
    let split = [n_factors - 1];
    let neg = |r: &DensityMatrix| negativity(r, &split).map_err(at("analysis::negativity"));
    let n0 = neg(&b.rho0)?;
    let limit = limit_trajectory(&b.sys, &b.site, &state, &b.rho0, &grid).map_err(at("effective::limit_trajectory"))?;
    check_unitarity(cfg, limit.diagnostics.max_unitarity_defect, "effective::limit_trajectory")?;
    let exact = exact_runs(cfg, &b, &state, &grid)?;

    let mut header = vec!["t".to_string(), "negativity_limit".to_string()];
    header.extend(cfg.run.m.iter().map(|m| format!("negativity_M{m}")));
    let mut rows = Vec::new();
    let mut limit_dev = 0.0_f64;
    let mut devs = vec![0.0_f64; exact.len()];
    for (k, t) in grid.iter().enumerate() {
        let nl = neg(&limit.states[k])?;
        limit_dev = limit_dev.max((nl - n0).abs());
        let mut row = vec![fmt_f64(*t), fmt_f64(nl)];
        for (j, run) in exact.iter().enumerate() {
            let n = neg(&run.states[k])?;
            devs[j] = devs[j].max((n - n0).abs());
            row.push(fmt_f64(n));
        }
        rows.push(row);
    }
    let per_m: Vec<Value> = cfg.run.m.iter().zip(&devs).map(|(m, d)| json!({"M": m, "max_deviation": d})).collect();
    Ok((
        csv_bytes(&header, &rows)?,
        json!({
            "initial_negativity": n0,
            "limit_max_deviation": limit_dev,
            "exact": per_m,
            "deviation_decreasing": devs.windows(2).all(|w| w[1] < w[0]),
        }),
    ))
}

fn moments(cfg: &ExperimentConfig) -> Output {
    let mb = cfg.moments.as_ref().expect("validated");
    let b = cfg.build_model()?;
    let v = b.site.interaction(mb.interaction).map_err(CliError::build)?.clone();
    let mut states: Vec<(String, ReservoirEnsembleState, f64)> = Vec::new();
    if mb.alphas.is_empty() {
        let label = cfg.reservoir.as_ref().expect("validated").kind.as_str().to_string();
        let alpha = match &cfg.reservoir.as_ref().expect("validated").state {
            Some(crate::config::StateSpec::Coherent { coherent }) => complex(*coherent).norm(),
            _ => 0.0,
        };
        states.push((label, cfg.build_reservoir(b.site.dim)?, alpha));
    } else {
        for a in &mb.alphas {
            let sigma = DensityMatrix::pure(&fock::coherent_ket(complex(*a), b.site.dim), vec![b.site.dim]).map_err(CliError::build)?;
            states.push((format!("alpha={}{:+}i", a[0], a[1]), ReservoirEnsembleState::product(sigma), complex(*a).norm()));
        }
    }

    let header: Vec<String> = ["state", "M", "n", "moment_re", "moment_im", "limit_re", "limit_im", "error", "bound"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    let (mut checked, mut violations, mut worst) = (0usize, 0usize, 0.0_f64);
    for (label, state, alpha) in &states {
        for &m in &cfg.run.m {
            for n in 1..=mb.max_order {
                let ops = heisenberg_ops(&b.site, &v, &mb.times[..n]).map_err(at("reservoir::heisenberg_ops"))?;
                let moment = moment_of_ops(state, m, &ops).map_err(at("reservoir::moment_of_ops"))?;
                let limit = state.limit_moment(&ops).map_err(at("reservoir::limit_moment"))?;
                let error = (moment - limit).norm();
                let bound = match mb.bound {
                    BoundKind::None => None,
                    BoundKind::Coherent => Some(coherent_bound(n as u32, c64(*alpha, 0.0))),
                    BoundKind::Scattering => Some(scattering_bound(n as u32, mb.c.unwrap(), mb.nu.unwrap())),
                    BoundKind::FieldScattering => Some(field_scattering_bound(n as u32, mb.c.unwrap(), mb.g_norm.unwrap())),
                    BoundKind::Correlated => {
                        let l = match state {
                            ReservoirEnsembleState::ChannelCorrelated { l, .. } => *l,
                            _ => return Err(CliError::config("correlated bound needs a bell_channel reservoir")),
                        };
                        if m < l {
                            None
                        } else {
                            let cap = moment_cap(state, m, &ops).map_err(at("reservoir::moment_cap"))?;
                            Some(correlated_bound(n, l, m, cap))
                        }
                    }
                };
                // the correlated bound limits the factorization error; the others limit the moment
                let bounded = if mb.bound == BoundKind::Correlated { error } else { moment.norm() };
                if let Some(bd) = bound {
                    checked += 1;
                    if bounded > bd * (1.0 + 1e-12) {
                        violations += 1;
                    }
                    worst = worst.max(bounded / bd);
                }
                rows.push(vec![
                    label.clone(),
                    m.to_string(),
                    n.to_string(),
                    fmt_f64(moment.re),
                    fmt_f64(moment.im),
                    fmt_f64(limit.re),
                    fmt_f64(limit.im),
                    fmt_f64(error),
                    bound.map(fmt_f64).unwrap_or_default(),
                ]);
            }
        }
    }
    Ok((
        csv_bytes(&header, &rows)?,
        json!({
            "bound": mb.bound.as_str(),
            "checked": checked,
            "violations": violations,
            "max_ratio_to_bound": if checked > 0 { json!(worst) } else { Value::Null },
        }),
    ))
}

fn spectrum(cfg: &ExperimentConfig) -> Output {
    let s = cfg.spectrum.as_ref().expect("validated");
    match s.problem {
        SpectrumProblem::Stark => {
            let all = s
                .slopes
                .par_iter()
                .map(|&f| stark_halfline_spectrum(f, s.levels).map_err(at("analysis::stark_halfline_spectrum")))
                .collect::<Result<Vec<_>, _>>()?;
            let header = ["F", "k", "eigenvalue"].map(String::from);
            let mut rows = Vec::new();
            for (f, e) in s.slopes.iter().zip(&all) {
                for (k, v) in e.iter().enumerate() {
                    rows.push(vec![fmt_f64(*f), (k + 1).to_string(), fmt_f64(*v)]);
                }
            }
            let levels: Vec<Value> = s.slopes.iter().zip(&all).map(|(f, e)| json!({"F": f, "eigenvalues": e})).collect();
            Ok((csv_bytes(&header, &rows)?, json!({"problem": "stark", "spectra": levels})))
        }
        SpectrumProblem::Well => {
            let domain = match s.domain {
                DomainKind::HalfLine => Domain::HalfLine { x_max: s.x_max },
                DomainKind::Line => Domain::Line { x_max: s.x_max },
            };
            let header = ["depth", "count"].map(String::from);
            let mut rows = Vec::new();
            let mut details = Vec::new();
            for &depth in &s.depths {
                let p = SpectralProblem::square_well(domain, depth, s.width, s.grid).map_err(at("analysis::SpectralProblem"))?;
                let bs = bound_state_count(&p, s.threshold).map_err(at("analysis::bound_state_count"))?;
                rows.push(vec![fmt_f64(depth), bs.count.to_string()]);
                details.push(json!({"depth": depth, "count": bs.count, "eigenvalues": bs.eigenvalues, "grid": bs.grid}));
            }
            Ok((csv_bytes(&header, &rows)?, json!({"problem": "well", "wells": details})))
        }
    }
}

fn definetti(cfg: &ExperimentConfig) -> Output {
    let b = cfg.build_model()?;
    let state = cfg.build_reservoir(b.site.dim)?;
    if !matches!(state, ReservoirEnsembleState::DeFinetti(_)) {
        return Err(CliError::config("kind definetti needs a definetti reservoir"));
    }
    let grid = cfg.grid();
    let mixture = limit_trajectory(&b.sys, &b.site, &state, &b.rho0, &grid).map_err(at("effective::limit_trajectory"))?;
    check_unitarity(cfg, mixture.diagnostics.max_unitarity_defect, "effective::propagate_definetti")?;
    let atoms = definetti_potentials(&state, &b.site, &b.sys).map_err(at("effective::definetti_potentials"))?;
    let orbits = atoms
        .iter()
        .map(|(_, w)| {
            propagate_effective(&b.sys, w, &grid)
                .and_then(|u| evolve_state(&u, &b.rho0))
                .map_err(at("effective::propagate_effective"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let exact = exact_runs(cfg, &b, &state, &grid)?;

    let dist = |a: &PropagationResult, c: &PropagationResult| -> Result<Vec<f64>, CliError> {
        a.states
            .iter()
            .zip(&c.states)
            .map(|(x, y)| trace_distance(x, y).map_err(at("analysis::trace_distance")))
            .collect()
    };
    let mut header = vec!["t".to_string(), "purity_mixture".to_string()];
    header.extend(cfg.run.m.iter().map(|m| format!("distance_M{m}")));
    let to_mixture: Vec<Vec<f64>> = exact.iter().map(|r| dist(r, &mixture)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<String>> = grid
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut row = vec![fmt_f64(*t), fmt_f64(mixture.states[k].purity())];
            row.extend(to_mixture.iter().map(|d| fmt_f64(d[k])));
            row
        })
        .collect();
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let mut per_m = Vec::new();
    for (j, run) in exact.iter().enumerate() {
        let orbit_d = orbits.iter().map(|o| dist(run, o).map(|d| max(&d))).collect::<Result<Vec<_>, _>>()?;
        let md = max(&to_mixture[j]);
        per_m.push(json!({
            "M": cfg.run.m[j],
            "distance_to_mixture": md,
            "distance_to_orbits": orbit_d,
            "closer_to_mixture": orbit_d.iter().all(|&d| md < d),
        }));
    }
    let min_purity = mixture.states.iter().map(|r| r.purity()).fold(f64::INFINITY, f64::min);
    Ok((csv_bytes(&header, &rows)?, json!({"exact": per_m, "min_mixture_purity": min_purity})))
}

fn decay(cfg: &ExperimentConfig) -> Output {
    let d = cfg.decay.as_ref().expect("validated");
    let header = ["profile", "t", "amplitude_re", "amplitude_im", "value", "error_estimate"].map(String::from);
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for p in &d.profiles {
        let (label, profile): (&str, Arc<dyn Fn(f64) -> f64 + Send + Sync>) = match p.kind {
            ProfileKind::Gaussian => {
                let s = p.width;
                ("gaussian", Arc::new(move |r: f64| (-r * r / (2.0 * s * s)).exp()))
            }
            ProfileKind::Bump => ("bump", bump(p.centre, p.width)),
        };
        let spec = FieldOverlapSpec::symmetric(profile, p.r_max).map_err(at("analysis::FieldOverlapSpec"))?;
        let n = ((p.t_end - p.t_start) / p.dt).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| p.t_start + k as f64 * p.dt).collect();
        let samples = field_overlap_decay(&spec, &times).map_err(at("analysis::field_overlap_decay"))?;
        let v0 = field_overlap_decay(&spec, &[0.0]).map_err(at("analysis::field_overlap_decay"))?[0].value;
        for s in &samples {
            rows.push(vec![
                label.to_string(),
                fmt_f64(s.t),
                fmt_f64(s.amplitude.re),
                fmt_f64(s.amplitude.im),
                fmt_f64(s.value),
                fmt_f64(s.error_estimate),
            ]);
        }
        let peak = samples.iter().map(|s| s.value).fold(0.0, f64::max);
        details.push(json!({"profile": label, "value_at_zero": v0, "max_value_on_window": peak, "relative_to_zero": peak / v0}));
    }
    Ok((csv_bytes(&header, &rows)?, json!({"profiles": details})))
}

fn dyson(cfg: &ExperimentConfig) -> Output {
    let d = cfg.dyson.as_ref().expect("validated");
    let b = cfg.build_model()?;
    let state = cfg.build_reservoir(b.site.dim)?;
    let mut times = d.times.clone();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times.dedup();
    let mut grid = vec![0.0];
    grid.extend(&times);
    let exact = propagate_exact(&FiniteMRun {
        sys: b.sys.clone(),
        site: b.site.clone(),
        sites: d.sites,
        rho_s0: b.rho0.clone(),
        reservoir: state.clone(),
        grid,
    })
    .map_err(at("exact::propagate_exact"))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=d.max_order).map(|n| format!("gap_order{n}")));
    let mut rows = Vec::new();
    let mut top = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let mut row = vec![fmt_f64(t)];
        for n in 1..=d.max_order {
            let approx = dyson_truncated(&b.sys, &b.site, &state, d.sites, &b.rho0, n, t).map_err(at("exact::dyson_truncated"))?;
            let gap = 0.5 * trace_norm(&(&approx - exact.states[k + 1].op()));
            row.push(fmt_f64(gap));
            if n == d.max_order {
                top.push(gap);
            }
        }
        rows.push(row);
    }
    let ratios: Vec<f64> = top.windows(2).map(|w| w[1] / w[0]).collect();
    Ok((
        csv_bytes(&header, &rows)?,
        json!({"sites": d.sites, "max_order": d.max_order, "times": times, "gaps": top, "successive_ratios": ratios}),
    ))
}

fn random_hermitian(rng: &mut ChaCha8Rng) -> Result<Operator, CliError> {
    let a = CMatrix::from_fn(2, 2, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    Operator::hermitian((&a + a.adjoint()).scale(0.5), vec![2]).map_err(CliError::build)
}

fn random_case(rng: &mut ChaCha8Rng) -> Result<(SystemModel, EffectivePotential), CliError> {
    let sys = SystemModel::new(
        random_hermitian(rng)?,
        vec![Coupling::new(random_hermitian(rng)?, InteractionId::Site(0))],
    )
    .map_err(CliError::build)?;
    let mut terms = vec![(0.0, c64(rng.random_range(-1.0..1.0), 0.0))];
    for _ in 0..2 {
        let nu = rng.random_range(0.5..3.0);
        let a = c64(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        terms.push((nu, a));
        terms.push((-nu, a.conj()));
    }
    Ok((sys, EffectivePotential::new(vec![PotentialRepr::QuasiPeriodic(QuasiPeriodic { terms })])))
}

fn propagator(cfg: &ExperimentConfig, seed: u64) -> Output {
    let p = cfg.propagator.as_ref().expect("validated");
    let grid = cfg.grid();
    let cases = match p.random {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| random_case(&mut rng)).collect::<Result<Vec<_>, _>>()?
        }
        None => {
            let b = cfg.build_model()?;
            let state = cfg.build_reservoir(b.site.dim)?;
            let w = effective_potential(&state, &b.site, &b.sys).map_err(at("effective::effective_potential"))?;
            vec![(b.sys, w)]
        }
    };
    let diff = |a: &EffectivePropagator, b: &EffectivePropagator| {
        a.unitaries.iter().zip(&b.unitaries).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
    };
    let header = ["case", "halving_ratio", "unitarity_defect", "substeps"].map(String::from);
    let mut rows = Vec::new();
    let (mut lo, mut hi, mut worst) = (f64::INFINITY, 0.0_f64, 0.0_f64);
    for (i, (sys, w)) in cases.iter().enumerate() {
        let u = p
            .substeps
            .iter()
            .map(|&s| propagate_fixed(sys, w, &grid, s).map_err(at("effective::propagate_fixed")))
            .collect::<Result<Vec<_>, _>>()?;
        let ratio = diff(&u[0], &u[1]) / diff(&u[1], &u[2]);
        let adaptive = propagate_effective(sys, w, &grid).map_err(at("effective::propagate_effective"))?;
        let defect = adaptive.diagnostics.max_unitarity_defect;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        worst = worst.max(defect);
        rows.push(vec![i.to_string(), fmt_f64(ratio), fmt_f64(defect), adaptive.diagnostics.substeps.to_string()]);
    }
    check_unitarity(cfg, worst, "effective::propagate_effective")?;
    Ok((
        csv_bytes(&header, &rows)?,
        json!({"cases": cases.len(), "seed": p.random.map(|_| seed), "min_ratio": lo, "max_ratio": hi, "max_unitarity_defect": worst}),
    ))
}
