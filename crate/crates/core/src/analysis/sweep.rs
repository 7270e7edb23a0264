//! Finite-M convergence tables against the limit trajectory.

use std::io::Write;

use rayon::prelude::*;

use crate::effective::limit_trajectory;
use crate::error::Result;
use crate::exact::{propagate_exact, FiniteMRun};
use crate::model::{SiteModel, SystemModel};
use crate::operator::{trace_norm, DensityMatrix};
use crate::reservoir::ReservoirEnsembleState;
use crate::fmt_f64;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sites: usize,
    /// Max over the grid of the trace distance to the limit trajectory.
    pub gap: f64,
    /// `gap(previous M) / gap(M)`; `None` on the first row.
    pub ratio: Option<f64>,
    pub gaps: Vec<f64>,
    pub mass_defect: f64,
}

/// One exact run per entry of `sites_list` (in parallel), each compared with the
/// same limit trajectory.
pub fn m_sweep(
    sys: &SystemModel,
    site: &SiteModel,
    state: &ReservoirEnsembleState,
    rho0: &DensityMatrix,
    grid: &[f64],
    sites_list: &[usize],
) -> Result<Vec<SweepRow>> {
    let limit = limit_trajectory(sys, site, state, rho0, grid)?;
    let runs: Vec<Result<(Vec<f64>, f64)>> = sites_list
        .par_iter()
        .map(|&sites| {
            let run = FiniteMRun {
                sys: sys.clone(),
                site: site.clone(),
                sites,
                rho_s0: rho0.clone(),
                reservoir: state.clone(),
                grid: grid.to_vec(),
            };
            let exact = propagate_exact(&run)?;
            let gaps = exact
                .states
                .iter()
                .zip(&limit.states)
                .map(|(a, b)| 0.5 * trace_norm(&(a.op() - b.op())))
                .collect();
            Ok((gaps, exact.diagnostics.mass_defect))
        })
        .collect();
    let mut rows: Vec<SweepRow> = Vec::with_capacity(runs.len());
    for (&sites, run) in sites_list.iter().zip(runs) {
        let (gaps, mass_defect) = run?;
        let gap = gaps.iter().cloned().fold(0.0, f64::max);
        let ratio = rows.last().map(|prev| prev.gap / gap);
        rows.push(SweepRow {
            sites,
            gap,
            ratio,
            gaps,
            mass_defect,
        });
    }
    Ok(rows)
}

/// Header `M,gap,ratio,mass_defect`; the first ratio is empty.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["M", "gap", "ratio", "mass_defect"])?;
    for r in rows {
        out.write_record([
            r.sites.to_string(),
            fmt_f64(r.gap),
            r.ratio.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.mass_defect),
        ])?;
    }
    out.flush()?;
    Ok(())
}
