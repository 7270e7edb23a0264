//! One-dimensional Schrödinger operators `−u'' + W(x) u` with Dirichlet walls,
//! discretized by second-order finite differences and solved with Sturm
//! sequence bisection on the resulting tridiagonal matrix.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    /// `[0, x_max]`.
    HalfLine { x_max: f64 },
    /// `[−x_max, x_max]`.
    Line { x_max: f64 },
}

impl Domain {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            Domain::HalfLine { x_max } => (0.0, x_max),
            Domain::Line { x_max } => (-x_max, x_max),
        }
    }
}

/// `−d²/dx² + W(x)` on a Dirichlet interval with `grid` interior points.
#[derive(Clone)]
pub struct SpectralProblem {
    pub domain: Domain,
    pub potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub grid: usize,
}

impl std::fmt::Debug for SpectralProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralProblem")
            .field("domain", &self.domain)
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

impl SpectralProblem {
    pub fn new(domain: Domain, potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>, grid: usize) -> Result<Self> {
        let x_max = match domain {
            Domain::HalfLine { x_max } | Domain::Line { x_max } => x_max,
        };
        if !(x_max > 0.0) {
            return Err(Error::InvalidArgument("x_max must be positive".into()));
        }
        if grid < 64 {
            return Err(Error::InvalidArgument("grid size must be at least 64".into()));
        }
        Ok(Self { domain, potential, grid })
    }

    /// Square well `−V₀` on `|x| < a` (on `[0, a)` for the half line), zero elsewhere.
    pub fn square_well(domain: Domain, depth: f64, width: f64, grid: usize) -> Result<Self> {
        Self::new(domain, Arc::new(move |x: f64| if x.abs() < width { -depth } else { 0.0 }), grid)
    }

    pub fn spacing(&self) -> f64 {
        let (a, b) = self.domain.bounds();
        (b - a) / (self.grid + 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let (a, _) = self.domain.bounds();
        let h = self.spacing();
        (1..=self.grid).map(|i| a + i as f64 * h).collect()
    }

    /// Same problem with `2N + 1` interior points, so `h` halves and old nodes are kept.
    pub fn refined(&self) -> Self {
        Self {
            grid: 2 * self.grid + 1,
            ..self.clone()
        }
    }

    fn matrix(&self) -> Result<Tridiagonal> {
        let h = self.spacing();
        let diag: Vec<f64> = self
            .nodes()
            .iter()
            .map(|&x| 2.0 / (h * h) + (self.potential)(x))
            .collect();
        if diag.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidArgument("potential is not finite on the grid".into()));
        }
        Ok(Tridiagonal {
            diag,
            off: -1.0 / (h * h),
        })
    }

    /// Lowest `k` eigenvalues, ascending.
    pub fn lowest(&self, k: usize) -> Result<Vec<f64>> {
        let m = self.matrix()?;
        if k > m.diag.len() {
            return Err(Error::InvalidArgument("more eigenvalues requested than grid points".into()));
        }
        Ok((0..k).map(|j| m.eigenvalue(j)).collect())
    }

    /// Eigenvalues strictly below `e`.
    pub fn below(&self, e: f64) -> Result<Vec<f64>> {
        let m = self.matrix()?;
        let n = m.count_below(e);
        Ok((0..n).map(|j| m.eigenvalue(j)).collect())
    }

    /// Minimum of `W` on grid points outside the central half of the domain.
    pub fn essential_proxy(&self) -> f64 {
        let (a, b) = self.domain.bounds();
        let (lo, hi) = match self.domain {
            Domain::HalfLine { .. } => (f64::NEG_INFINITY, 0.5 * b),
            Domain::Line { .. } => (0.5 * a, 0.5 * b),
        };
        self.nodes()
            .into_iter()
            .filter(|&x| x < lo || x > hi)
            .map(|x| (self.potential)(x))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Symmetric tridiagonal matrix with constant off-diagonal.
struct Tridiagonal {
    diag: Vec<f64>,
    off: f64,
}

impl Tridiagonal {
    /// Number of eigenvalues below `x` (Sturm count of negative pivots).
    fn count_below(&self, x: f64) -> usize {
        let b2 = self.off * self.off;
        let mut q = 1.0;
        let mut count = 0;
        for (i, &d) in self.diag.iter().enumerate() {
            q = if i == 0 { d - x } else { d - x - b2 / q };
            if q == 0.0 {
                q = -f64::EPSILON * (d.abs() + b2.sqrt());
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// `j`-th eigenvalue (0-based, ascending) by bisection.
    fn eigenvalue(&self, j: usize) -> f64 {
        let r = 2.0 * self.off.abs();
        let mut lo = self.diag.iter().fold(f64::INFINITY, |m, d| m.min(*d)) - r;
        let mut hi = self.diag.iter().fold(f64::NEG_INFINITY, |m, d| m.max(*d)) + r;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.count_below(mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON * (lo.abs() + hi.abs()).max(1e-300) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundStates {
    pub count: usize,
    pub eigenvalues: Vec<f64>,
    /// Grid size the count was confirmed on (the finer of the two solves).
    pub grid: usize,
}

/// Eigenvalues below `min(threshold, essential proxy)`; the count must survive one
/// grid doubling.
pub fn bound_state_count(problem: &SpectralProblem, threshold: f64) -> Result<BoundStates> {
    let cut = threshold.min(problem.essential_proxy());
    let fine_problem = problem.refined();
    let (coarse, fine) = rayon::join(|| problem.below(cut), || fine_problem.below(cut));
    let (coarse, fine) = (coarse?, fine?);
    if coarse.len() != fine.len() {
        return Err(Error::NonConvergence {
            what: "bound-state count under grid doubling",
            achieved: (fine.len() as f64 - coarse.len() as f64).abs(),
            required: 0.0,
        });
    }
    Ok(BoundStates {
        count: fine.len(),
        eigenvalues: fine,
        grid: fine_problem.grid,
    })
}

/// Magnitude of the `k`-th zero of `Ai` (1-based), from the large-`k` expansion.
/// Used only to size the domain.
fn airy_zero_estimate(k: usize) -> f64 {
    let t = 3.0 * std::f64::consts::PI * (4.0 * k as f64 - 1.0) / 8.0;
    t.powf(2.0 / 3.0) * (1.0 + 5.0 / (48.0 * t * t))
}

/// Lowest `k` eigenvalues of `−u'' + F x u` on the half line with `u(0) = 0`.
///
/// Finite differences at `N` and `2N+1` points are combined as `(4E_{h/2} − E_h)/3`;
/// `N` doubles until two successive extrapolations agree to `1e-7` relative.
pub fn stark_halfline_spectrum(f: f64, k: usize) -> Result<Vec<f64>> {
    if !(f > 0.0) {
        return Err(Error::InvalidArgument("field slope must be positive".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let e_top = f.powf(2.0 / 3.0) * airy_zero_estimate(k);
    let x_max = e_top / f + 12.0 * f.powf(-1.0 / 3.0);
    let mut problem = SpectralProblem::new(Domain::HalfLine { x_max }, Arc::new(move |x: f64| f * x), 255)?;
    let mut prev_e = problem.lowest(k)?;
    let mut prev_extrap: Option<Vec<f64>> = None;
    for _ in 0..8 {
        problem = problem.refined();
        let e = problem.lowest(k)?;
        let extrap: Vec<f64> = e.iter().zip(&prev_e).map(|(fine, coarse)| (4.0 * fine - coarse) / 3.0).collect();
        if let Some(p) = &prev_extrap {
            let change = extrap
                .iter()
                .zip(p)
                .map(|(a, b)| ((a - b) / a).abs())
                .fold(0.0, f64::max);
            if change < 1e-7 {
                return Ok(extrap);
            }
        }
        prev_extrap = Some(extrap);
        prev_e = e;
    }
    Err(Error::NonConvergence {
        what: "Stark spectrum extrapolation",
        achieved: f64::NAN,
        required: 1e-7,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bisection roots of `f` on `(lo, hi)` located by sign changes on a fine scan.
    fn roots(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Vec<f64> {
        let n = 20_000;
        let mut out = Vec::new();
        let step = (hi - lo) / n as f64;
        for i in 0..n {
            let (mut a, mut b) = (lo + i as f64 * step, lo + (i + 1) as f64 * step);
            let (fa, fb) = (f(a), f(b));
            if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() || (fa - fb).abs() > 10.0 {
                continue;
            }
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if f(m).signum() == f(a).signum() {
                    a = m;
                } else {
                    b = m;
                }
            }
            out.push(0.5 * (a + b));
        }
        out
    }

    /// Full-line well of half-width `a`: even states solve `z tan z = √(z0² − z²)`,
    /// odd states `−z cot z = √(z0² − z²)`, with `z0 = a√V₀`.
    fn full_line_oracle(depth: f64, a: f64) -> usize {
        let z0 = a * depth.sqrt();
        let even = roots(|z| z * z.tan() - (z0 * z0 - z * z).sqrt(), 1e-9, z0 - 1e-12);
        let odd = roots(|z| -z / z.tan() - (z0 * z0 - z * z).sqrt(), 1e-9, z0 - 1e-12);
        even.len() + odd.len()
    }

    #[test]
    fn free_segment_has_no_negative_eigenvalues() {
        let p = SpectralProblem::new(Domain::Line { x_max: 10.0 }, Arc::new(|_| 0.0), 400).unwrap();
        assert_eq!(bound_state_count(&p, 0.0).unwrap().count, 0);
    }

    #[test]
    fn full_line_well_counts_match_transcendental_oracle() {
        for z0 in [0.5, 2.0, 3.5, 5.0, 6.5] {
            let depth = z0 * z0;
            let p = SpectralProblem::square_well(Domain::Line { x_max: 12.0 }, depth, 1.0, 2000).unwrap();
            let count = bound_state_count(&p, 0.0).unwrap().count;
            assert_eq!(count, full_line_oracle(depth, 1.0), "z0={z0}");
        }
    }

    #[test]
    fn deeper_wells_never_lose_bound_states() {
        let mut last = 0;
        for k in 0..20 {
            let depth = 0.5 * k as f64;
            let p = SpectralProblem::square_well(Domain::Line { x_max: 12.0 }, depth, 1.0, 600).unwrap();
            let c = p.below(0.0).unwrap().len();
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn harmonic_oscillator_levels() {
        let p = SpectralProblem::new(Domain::Line { x_max: 10.0 }, Arc::new(|x: f64| x * x), 4000).unwrap();
        let e = p.lowest(4).unwrap();
        for (k, v) in e.iter().enumerate() {
            assert!((v - (2 * k + 1) as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn stark_levels_are_increasing_and_scale() {
        let e1 = stark_halfline_spectrum(1.0, 3).unwrap();
        assert!(e1.windows(2).all(|w| w[1] > w[0]));
        let e2 = stark_halfline_spectrum(2.0, 3).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((b / a - 2.0_f64.powf(2.0 / 3.0)).abs() < 1e-5);
        }
        let mut last = f64::INFINITY;
        for f in [1.0, 0.3, 0.1, 0.03] {
            let e = stark_halfline_spectrum(f, 1).unwrap()[0];
            assert!(e < last);
            last = e;
        }
    }
}
