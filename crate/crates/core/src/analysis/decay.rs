//! Single-excitation overlap `|⟨h, e^{iωt} f⟩|²` for a massless field in three
//! dimensions, reduced to the radial integral `∫₀^R r² h̄(r) f(r) e^{irt} dr`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type RadialProfile = Arc<dyn Fn(f64) -> Complex64 + Send + Sync>;

/// Absolute tolerance on the radial integral.
pub const DECAY_TOL: f64 = 1e-6;
const MAX_PANELS: usize = 1 << 20;

#[derive(Clone)]
pub struct FieldOverlapSpec {
    pub f: RadialProfile,
    pub h: RadialProfile,
    /// Profiles are treated as zero beyond `r_max`.
    pub r_max: f64,
}

impl std::fmt::Debug for FieldOverlapSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldOverlapSpec").field("r_max", &self.r_max).finish_non_exhaustive()
    }
}

impl FieldOverlapSpec {
    pub fn new(f: RadialProfile, h: RadialProfile, r_max: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidArgument("r_max must be positive and finite".into()));
        }
        let spec = Self { f, h, r_max };
        let n = 4096;
        let dr = r_max / n as f64;
        let (mut nf, mut nh) = (0.0, 0.0);
        for i in 0..=n {
            let r = i as f64 * dr;
            nf += r * r * (spec.f)(r).norm_sqr() * dr;
            nh += r * r * (spec.h)(r).norm_sqr() * dr;
        }
        if !(nf.is_finite() && nh.is_finite()) {
            return Err(Error::InvalidArgument("radial profile is not square-integrable on the grid".into()));
        }
        Ok(spec)
    }

    /// Real radial profile used for both `f` and `h`.
    pub fn symmetric(profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>, r_max: f64) -> Result<Self> {
        let p: RadialProfile = Arc::new(move |r| Complex64::new(profile(r), 0.0));
        Self::new(p.clone(), p, r_max)
    }

    fn integrand(&self, r: f64) -> Complex64 {
        r * r * (self.h)(r).conj() * (self.f)(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySample {
    pub t: f64,
    pub amplitude: Complex64,
    /// `|amplitude|²`.
    pub value: f64,
    pub error_estimate: f64,
}

/// `∫_{−Δ}^{Δ} s^k e^{ist} ds` for `k ≤ 2`.
fn moment(k: usize, t: f64, half: f64) -> Complex64 {
    let theta = t * half;
    if theta.abs() < 0.5 {
        let mut sum = Complex64::new(0.0, 0.0);
        let mut term = Complex64::new(1.0, 0.0);
        for n in 0..24 {
            if (n + k) % 2 == 0 {
                sum += term * (2.0 / (n + k + 1) as f64);
            }
            term *= Complex64::new(0.0, theta) / (n + 1) as f64;
        }
        return sum * half.powi(k as i32 + 1);
    }
    let (s, c) = theta.sin_cos();
    match k {
        0 => Complex64::new(2.0 * s / t, 0.0),
        1 => Complex64::new(0.0, 2.0 * (s - theta * c) / (t * t)),
        _ => Complex64::new(2.0 * ((theta * theta - 2.0) * s + 2.0 * theta * c) / (t * t * t), 0.0),
    }
}

/// Composite rule on `panels` pairs of subintervals of `[0, R]`: Simpson when the
/// phase across a half panel is at most one radian, Filon otherwise.
fn radial_integral(spec: &FieldOverlapSpec, t: f64, panels: usize) -> Complex64 {
    let half = spec.r_max / (2 * panels) as f64;
    let g: Vec<Complex64> = (0..=2 * panels).map(|i| spec.integrand(i as f64 * half)).collect();
    let mut total = Complex64::new(0.0, 0.0);
    if t * half <= 1.0 {
        for p in 0..panels {
            let r0 = 2 * p;
            let phase = |i: usize| Complex64::from_polar(1.0, t * i as f64 * half);
            total += (g[r0] * phase(r0) + 4.0 * g[r0 + 1] * phase(r0 + 1) + g[r0 + 2] * phase(r0 + 2)) * (half / 3.0);
        }
        return total;
    }
    let (m0, m1, m2) = (moment(0, t, half), moment(1, t, half), moment(2, t, half));
    for p in 0..panels {
        let (gm, g0, gp) = (g[2 * p], g[2 * p + 1], g[2 * p + 2]);
        let b = (gp - gm) / (2.0 * half);
        let q = (gp - 2.0 * g0 + gm) / (2.0 * half * half);
        let centre = (2 * p + 1) as f64 * half;
        total += Complex64::from_polar(1.0, t * centre) * (g0 * m0 + b * m1 + q * m2);
    }
    total
}

fn sample(spec: &FieldOverlapSpec, t: f64) -> Result<DecaySample> {
    let mut panels = ((spec.r_max * (1.0 + t.abs()) * 4.0).ceil() as usize).max(64);
    let mut prev = radial_integral(spec, t, panels);
    loop {
        panels *= 2;
        let next = radial_integral(spec, t, panels);
        let err = (next - prev).norm();
        if err <= DECAY_TOL {
            return Ok(DecaySample {
                t,
                amplitude: next,
                value: next.norm_sqr(),
                error_estimate: err,
            });
        }
        if panels >= MAX_PANELS {
            return Err(Error::NonConvergence {
                what: "radial overlap quadrature",
                achieved: err,
                required: DECAY_TOL,
            });
        }
        prev = next;
    }
}

/// `|∫₀^R r² h̄(r) f(r) e^{irt} dr|²` at each time, panels doubled until successive
/// estimates agree to `DECAY_TOL`.
pub fn field_overlap_decay(spec: &FieldOverlapSpec, times: &[f64]) -> Result<Vec<DecaySample>> {
    times.par_iter().map(|&t| sample(spec, t)).collect()
}

/// `exp(−1/(1 − (r − c)²/w²))` on `|r − c| < w`, zero elsewhere.
pub fn bump(centre: f64, width: f64) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
    Arc::new(move |r: f64| {
        let x = (r - centre) / width;
        if x.abs() < 1.0 {
            (-1.0 / (1.0 - x * x)).exp()
        } else {
            0.0
        }
    })
}
