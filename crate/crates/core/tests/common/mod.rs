//! Independent reference values and benchmark builders shared by the integration tests.
#![allow(dead_code)]

use meanfield_core::model::{Coupling, InteractionId, SiteModel, SystemModel};
use meanfield_core::operator::{c64, pauli, CMatrix, CVector, DensityMatrix};
use meanfield_core::ReservoirEnsembleState;
use num_complex::Complex64;

pub fn ket(re: &[f64]) -> CVector {
    CVector::from_iterator(re.len(), re.iter().map(|&x| c64(x, 0.0)))
}

pub fn plus() -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DensityMatrix::pure(&ket(&[s, s]), vec![2]).unwrap()
}

pub fn minus() -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DensityMatrix::pure(&ket(&[s, -s]), vec![2]).unwrap()
}

pub fn bell() -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DensityMatrix::pure(&ket(&[s, 0.0, 0.0, s]), vec![2, 2]).unwrap()
}

/// `H_S = σ_z`, `G = σ_x`; sites `h = σ_z`, `v = σ_x`.
pub fn qubit_benchmark() -> (SystemModel, SiteModel) {
    let sys = SystemModel::new(pauli::z(), vec![Coupling::new(pauli::x(), InteractionId::Site(0))]).unwrap();
    let site = SiteModel::new(pauli::z(), vec![pauli::x()]).unwrap();
    (sys, site)
}

/// Two benchmark qubits sharing one reservoir, each coupled through its own `σ_x`.
pub fn two_qubit_benchmark() -> (SystemModel, SiteModel) {
    let z = pauli::z().data().clone();
    let x = pauli::x().data().clone();
    let id = CMatrix::identity(2, 2);
    let h = z.kronecker(&id) + id.kronecker(&z);
    let g1 = x.kronecker(&id);
    let g2 = id.kronecker(&x);
    let op = |m: CMatrix| meanfield_core::Operator::new(m, vec![2, 2]).unwrap();
    let sys = SystemModel::with_subsystems(
        op(h),
        vec![
            Coupling::new(op(g1), InteractionId::Site(0)),
            Coupling::new(op(g2), InteractionId::Site(0)),
        ],
        vec![2, 2],
    )
    .unwrap();
    let site = SiteModel::new(pauli::z(), vec![pauli::x()]).unwrap();
    (sys, site)
}

pub fn product_plus() -> ReservoirEnsembleState {
    ReservoirEnsembleState::product(plus())
}

/// `e^{iht} x e^{−iht}` for a diagonal 2×2 `h = diag(a, b)`, written out entrywise.
pub fn heisenberg_diag2(a: f64, b: f64, x: &CMatrix, t: f64) -> CMatrix {
    let phase = Complex64::from_polar(1.0, (a - b) * t);
    CMatrix::from_row_slice(2, 2, &[x[(0, 0)], x[(0, 1)] * phase, x[(1, 0)] * phase.conj(), x[(1, 1)]])
}

pub fn tr2(rho: &CMatrix, x: &CMatrix) -> Complex64 {
    (rho * x).trace()
}

/// `F(x) = e^{−x²} ∫₀^x e^{y²} dy` from the positive series of the integral.
pub fn dawson(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = 0.0;
    for k in 0..400 {
        let add = term / (2 * k + 1) as f64;
        sum += add;
        if add < 1e-18 * sum {
            break;
        }
        term *= x2 / (k + 1) as f64;
    }
    (-x2).exp() * sum
}

/// `∫₀^∞ r² e^{−r²} e^{irt} dr`.
pub fn gaussian_overlap(t: f64) -> Complex64 {
    let re = std::f64::consts::PI.sqrt() / 8.0 * (2.0 - t * t) * (-t * t / 4.0).exp();
    let x = t / 2.0;
    let f = dawson(x);
    let f2 = -2.0 * f - 2.0 * x + 4.0 * x * x * f;
    Complex64::new(re, -f2 / 4.0)
}

/// Roots of `f` on `(lo, hi)` found by bisection from sign changes on a fine scan.
/// Pole crossings (large jumps) are skipped.
pub fn bracketed_roots(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = 20_000;
    let step = (hi - lo) / n as f64;
    let mut out = Vec::new();
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

/// Bound states of `−u'' − V₀ 1_{[0,a)} u` on the half line with `u(0) = 0`:
/// roots of `−z cot z = √(z0² − z²)` with `z0 = a√V₀`.
pub fn halfline_well_count(depth: f64, a: f64) -> usize {
    let z0 = a * depth.sqrt();
    bracketed_roots(|z| -z / z.tan() - (z0 * z0 - z * z).sqrt(), 1e-9, z0 - 1e-12).len()
}
