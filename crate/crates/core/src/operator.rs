//! Dense complex operators on tensor-product spaces.
//!
//! Every operator carries the ordered list of tensor-factor dimensions it acts
//! on. Kronecker ordering is first-factor-outermost: a basis index is
//! `i = Σ_k digit_k · Π_{l>k} dims[l]`. All site embeddings go through
//! [`embed_at_site`] / [`embed_at_sites`] / [`apply_on_factors`], which are the
//! only places that translate between factor digits and flat indices.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative tolerance on `‖A − A†‖_max / ‖A‖_max` for Hermitian operators.
pub const HERMITIAN_TOL: f64 = 1e-9;
/// Tolerance on `‖A†A − I‖_max` for unitary operators.
pub const UNITARY_TOL: f64 = 1e-9;
/// Trace tolerance for density matrices.
pub const TRACE_TOL: f64 = 1e-10;
/// Smallest admissible eigenvalue of a density matrix.
pub const MIN_EIGENVALUE: f64 = -1e-9;

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Structural properties an operator has been validated to have.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags {
    pub hermitian: bool,
    pub unitary: bool,
}

/// Square complex matrix with a declared tensor factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    data: CMatrix,
    dims: Vec<usize>,
    flags: Flags,
}

impl Operator {
    pub fn new(data: CMatrix, dims: Vec<usize>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "operator must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let prod: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || prod != data.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "factor dims {:?} do not multiply to matrix dimension {}",
                dims,
                data.nrows()
            )));
        }
        Ok(Self {
            data,
            dims,
            flags: Flags::default(),
        })
    }

    /// Single-factor operator.
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, vec![n])
    }

    /// Validates Hermiticity and sets the flag.
    pub fn hermitian(data: CMatrix, dims: Vec<usize>) -> Result<Self> {
        Self::new(data, dims)?.validated_hermitian()
    }

    /// Validates unitarity and sets the flag.
    pub fn unitary(data: CMatrix, dims: Vec<usize>) -> Result<Self> {
        let op = Self::new(data, dims)?;
        let defect = op.unitarity_defect();
        if defect > UNITARY_TOL {
            return Err(Error::InvalidArgument(format!(
                "operator is not unitary (defect {defect:.3e})"
            )));
        }
        let flags = Flags {
            unitary: true,
            ..op.flags
        };
        Ok(op.with_flags(flags))
    }

    pub fn validated_hermitian(mut self) -> Result<Self> {
        let deviation = self.hermiticity_deviation();
        let allowed = HERMITIAN_TOL * self.max_abs();
        if deviation > allowed {
            return Err(Error::NotHermitian { deviation, allowed });
        }
        self.flags.hermitian = true;
        Ok(self)
    }

    /// Builds a Hermitian operator from real diagonal entries.
    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let data = CMatrix::from_fn(n, n, |i, j| if i == j { c64(values[i], 0.0) } else { c64(0.0, 0.0) });
        Self {
            data,
            dims: vec![n],
            flags: Flags {
                hermitian: true,
                unitary: false,
            },
        }
    }

    pub fn identity(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            data: CMatrix::identity(n, n),
            dims: dims.to_vec(),
            flags: Flags {
                hermitian: true,
                unitary: true,
            },
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            data: CMatrix::zeros(n, n),
            dims: dims.to_vec(),
            flags: Flags {
                hermitian: true,
                unitary: false,
            },
        }
    }

    pub fn data(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_data(self) -> CMatrix {
        self.data
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn flags(&self) -> Flags {
        self.flags
    }

    pub(crate) fn with_flags(mut self, flags: Flags) -> Self {
        self.flags = flags;
        self
    }

    /// Re-declares the tensor factorization; the total dimension must match.
    pub fn with_dims(self, dims: Vec<usize>) -> Result<Self> {
        let flags = self.flags;
        Ok(Self::new(self.data, dims)?.with_flags(flags))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let n = self.dim();
        let mut dev = 0.0_f64;
        for j in 0..n {
            for i in 0..=j {
                dev = dev.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        dev
    }

    pub fn is_hermitian(&self) -> bool {
        self.flags.hermitian || self.hermiticity_deviation() <= HERMITIAN_TOL * self.max_abs()
    }

    /// `‖A†A − I‖_max`.
    pub fn unitarity_defect(&self) -> f64 {
        let prod = self.data.adjoint() * &self.data;
        max_abs_minus_identity(&prod)
    }

    pub fn trace(&self) -> Complex64 {
        self.data.trace()
    }

    pub fn adjoint(&self) -> Self {
        Self {
            data: self.data.adjoint(),
            dims: self.dims.clone(),
            flags: self.flags,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: &self.data * c64(s, 0.0),
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: self.flags.hermitian,
                unitary: self.flags.unitary && (s.abs() - 1.0).abs() == 0.0,
            },
        }
    }

    pub fn scale_complex(&self, s: Complex64) -> Self {
        Self {
            data: &self.data * s,
            dims: self.dims.clone(),
            flags: Flags::default(),
        }
    }

    /// `A B`; the factorizations must agree.
    pub fn matmul(&self, rhs: &Operator) -> Self {
        assert_eq!(self.dim(), rhs.dim(), "operator dimensions differ");
        Self {
            data: &self.data * &rhs.data,
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: false,
                unitary: self.flags.unitary && rhs.flags.unitary,
            },
        }
    }

    /// `[A, B] = AB − BA`.
    pub fn commutator(&self, rhs: &Operator) -> Self {
        assert_eq!(self.dim(), rhs.dim(), "operator dimensions differ");
        Self {
            data: &self.data * &rhs.data - &rhs.data * &self.data,
            dims: self.dims.clone(),
            flags: Flags::default(),
        }
    }

    /// `U A U†`.
    pub fn conjugate_by(&self, u: &Operator) -> Self {
        let data = &u.data * &self.data * u.data.adjoint();
        Self {
            data,
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: self.flags.hermitian && u.flags.unitary,
                unitary: false,
            },
        }
    }

    /// Maximum absolute entry of `self − other`.
    pub fn max_abs_diff(&self, other: &Operator) -> f64 {
        assert_eq!(self.dim(), other.dim(), "operator dimensions differ");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()))
    }

    /// Eigenvalues of a Hermitian operator in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let (vals, _) = eigh(self)?;
        Ok(vals.iter().copied().collect())
    }
}

impl std::ops::Add for &Operator {
    type Output = Operator;

    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "operator dimensions differ");
        Operator {
            data: &self.data + &rhs.data,
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: self.flags.hermitian && rhs.flags.hermitian,
                unitary: false,
            },
        }
    }
}

impl std::ops::Sub for &Operator {
    type Output = Operator;

    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "operator dimensions differ");
        Operator {
            data: &self.data - &rhs.data,
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: self.flags.hermitian && rhs.flags.hermitian,
                unitary: false,
            },
        }
    }
}

pub(crate) fn max_abs_minus_identity(m: &CMatrix) -> f64 {
    let mut dev = 0.0_f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let target = if i == j { c64(1.0, 0.0) } else { c64(0.0, 0.0) };
            dev = dev.max((m[(i, j)] - target).norm());
        }
    }
    dev
}

/// Validated density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    pub fn new(op: Operator) -> Result<Self> {
        let op = op
            .validated_hermitian()
            .map_err(|e| Error::InvalidState(e.to_string()))?;
        let tr = op.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        if !is_positive_semidefinite(op.data(), -MIN_EIGENVALUE) {
            return Err(Error::InvalidState(format!(
                "smallest eigenvalue below {MIN_EIGENVALUE:e}"
            )));
        }
        Ok(Self { op })
    }

    /// Wraps an operator known to be a density matrix by construction.
    pub(crate) fn new_unchecked(op: Operator) -> Self {
        let flags = Flags {
            hermitian: true,
            ..op.flags
        };
        Self {
            op: op.with_flags(flags),
        }
    }

    pub fn from_matrix(data: CMatrix, dims: Vec<usize>) -> Result<Self> {
        Self::new(Operator::new(data, dims)?)
    }

    /// `|ψ⟩⟨ψ|` for a normalized ket.
    pub fn pure(ket: &CVector, dims: Vec<usize>) -> Result<Self> {
        let norm = ket.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidState(format!("ket norm {norm} differs from 1")));
        }
        let data = ket * ket.adjoint();
        Ok(Self::new_unchecked(Operator::new(data, dims)?))
    }

    /// `|k⟩⟨k|` in a space of dimension `dim`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange(format!("basis state {k} in dimension {dim}")));
        }
        let mut ket = CVector::zeros(dim);
        ket[k] = c64(1.0, 0.0);
        Self::pure(&ket, vec![dim])
    }

    pub fn maximally_mixed(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Self::new_unchecked(Operator::identity(dims).scale(1.0 / n as f64))
    }

    /// Convex combination `Σ w_k ρ_k`.
    pub fn mixture(parts: &[(f64, &DensityMatrix)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty mixture".into()))?;
        let total: f64 = parts.iter().map(|(w, _)| w).sum();
        if parts.iter().any(|(w, _)| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be nonnegative and sum to 1 (sum {total})"
            )));
        }
        let mut acc = CMatrix::zeros(first.1.dim(), first.1.dim());
        for (w, rho) in parts {
            if rho.dim() != first.1.dim() {
                return Err(Error::DimensionMismatch("mixture components differ in dimension".into()));
            }
            acc += rho.op.data() * c64(*w, 0.0);
        }
        Ok(Self::new_unchecked(Operator::new(acc, first.1.dims().to_vec())?))
    }

    pub fn op(&self) -> &Operator {
        &self.op
    }

    pub fn into_operator(self) -> Operator {
        self.op
    }

    pub fn data(&self) -> &CMatrix {
        self.op.data()
    }

    pub fn dims(&self) -> &[usize] {
        self.op.dims()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn purity(&self) -> f64 {
        let d = self.data();
        d.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `Tr(ρ X)`.
    pub fn expectation(&self, x: &Operator) -> Complex64 {
        trace_of_product(self.data(), x.data())
    }

    /// `ρ ⊗ σ`.
    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        Self::new_unchecked(kron(&self.op, &other.op))
    }

    /// `U ρ U†`.
    pub fn evolve(&self, u: &Operator) -> DensityMatrix {
        Self::new_unchecked(self.op.conjugate_by(u))
    }
}

/// `Tr(A B)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = c64(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

fn is_positive_semidefinite(m: &CMatrix, slack: f64) -> bool {
    // Cholesky of the shifted Hermitian part; a non-positive real pivot means
    // an eigenvalue below −slack.
    let n = m.nrows();
    let shift = slack * (1.0 + 1e-3);
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)].re + shift;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if !(pivot > 0.0) {
            return false;
        }
        let d = pivot.sqrt();
        l[(j, j)] = c64(d, 0.0);
        for i in j + 1..n {
            let mut acc = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = acc / d;
        }
    }
    true
}

/// Kronecker product, first factor outermost.
pub fn kron(a: &Operator, b: &Operator) -> Operator {
    let mut dims = a.dims.clone();
    dims.extend_from_slice(&b.dims);
    Operator {
        data: a.data.kronecker(&b.data),
        dims,
        flags: Flags {
            hermitian: a.flags.hermitian && b.flags.hermitian,
            unitary: a.flags.unitary && b.flags.unitary,
        },
    }
}

/// Kronecker product of a nonempty list of operators.
pub fn kron_all(ops: &[&Operator]) -> Operator {
    let (first, rest) = ops.split_first().expect("kron_all needs at least one operator");
    rest.iter().fold((*first).clone(), |acc, op| kron(&acc, op))
}

/// `x` acting on site `m` (0-based) of `sites` identical factors of dimension `site_dim`.
pub fn embed_at_site(x: &Operator, m: usize, sites: usize, site_dim: usize) -> Result<Operator> {
    embed_at_sites(x, &[m], sites, site_dim)
}

/// `x` acting on the ordered site list `targets` (0-based, distinct), identity elsewhere.
///
/// `x` must act on `targets.len()` site factors; its k-th tensor factor is placed
/// on site `targets[k]`.
pub fn embed_at_sites(x: &Operator, targets: &[usize], sites: usize, site_dim: usize) -> Result<Operator> {
    let k = targets.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no target sites".into()));
    }
    if x.dim() != site_dim.pow(k as u32) {
        return Err(Error::DimensionMismatch(format!(
            "operator of dimension {} cannot act on {k} sites of dimension {site_dim}",
            x.dim()
        )));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= sites {
            return Err(Error::IndexOutOfRange(format!("site {t} with {sites} sites")));
        }
        if targets[..i].contains(&t) {
            return Err(Error::InvalidArgument(format!("site {t} repeated")));
        }
    }
    let dims = vec![site_dim; sites];
    let factors: Vec<usize> = targets.to_vec();
    let data = embed_matrix(x.data(), &dims, &factors);
    Ok(Operator {
        data,
        dims,
        flags: x.flags,
    })
}

/// Embeds an operator acting on arbitrary factors of a mixed-dimension space.
pub fn embed_on_factors(x: &Operator, dims: &[usize], factors: &[usize]) -> Result<Operator> {
    check_factors(dims, factors)?;
    let sub: usize = factors.iter().map(|&f| dims[f]).product();
    if sub != x.dim() {
        return Err(Error::DimensionMismatch(format!(
            "operator of dimension {} does not match factors {factors:?} of {dims:?}",
            x.dim()
        )));
    }
    Ok(Operator {
        data: embed_matrix(x.data(), dims, factors),
        dims: dims.to_vec(),
        flags: x.flags,
    })
}

fn check_factors(dims: &[usize], factors: &[usize]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument("empty factor list".into()));
    }
    for (i, &f) in factors.iter().enumerate() {
        if f >= dims.len() {
            return Err(Error::IndexOutOfRange(format!("factor {f} of {}", dims.len())));
        }
        if factors[..i].contains(&f) {
            return Err(Error::InvalidArgument(format!("factor {f} repeated")));
        }
    }
    Ok(())
}

/// Index bookkeeping for a split of the factors into a target group and the rest.
struct FactorSplit {
    /// `full[a * rest_dim + r]` is the flat index with target digits `a` and remaining digits `r`.
    full: Vec<usize>,
    target_dim: usize,
    rest_dim: usize,
}

impl FactorSplit {
    fn new(dims: &[usize], targets: &[usize]) -> Self {
        let n = dims.len();
        let mut strides = vec![1usize; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let rest: Vec<usize> = (0..n).filter(|k| !targets.contains(k)).collect();
        let target_dim: usize = targets.iter().map(|&k| dims[k]).product();
        let rest_dim: usize = rest.iter().map(|&k| dims[k]).product();
        let offsets = |group: &[usize], count: usize| -> Vec<usize> {
            let mut out = Vec::with_capacity(count);
            for mut idx in 0..count {
                let mut flat = 0;
                for &k in group.iter().rev() {
                    flat += (idx % dims[k]) * strides[k];
                    idx /= dims[k];
                }
                out.push(flat);
            }
            out
        };
        let t_off = offsets(targets, target_dim);
        let r_off = offsets(&rest, rest_dim);
        let mut full = Vec::with_capacity(target_dim * rest_dim);
        for a in &t_off {
            for r in &r_off {
                full.push(a + r);
            }
        }
        Self {
            full,
            target_dim,
            rest_dim,
        }
    }

    #[inline]
    fn index(&self, a: usize, r: usize) -> usize {
        self.full[a * self.rest_dim + r]
    }
}

fn embed_matrix(x: &CMatrix, dims: &[usize], factors: &[usize]) -> CMatrix {
    let total: usize = dims.iter().product();
    let split = FactorSplit::new(dims, factors);
    let mut out = CMatrix::zeros(total, total);
    for b in 0..split.target_dim {
        for a in 0..split.target_dim {
            let v = x[(a, b)];
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            for r in 0..split.rest_dim {
                out[(split.index(a, r), split.index(b, r))] = v;
            }
        }
    }
    out
}

/// Adds `coeff · x` embedded on `factors` of `dims` into `target`.
pub(crate) fn accumulate_on_factors(target: &mut CMatrix, coeff: f64, x: &CMatrix, dims: &[usize], factors: &[usize]) {
    let split = FactorSplit::new(dims, factors);
    for b in 0..split.target_dim {
        for a in 0..split.target_dim {
            let v = x[(a, b)] * coeff;
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            for r in 0..split.rest_dim {
                target[(split.index(a, r), split.index(b, r))] += v;
            }
        }
    }
}

/// Applies `op` (acting on `factors` in that order) to a state vector over `dims`.
pub fn apply_on_factors(psi: &CVector, dims: &[usize], factors: &[usize], op: &CMatrix) -> CVector {
    let split = FactorSplit::new(dims, factors);
    let mut out = CVector::zeros(psi.len());
    let mut buf = vec![c64(0.0, 0.0); split.target_dim];
    for r in 0..split.rest_dim {
        for (b, slot) in buf.iter_mut().enumerate() {
            *slot = psi[split.index(b, r)];
        }
        for a in 0..split.target_dim {
            let mut acc = c64(0.0, 0.0);
            for (b, v) in buf.iter().enumerate() {
                acc += op[(a, b)] * v;
            }
            out[split.index(a, r)] = acc;
        }
    }
    out
}

/// Partial trace of a general operator, keeping `keep` (0-based factor indices, any order;
/// the result lists kept factors in their original order).
pub fn partial_trace_op(x: &Operator, keep: &[usize]) -> Result<Operator> {
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    check_factors(x.dims(), &keep)?;
    let dims = x.dims();
    let split = FactorSplit::new(dims, &keep);
    let m = x.data();
    let mut out = CMatrix::zeros(split.target_dim, split.target_dim);
    for b in 0..split.target_dim {
        for a in 0..split.target_dim {
            let mut acc = c64(0.0, 0.0);
            for r in 0..split.rest_dim {
                acc += m[(split.index(a, r), split.index(b, r))];
            }
            out[(a, b)] = acc;
        }
    }
    let kept_dims = keep.iter().map(|&k| dims[k]).collect();
    Ok(Operator {
        data: out,
        dims: kept_dims,
        flags: Flags {
            hermitian: x.flags.hermitian,
            unitary: false,
        },
    })
}

/// Reduced density matrix on the factors `keep`.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    Ok(DensityMatrix::new_unchecked(partial_trace_op(rho.op(), keep)?))
}

/// Partial transpose of the factors in `factors`.
pub fn partial_transpose(x: &Operator, factors: &[usize]) -> Result<Operator> {
    check_factors(x.dims(), factors)?;
    let split = FactorSplit::new(x.dims(), factors);
    let m = x.data();
    let n = x.dim();
    let mut out = CMatrix::zeros(n, n);
    for r in 0..split.rest_dim {
        for s in 0..split.rest_dim {
            for a in 0..split.target_dim {
                for b in 0..split.target_dim {
                    out[(split.index(a, r), split.index(b, s))] = m[(split.index(b, r), split.index(a, s))];
                }
            }
        }
    }
    Ok(Operator {
        data: out,
        dims: x.dims.clone(),
        flags: Flags {
            hermitian: x.flags.hermitian,
            unitary: false,
        },
    })
}

/// Hermitian eigendecomposition: ascending eigenvalues and matching eigenvector columns.
pub fn eigh(h: &Operator) -> Result<(DVector<f64>, CMatrix)> {
    if !h.is_hermitian() {
        let deviation = h.hermiticity_deviation();
        return Err(Error::NotHermitian {
            deviation,
            allowed: HERMITIAN_TOL * h.max_abs(),
        });
    }
    let sym = (h.data() + h.data().adjoint()) * c64(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vecs = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((vals, vecs))
}

/// Spectral data of a Hermitian operator, reusable for `e^{−ith}` at many times.
#[derive(Clone, Debug)]
pub struct Spectral {
    pub values: DVector<f64>,
    pub vectors: CMatrix,
    dims: Vec<usize>,
}

impl Spectral {
    pub fn new(h: &Operator) -> Result<Self> {
        let (values, vectors) = eigh(h)?;
        Ok(Self {
            values,
            vectors,
            dims: h.dims().to_vec(),
        })
    }

    /// `e^{−i t h}`.
    pub fn propagator(&self, t: f64) -> Operator {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let phase = Complex64::from_polar(1.0, -t * self.values[j]);
            for i in 0..n {
                scaled[(i, j)] *= phase;
            }
        }
        Operator {
            data: scaled * self.vectors.adjoint(),
            dims: self.dims.clone(),
            flags: Flags {
                hermitian: false,
                unitary: true,
            },
        }
    }
}

/// `e^{−i t h}` for Hermitian `h`, via eigendecomposition.
pub fn expm_hermitian(h: &Operator, t: f64) -> Result<Operator> {
    Ok(Spectral::new(h)?.propagator(t))
}

/// `Tr √(X†X)`.
pub fn trace_norm(x: &Operator) -> f64 {
    if x.hermiticity_deviation() <= 1e-13 * x.max_abs().max(1e-300) {
        if let Ok(vals) = x.eigenvalues() {
            return vals.iter().map(|v| v.abs()).sum();
        }
    }
    x.data().clone().svd(false, false).singular_values.sum()
}

/// Unitary permuting the sites of `perm.len()` identical factors: site `k` moves to `perm[k]`.
pub fn site_permutation(perm: &[usize], site_dim: usize) -> Result<Operator> {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    let total = site_dim.pow(n as u32);
    let mut data = CMatrix::zeros(total, total);
    let mut digits = vec![0usize; n];
    let mut moved = vec![0usize; n];
    for idx in 0..total {
        let mut rem = idx;
        for k in (0..n).rev() {
            digits[k] = rem % site_dim;
            rem /= site_dim;
        }
        for k in 0..n {
            moved[perm[k]] = digits[k];
        }
        let target = moved.iter().fold(0, |acc, &d| acc * site_dim + d);
        data[(target, idx)] = c64(1.0, 0.0);
    }
    Ok(Operator {
        data,
        dims: vec![site_dim; n],
        flags: Flags {
            hermitian: false,
            unitary: true,
        },
    })
}

/// If `x` acts as `I ⊗ … ⊗ g ⊗ … ⊗ I` with `g` on `factor`, returns `g`.
pub fn local_factor(x: &Operator, factor: usize) -> Result<Option<Operator>> {
    let dims = x.dims().to_vec();
    if factor >= dims.len() {
        return Err(Error::IndexOutOfRange(format!("factor {factor} of {}", dims.len())));
    }
    let rest: usize = x.dim() / dims[factor];
    let reduced = partial_trace_op(x, &[factor])?.scale(1.0 / rest as f64);
    let reembedded = embed_on_factors(&reduced, &dims, &[factor])?;
    let scale = x.max_abs().max(1.0);
    if reembedded.max_abs_diff(x) <= 1e-12 * scale {
        Ok(Some(reduced.with_flags(x.flags)))
    } else {
        Ok(None)
    }
}

/// Splits `h = Σ_j h_j` with `h_j` local to factor `j`; `None` if `h` couples factors.
///
/// Identity shifts are distributed evenly, so `Σ_j embed(h_j) = h` exactly.
pub fn split_local_sum(h: &Operator) -> Result<Option<Vec<Operator>>> {
    let dims = h.dims().to_vec();
    let n = dims.len();
    let total = h.dim() as f64;
    let mean = h.trace() / total;
    let mut parts = Vec::with_capacity(n);
    let mut rebuilt = Operator::zeros(&dims);
    for j in 0..n {
        let rest = h.dim() / dims[j];
        let reduced = partial_trace_op(h, &[j])?.scale(1.0 / rest as f64);
        let shift = mean * c64((n - 1) as f64 / n as f64, 0.0);
        let shifted = Operator::new(
            reduced.data() - CMatrix::identity(dims[j], dims[j]) * shift,
            vec![dims[j]],
        )?;
        let shifted = if h.is_hermitian() {
            shifted.validated_hermitian()?
        } else {
            shifted
        };
        rebuilt = &rebuilt + &embed_on_factors(&shifted, &dims, &[j])?;
        parts.push(shifted);
    }
    if rebuilt.max_abs_diff(h) <= 1e-12 * h.max_abs().max(1.0) {
        Ok(Some(parts))
    } else {
        Ok(None)
    }
}

const BINARY_MAGIC: &[u8; 4] = b"MFOP";
const BINARY_VERSION: u32 = 1;

impl Operator {
    /// Binary layout (all little-endian):
    ///
    /// ```text
    /// magic   4 bytes   "MFOP"
    /// version u32       1
    /// rank    u32       number of tensor factors
    /// dims    rank × u32
    /// data    d·d × (f64 re, f64 im), column-major
    /// ```
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        // nalgebra storage is column-major already.
        for z in self.data.iter() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("bad operator magic".into()));
        }
        let version = read_u32(r)?;
        if version != BINARY_VERSION {
            return Err(Error::Parse(format!("unsupported operator version {version}")));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 64 {
            return Err(Error::Parse(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n * n);
        let mut buf = [0u8; 8];
        for _ in 0..n * n {
            r.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf);
            r.read_exact(&mut buf)?;
            let im = f64::from_le_bytes(buf);
            values.push(c64(re, im));
        }
        Operator::new(CMatrix::from_vec(n, n, values), dims)
    }

    /// Human-readable form: a `dims` header line, then one line per row of
    /// whitespace-separated `re,im` pairs. Lines starting with `#` are comments.
    pub fn to_text(&self) -> String {
        let mut out = String::from("dims");
        for d in &self.dims {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
        for i in 0..self.dim() {
            let row: Vec<String> = (0..self.dim())
                .map(|j| {
                    let z = self.data[(i, j)];
                    format!("{:e},{:e}", z.re, z.im)
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty operator text".into()))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("dims") {
            return Err(Error::Parse("operator text must start with `dims`".into()));
        }
        let dims = tokens
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("dims: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = CMatrix::zeros(n, n);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if i >= n {
                return Err(Error::Parse("too many rows".into()));
            }
            let entries: Vec<&str> = line.split_whitespace().collect();
            if entries.len() != n {
                return Err(Error::Parse(format!("row {i} has {} entries, expected {n}", entries.len())));
            }
            for (j, e) in entries.iter().enumerate() {
                let (re, im) = e
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("entry `{e}` is not `re,im`")))?;
                let re: f64 = re.parse().map_err(|err| Error::Parse(format!("`{re}`: {err}")))?;
                let im: f64 = im.parse().map_err(|err| Error::Parse(format!("`{im}`: {err}")))?;
                data[(i, j)] = c64(re, im);
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::Parse(format!("expected {n} rows, found {rows}")));
        }
        Operator::new(data, dims)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Common single-qubit matrices.
pub mod pauli {
    use super::*;

    pub fn x() -> Operator {
        herm2([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    }

    pub fn y() -> Operator {
        herm2([[0.0, 0.0], [0.0, -1.0], [0.0, 1.0], [0.0, 0.0]])
    }

    pub fn z() -> Operator {
        Operator::diagonal(&[1.0, -1.0])
    }

    fn herm2(e: [[f64; 2]; 4]) -> Operator {
        let data = CMatrix::from_row_slice(
            2,
            2,
            &[c64(e[0][0], e[0][1]), c64(e[1][0], e[1][1]), c64(e[2][0], e[2][1]), c64(e[3][0], e[3][1])],
        );
        Operator::hermitian(data, vec![2]).expect("Pauli matrices are Hermitian")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_density(rng: &mut ChaCha8Rng, dims: &[usize]) -> DensityMatrix {
        let n: usize = dims.iter().product();
        let a = CMatrix::from_fn(n, n, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let mut m = &a * a.adjoint();
        let tr = m.trace();
        m /= tr;
        DensityMatrix::from_matrix(m, dims.to_vec()).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Operator {
        let a = CMatrix::from_fn(n, n, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = (&a + a.adjoint()) * c64(0.5 * scale, 0.0);
        Operator::hermitian(h, vec![n]).unwrap()
    }

    #[test]
    fn kron_identities() {
        let i2 = Operator::identity(&[2]);
        let i4 = kron(&i2, &i2);
        assert_eq!(i4.data(), &CMatrix::identity(4, 4));
        assert_eq!(i4.dims(), &[2, 2]);

        let sx = kron(&pauli::x(), &i2);
        let expected = CMatrix::from_fn(4, 4, |i, j| if (i + 2 == j) || (j + 2 == i) { c64(1.0, 0.0) } else { c64(0.0, 0.0) });
        assert_eq!(sx.data(), &expected);

        let a = Operator::identity(&[2]);
        let b = Operator::identity(&[3]);
        let ab = kron(&a, &b);
        assert_eq!(ab.dims(), &[2, 3]);
        assert_eq!(ab.dim(), 6);
    }

    #[test]
    fn kron_is_associative() {
        // Small integer entries keep every product exact.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut int_op = |n: usize| {
            Operator::from_matrix(CMatrix::from_fn(n, n, |_, _| {
                c64(rng.random_range(-9..10) as f64, rng.random_range(-9..10) as f64)
            }))
            .unwrap()
        };
        let a = int_op(2);
        let b = int_op(3);
        let c = int_op(2);
        let left = kron(&kron(&a, &b), &c);
        let right = kron(&a, &kron(&b, &c));
        assert_eq!(left.data(), right.data());
        assert_eq!(left.dims(), right.dims());
    }

    #[test]
    fn embedding_matches_kron() {
        let z1 = embed_at_site(&pauli::z(), 0, 2, 2).unwrap();
        assert_eq!(z1.data(), kron(&pauli::z(), &Operator::identity(&[2])).data());
        let x2 = embed_at_site(&pauli::x(), 1, 2, 2).unwrap();
        assert_eq!(x2.data(), kron(&Operator::identity(&[2]), &pauli::x()).data());
        let id = embed_at_site(&Operator::identity(&[3]), 1, 3, 3).unwrap();
        assert_eq!(id.data(), &CMatrix::identity(27, 27));
        assert!(matches!(embed_at_site(&pauli::x(), 2, 2, 2), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn embedding_on_reversed_sites_swaps_factors() {
        let xz = kron(&pauli::x(), &pauli::z());
        let placed = embed_at_sites(&xz, &[2, 0], 3, 2).unwrap();
        let expected = kron_all(&[&pauli::z(), &Operator::identity(&[2]), &pauli::x()]);
        assert_eq!(placed.data(), expected.data());
    }

    #[test]
    fn apply_on_factors_matches_dense_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [2, 3, 2];
        let op = random_hermitian(&mut rng, 4, 1.0);
        let psi = CVector::from_fn(12, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let dense = embed_on_factors(&op.clone().with_dims(vec![2, 2]).unwrap(), &dims, &[2, 0]).unwrap();
        let direct = apply_on_factors(&psi, &dims, &[2, 0], op.data());
        assert!((dense.data() * &psi - direct).norm() < 1e-13);
    }

    #[test]
    fn partial_trace_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_density(&mut rng, &[2]);
        let b = random_density(&mut rng, &[3]);
        let ab = a.tensor(&b);
        let back = partial_trace(&ab, &[0]).unwrap();
        assert!(back.op().max_abs_diff(a.op()) < 1e-14);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = CVector::from_vec(vec![c64(s, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(s, 0.0)]);
        let rho = DensityMatrix::pure(&bell, vec![2, 2]).unwrap();
        let half = partial_trace(&rho, &[0]).unwrap();
        assert!(half.op().max_abs_diff(DensityMatrix::maximally_mixed(&[2]).op()) < 1e-15);

        let all = partial_trace(&ab, &[0, 1]).unwrap();
        assert_eq!(all.data(), ab.data());
        assert!(partial_trace(&ab, &[2]).is_err());
    }

    #[test]
    fn partial_trace_preserves_trace_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let da = 1 + trial % 4;
            let db = 1 + (trial / 4) % 4;
            let rho = random_density(&mut rng, &[da, db]);
            for keep in [[0usize], [1usize]] {
                let red = partial_trace(&rho, &keep).unwrap();
                assert!((red.op().trace().re - 1.0).abs() < 1e-12);
                let min = red.op().eigenvalues().unwrap()[0];
                assert!(min >= -1e-12, "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn expm_examples() {
        let z = pauli::z();
        let u0 = expm_hermitian(&z, 0.0).unwrap();
        assert!(u0.max_abs_diff(&Operator::identity(&[2])) < 1e-15);

        let t = 0.73;
        let u = expm_hermitian(&z, t).unwrap();
        assert!((u.data()[(0, 0)] - Complex64::from_polar(1.0, -t)).norm() < 1e-14);
        assert!((u.data()[(1, 1)] - Complex64::from_polar(1.0, t)).norm() < 1e-14);
        assert!(u.data()[(0, 1)].norm() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_hermitian(&mut rng, 4, 3.0);
        let composed = expm_hermitian(&h, 0.4).unwrap().matmul(&expm_hermitian(&h, 1.1).unwrap());
        assert!(composed.max_abs_diff(&expm_hermitian(&h, 1.5).unwrap()) < 1e-10);

        let bad = Operator::from_matrix(CMatrix::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0)])).unwrap();
        assert!(matches!(expm_hermitian(&bad, 1.0), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn expm_is_unitary_for_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let mut h = random_hermitian(&mut rng, n, 1.0);
            let norm = h.data().clone().svd(false, false).singular_values.max();
            h = h.scale(rng.random_range(0.0..10.0) / norm);
            let t = rng.random_range(0.0..10.0);
            let u = expm_hermitian(&h, t).unwrap();
            assert!(u.unitarity_defect() <= 1e-10);
        }
    }

    #[test]
    fn trace_norm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = random_density(&mut rng, &[3]);
        assert!((trace_norm(rho.op()) - 1.0).abs() < 1e-10);
        assert!((trace_norm(&Operator::diagonal(&[1.0, -2.0])) - 3.0).abs() < 1e-14);

        let x = Operator::from_matrix(CMatrix::from_fn(3, 3, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))).unwrap();
        let u = expm_hermitian(&random_hermitian(&mut rng, 3, 2.0), 1.0).unwrap();
        assert!((trace_norm(&x.conjugate_by(&u)) - trace_norm(&x)).abs() < 1e-10);
    }

    #[test]
    fn half_trace_distance_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_density(&mut rng, &[2, 2]);
            let b = random_density(&mut rng, &[2, 2]);
            let d = trace_norm(&(a.op() - b.op())) / 2.0;
            assert!((0.0..=1.0 + 1e-12).contains(&d));
        }
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(Operator::diagonal(&[0.5, 0.6])).is_err());
        assert!(DensityMatrix::new(Operator::diagonal(&[1.1, -0.1])).is_err());
        assert!(DensityMatrix::new(Operator::diagonal(&[0.25, 0.75])).is_ok());
        assert!(Operator::new(CMatrix::zeros(4, 4), vec![2, 3]).is_err());
    }

    #[test]
    fn locality_detection() {
        let g = embed_on_factors(&pauli::x(), &[2, 3], &[0]).unwrap();
        let local = local_factor(&g, 0).unwrap().unwrap();
        assert!(local.max_abs_diff(&pauli::x()) < 1e-15);
        assert!(local_factor(&g, 1).unwrap().is_none());

        let h = &embed_on_factors(&pauli::z(), &[2, 2], &[0]).unwrap()
            + &embed_on_factors(&pauli::x().scale(0.5), &[2, 2], &[1]).unwrap();
        let parts = split_local_sum(&h).unwrap().unwrap();
        assert_eq!(parts.len(), 2);
        let coupled = kron(&pauli::x(), &pauli::x());
        assert!(split_local_sum(&coupled).unwrap().is_none());
    }

    #[test]
    fn site_permutation_conjugates_embeddings() {
        let swap = site_permutation(&[1, 0], 2).unwrap();
        let a = embed_at_site(&pauli::x(), 0, 2, 2).unwrap();
        let b = embed_at_site(&pauli::x(), 1, 2, 2).unwrap();
        assert!(a.conjugate_by(&swap).max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn partial_transpose_of_product_is_product_of_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_density(&mut rng, &[2]);
        let b = random_density(&mut rng, &[3]);
        let pt = partial_transpose(a.tensor(&b).op(), &[1]).unwrap();
        let bt = Operator::new(b.data().transpose(), vec![3]).unwrap();
        assert!(pt.max_abs_diff(&kron(a.op(), &bt)) < 1e-15);
    }

    #[test]
    fn text_format_parses_fixture() {
        let text = "# sigma_y\ndims 2\n0,0 0,-1\n0,1 0,0\n";
        let op = Operator::from_text(text).unwrap();
        assert_eq!(op.data(), pauli::y().data());
        assert!(Operator::from_text("dims 2\n0,0 1,0\n").is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trips(entries in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 36)) {
            let data = CMatrix::from_iterator(6, 6, entries.iter().map(|&(r, i)| c64(r, i)));
            let op = Operator::new(data, vec![2, 3]).unwrap();
            let mut bytes = Vec::new();
            op.write_binary(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 36 * 16);
            let back = Operator::read_binary(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &op);
            let text_back = Operator::from_text(&op.to_text()).unwrap();
            prop_assert_eq!(text_back.data(), op.data());
            prop_assert_eq!(text_back.dims(), op.dims());
        }
    }
}
