//! Finite-dimensional nilpotent Lie algebras given by structure constants.
//!
//! Elements are coordinate vectors in a fixed basis `{X_1, …, X_n}` (stored
//! zero-based). The bracket is `[X_i, X_j] = Σ_k c_ij^k X_k`. Every algebra
//! here is nilpotent, so `exp(ad_x)` and the BCH series are finite sums.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, LabError, Result};
use crate::tolerances::EXACT;

/// Coordinates of a Lie algebra element in the basis `{X_i}`.
pub type AlgebraVector = DVector<f64>;

/// Highest nilpotency step the truncated BCH product is exact for.
pub const MAX_BCH_STEP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
struct BracketTerm {
    i: usize,
    j: usize,
    k: usize,
    c: f64,
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Reusable buffers for the in-place BCH product.
#[derive(Debug, Clone)]
pub(crate) struct BchScratch {
    xy: Vec<f64>,
    x_xy: Vec<f64>,
    y_xy: Vec<f64>,
    y_x_xy: Vec<f64>,
    ad: Vec<f64>,
    ad_next: Vec<f64>,
    entries: Vec<(usize, usize, f64)>,
}

impl BchScratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            xy: vec![0.0; dim],
            x_xy: vec![0.0; dim],
            y_xy: vec![0.0; dim],
            y_x_xy: vec![0.0; dim],
            ad: vec![0.0; dim * dim],
            ad_next: vec![0.0; dim * dim],
            entries: Vec::new(),
        }
    }

    pub(crate) fn fit(&mut self, dim: usize) {
        if self.xy.len() != dim {
            *self = Self::new(dim);
        }
    }
}

/// Structure constants of a nilpotent Lie algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct LieAlgebraSpec {
    dim: usize,
    step: usize,
    /// Dense `c[i][j][k]`, flattened as `(i * dim + j) * dim + k`.
    structure: Vec<f64>,
    terms: Vec<BracketTerm>,
}

/// On-disk algebra definition: the dense tensor `c_ij^k` stored at
/// `structure[(i * dim + j) * dim + k]` (zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraFile {
    pub dim: usize,
    pub step: usize,
    pub structure: Vec<f64>,
    /// Optional 1-based generator indices for the driving fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<usize>>,
}

impl AlgebraFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Builds the algebra and rejects it unless antisymmetry, Jacobi and the
    /// declared nilpotency step all check out.
    pub fn to_spec(&self) -> Result<LieAlgebraSpec> {
        let alg = LieAlgebraSpec::new(self.dim, self.step, self.structure.clone())?;
        let r = alg.structure_check();
        if !r.passed {
            return Err(LabError::InvalidAlgebra(format!(
                "structure check failed: antisymmetry {:.1e}, Jacobi {:.1e}, step {:?} (declared {})",
                r.max_antisymmetry, r.max_jacobi, r.verified_step, r.declared_step
            )));
        }
        Ok(alg)
    }

    /// Zero-based indices `k` with some `c_ij^k ≠ 0`.
    pub fn derived_indices(&self) -> Vec<usize> {
        let d = self.dim;
        (0..d)
            .filter(|&k| (0..d * d).any(|ij| self.structure.get(ij * d + k).is_some_and(|c| *c != 0.0)))
            .collect()
    }
}

/// Result of [`LieAlgebraSpec::structure_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub max_antisymmetry: f64,
    pub max_jacobi: f64,
    /// Smallest `s` with all `(s+1)`-fold brackets zero; `None` if not nilpotent.
    pub verified_step: Option<usize>,
    pub declared_step: usize,
    pub passed: bool,
}

impl LieAlgebraSpec {
    /// Builds an algebra from a dense tensor. Algebraic invariants are not
    /// enforced here; see [`structure_check`](Self::structure_check).
    pub fn new(dim: usize, step: usize, structure: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(LabError::InvalidAlgebra("dim must be positive".into()));
        }
        if step == 0 {
            return Err(LabError::InvalidAlgebra("step must be positive".into()));
        }
        if structure.len() != dim * dim * dim {
            return Err(LabError::InvalidAlgebra(format!(
                "structure tensor has {} entries, expected {}",
                structure.len(),
                dim * dim * dim
            )));
        }
        if structure.iter().any(|c| !c.is_finite()) {
            return Err(LabError::InvalidAlgebra("non-finite structure constant".into()));
        }
        let mut terms = Vec::new();
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let c = structure[(i * dim + j) * dim + k];
                    if c != 0.0 {
                        terms.push(BracketTerm { i, j, k, c });
                    }
                }
            }
        }
        Ok(Self {
            dim,
            step,
            structure,
            terms,
        })
    }

    /// Builds an algebra from 1-based `(i, j, k, c)` entries with `i < j`,
    /// completing antisymmetrically.
    pub fn from_brackets(dim: usize, step: usize, brackets: &[(usize, usize, usize, f64)]) -> Result<Self> {
        let mut structure = vec![0.0; dim * dim * dim];
        for &(i, j, k, c) in brackets {
            if i == 0 || j == 0 || k == 0 || i > dim || j > dim || k > dim {
                return Err(LabError::InvalidAlgebra(format!(
                    "bracket index ({i},{j},{k}) outside 1..={dim}"
                )));
            }
            if i >= j {
                return Err(LabError::InvalidAlgebra(format!(
                    "bracket entries must have i < j, got ({i},{j})"
                )));
            }
            let (i, j, k) = (i - 1, j - 1, k - 1);
            structure[(i * dim + j) * dim + k] += c;
            structure[(j * dim + i) * dim + k] -= c;
        }
        Self::new(dim, step, structure)
    }

    pub fn abelian(dim: usize) -> Result<Self> {
        Self::new(dim, 1, vec![0.0; dim * dim * dim])
    }

    /// 3-dim Heisenberg algebra, `[X_1, X_2] = X_3`.
    pub fn heisenberg() -> Self {
        Self::from_brackets(3, 2, &[(1, 2, 3, 1.0)]).expect("valid constants")
    }

    /// 4-dim step-3 algebra with `[X_1, X_2] = X_3`, `[X_1, X_3] = X_4`.
    pub fn four_dim_example() -> Self {
        Self::from_brackets(4, 3, &[(1, 2, 3, 1.0), (1, 3, 4, 1.0)]).expect("valid constants")
    }

    /// Standard filiform algebra `[X_1, X_j] = X_{j+1}` of the given dimension
    /// (step `dim - 1`).
    pub fn filiform(dim: usize) -> Result<Self> {
        if dim < 3 {
            return Err(LabError::InvalidAlgebra("filiform algebra needs dim >= 3".into()));
        }
        let brackets: Vec<_> = (2..dim).map(|j| (1, j, j + 1, 1.0)).collect();
        Self::from_brackets(dim, dim - 1, &brackets)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `c_ij^k`, zero-based.
    pub fn constant(&self, i: usize, j: usize, k: usize) -> f64 {
        self.structure[(i * self.dim + j) * self.dim + k]
    }

    pub fn basis(&self, i: usize) -> AlgebraVector {
        let mut v = AlgebraVector::zeros(self.dim);
        v[i] = 1.0;
        v
    }

    pub fn zero(&self) -> AlgebraVector {
        AlgebraVector::zeros(self.dim)
    }

    pub fn bracket(&self, x: &AlgebraVector, y: &AlgebraVector) -> Result<AlgebraVector> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, y.len())?;
        Ok(self.bracket_unchecked(x, y))
    }

    pub(crate) fn bracket_unchecked(&self, x: &AlgebraVector, y: &AlgebraVector) -> AlgebraVector {
        let mut out = AlgebraVector::zeros(self.dim);
        for t in &self.terms {
            out[t.k] += t.c * x[t.i] * y[t.j];
        }
        out
    }

    /// Matrix of `ad_x = [x, ·]`; column `j` is `[x, X_j]`.
    pub fn ad_matrix(&self, x: &AlgebraVector) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.ad_matrix_unchecked(x))
    }

    pub(crate) fn ad_matrix_unchecked(&self, x: &AlgebraVector) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for t in &self.terms {
            m[(t.k, t.j)] += t.c * x[t.i];
        }
        m
    }

    /// `e^{ad_x}` as the finite sum `Σ_{j ≤ step} ad_x^j / j!`.
    pub fn exp_ad(&self, x: &AlgebraVector) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.exp_ad_unchecked(x))
    }

    pub(crate) fn exp_ad_unchecked(&self, x: &AlgebraVector) -> DMatrix<f64> {
        let ad = self.ad_matrix_unchecked(x);
        let mut out = DMatrix::identity(self.dim, self.dim);
        if self.step <= 1 {
            return out;
        }
        let mut power = ad.clone();
        out += &power;
        // ad_x^j vanishes for j >= step on a step-`step` algebra
        for j in 2..self.step {
            power = &power * &ad / j as f64;
            out += &power;
        }
        out
    }

    /// `log(exp(x) exp(y))` from the BCH series truncated at order 4.
    pub fn bch_log_product(&self, x: &AlgebraVector, y: &AlgebraVector) -> Result<AlgebraVector> {
        if self.step > MAX_BCH_STEP {
            return Err(LabError::UnsupportedStep(self.step));
        }
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, y.len())?;
        Ok(self.bch_unchecked(x, y))
    }

    pub(crate) fn bch_unchecked(&self, x: &AlgebraVector, y: &AlgebraVector) -> AlgebraVector {
        let mut z = AlgebraVector::zeros(self.dim);
        self.bch_into(
            x.as_slice(),
            y.as_slice(),
            z.as_mut_slice(),
            &mut BchScratch::new(self.dim),
        );
        z
    }

    pub(crate) fn bracket_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            out[t.k] += t.c * x[t.i] * y[t.j];
        }
    }

    /// Allocation-free BCH product written into `out`.
    pub(crate) fn bch_into(&self, x: &[f64], y: &[f64], out: &mut [f64], s: &mut BchScratch) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = a + b;
        }
        if self.step < 2 {
            return;
        }
        self.bracket_into(x, y, &mut s.xy);
        axpy(out, 0.5, &s.xy);
        if self.step < 3 {
            return;
        }
        self.bracket_into(x, &s.xy, &mut s.x_xy);
        // [y,[y,x]] = -[y,[x,y]]
        self.bracket_into(y, &s.xy, &mut s.y_xy);
        axpy(out, 1.0 / 12.0, &s.x_xy);
        axpy(out, -1.0 / 12.0, &s.y_xy);
        if self.step < 4 {
            return;
        }
        self.bracket_into(y, &s.x_xy, &mut s.y_x_xy);
        axpy(out, -1.0 / 24.0, &s.y_x_xy);
    }

    /// Upper bound `Σ |c_ij^k x_i| ≥ ‖ad_x‖_F`.
    pub(crate) fn ad_norm_bound(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| (t.c * x[t.i]).abs()).sum()
    }

    /// `‖e^{ad_x}‖_F²` by Horner's rule `M ← I + ad_x M / p`, `p = step−1, …, 1`,
    /// multiplying only by the nonzero entries of `ad_x`.
    pub(crate) fn exp_ad_frobenius_sq(&self, x: &[f64], s: &mut BchScratch) -> f64 {
        let d = self.dim;
        if self.step <= 1 {
            return d as f64;
        }
        s.entries.clear();
        for t in &self.terms {
            let v = t.c * x[t.i];
            if v != 0.0 {
                s.entries.push((t.k, t.j, v));
            }
        }
        // row-major M, starts at I
        let (m, next) = (&mut s.ad, &mut s.ad_next);
        m.fill(0.0);
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        for p in (1..self.step).rev() {
            let inv = 1.0 / p as f64;
            next.fill(0.0);
            for i in 0..d {
                next[i * d + i] = 1.0;
            }
            for &(k, j, v) in &s.entries {
                let a = v * inv;
                let src = &m[j * d..(j + 1) * d];
                for (n, &c) in next[k * d..(k + 1) * d].iter_mut().zip(src) {
                    *n += a * c;
                }
            }
            std::mem::swap(m, next);
        }
        m.iter().map(|v| v * v).sum()
    }

    /// Checks antisymmetry, the Jacobi identity and the nilpotency step.
    pub fn structure_check(&self) -> StructureReport {
        let n = self.dim;
        let mut max_antisymmetry = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let r = (self.constant(i, j, k) + self.constant(j, i, k)).abs();
                    max_antisymmetry = max_antisymmetry.max(r);
                }
            }
        }
        let mut max_jacobi = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut s = 0.0;
                        for m in 0..n {
                            s += self.constant(i, j, m) * self.constant(m, k, l)
                                + self.constant(j, k, m) * self.constant(m, i, l)
                                + self.constant(k, i, m) * self.constant(m, j, l);
                        }
                        max_jacobi = max_jacobi.max(s.abs());
                    }
                }
            }
        }
        let verified_step = self.lower_central_step();
        let passed = max_antisymmetry <= EXACT && max_jacobi <= EXACT && verified_step.is_some_and(|s| s <= self.step);
        StructureReport {
            max_antisymmetry,
            max_jacobi,
            verified_step,
            declared_step: self.step,
            passed,
        }
    }

    /// Length of the lower central series: smallest `s` with `g^{s+1} = 0`.
    fn lower_central_step(&self) -> Option<usize> {
        let n = self.dim;
        let ads: Vec<DMatrix<f64>> = (0..n).map(|a| self.ad_matrix_unchecked(&self.basis(a))).collect();
        let mut span: Vec<AlgebraVector> = (0..n).map(|a| self.basis(a)).collect();
        for s in 1..=n {
            let images = span.iter().flat_map(|v| ads.iter().map(move |ad| ad * v));
            span = orthonormal_span(images);
            if span.is_empty() {
                return Some(s);
            }
        }
        None
    }
}

fn orthonormal_span(vectors: impl Iterator<Item = AlgebraVector>) -> Vec<AlgebraVector> {
    let mut basis: Vec<AlgebraVector> = Vec::new();
    for mut v in vectors {
        for b in &basis {
            let p = b.dot(&v);
            v.axpy(-p, b, 1.0);
        }
        let norm = v.norm();
        if norm > EXACT {
            basis.push(v / norm);
        }
    }
    basis
}
