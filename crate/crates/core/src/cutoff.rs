//! Smooth cutoff functions and the composite coefficients built from them:
//! `φ_m` on the group, `ψ` on `End(g)`, `v = ψ(Ad)`, `v_n = ψ(Ad / n)` and
//! `u_m = φ_m v`.
//!
//! `|g|` is the Euclidean norm of exponential coordinates. On `End(g)` we use
//! the normalized Frobenius norm `‖x‖ = ‖x‖_F / √dim`, for which `‖I‖ = 1`;
//! `ψ = 1` on `‖x‖ ≤ 3/2` and `ψ = 0` on `‖x‖ ≥ 2`, so `ψ` is flat around
//! both `0` and `I`.

use std::cell::RefCell;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::algebra::{AlgebraVector, BchScratch};
use crate::error::{LabError, Result};
use crate::flow::{CoefficientField, UnitCoefficient};
use crate::group::{GroupModel, GroupPoint};
use crate::tolerances::MIXED_FD_STEP;

fn glue(y: f64) -> f64 {
    if y > 0.0 {
        (-1.0 / y).exp()
    } else {
        0.0
    }
}

fn glue_derivative(y: f64) -> f64 {
    if y > 0.0 {
        (-1.0 / y).exp() / (y * y)
    } else {
        0.0
    }
}

/// C^∞ step: `1` for `x ≤ 0`, `0` for `x ≥ 1`, decreasing in between.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x >= 1.0 {
        0.0
    } else {
        let a = glue(1.0 - x);
        a / (a + glue(x))
    }
}

pub fn smooth_step_derivative(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let (a, b) = (glue(1.0 - x), glue(x));
    let (da, db) = (glue_derivative(1.0 - x), glue_derivative(x));
    let d = a + b;
    -(da * b + a * db) / (d * d)
}

/// Parameters of the cutoff family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    /// Radius of the region where `φ_m = 1`.
    pub m: f64,
    /// Scale of `v_n = ψ(Ad / n)`.
    pub n: u32,
    /// Width of the `φ_m` transition band; `m / 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_width: Option<f64>,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self {
            m: 1.0,
            n: 1,
            transition_width: None,
        }
    }
}

impl CutoffSpec {
    pub fn width(&self) -> f64 {
        self.transition_width.unwrap_or(self.m / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(LabError::InvalidArgument(format!("m must be positive, got {}", self.m)));
        }
        if self.n == 0 {
            return Err(LabError::InvalidArgument("n must be positive".into()));
        }
        let w = self.width();
        if !(w > 0.0 && w <= self.m) {
            return Err(LabError::InvalidArgument(format!(
                "transition width must lie in (0, m], got {w}"
            )));
        }
        Ok(())
    }

    pub fn with_m(self, m: f64) -> Self {
        Self {
            m,
            transition_width: None,
            ..self
        }
    }

    pub fn with_n(self, n: u32) -> Self {
        Self { n, ..self }
    }
}

/// `φ_m(g) = S((|g| − m) / w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupCutoff {
    pub m: f64,
    pub width: f64,
}

pub fn make_phi_m(m: f64, width: f64) -> Result<GroupCutoff> {
    CutoffSpec {
        m,
        n: 1,
        transition_width: Some(width),
    }
    .validate()?;
    Ok(GroupCutoff { m, width })
}

impl GroupCutoff {
    fn arg(&self, g: &GroupPoint) -> f64 {
        (g.norm() - self.m) / self.width
    }

    pub fn value(&self, g: &GroupPoint) -> f64 {
        smooth_step(self.arg(g))
    }

    /// `∇̂φ_m(g)` through the chain rule on `|g|`.
    pub fn hat_gradient(&self, model: &GroupModel, g: &GroupPoint) -> AlgebraVector {
        let ds = smooth_step_derivative(self.arg(g));
        if ds == 0.0 {
            return AlgebraVector::zeros(g.dim());
        }
        let radial = &g.coords * (ds / (self.width * g.norm()));
        model.right_frame(g).tr_mul(&radial)
    }
}

/// `ψ(s·x)` for a fixed scale `s` (1 or `1/n`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixCutoff {
    pub scale: f64,
}

impl MatrixCutoff {
    /// `ψ = 1` on `‖x‖ ≤ FLAT_RADIUS`.
    pub const FLAT_RADIUS: f64 = 1.5;
    /// `ψ = 0` on `‖x‖ ≥ OUTER_RADIUS`.
    pub const OUTER_RADIUS: f64 = 2.0;

    fn arg_of_norm(norm: f64) -> f64 {
        (norm - Self::FLAT_RADIUS) / (Self::OUTER_RADIUS - Self::FLAT_RADIUS)
    }

    /// Normalized Frobenius norm.
    pub fn norm(x: &DMatrix<f64>) -> f64 {
        x.norm() / (x.nrows() as f64).sqrt()
    }

    pub fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.value_of_norm(Self::norm(x))
    }

    /// `ψ` as a function of the normalized norm.
    pub fn value_of_norm(&self, norm: f64) -> f64 {
        smooth_step(Self::arg_of_norm(self.scale * norm))
    }

    /// `c` with `d/dε|₀ ψ(s(x + εA)) = c ⟨x, A⟩_F`.
    pub fn gradient_factor(&self, x: &DMatrix<f64>) -> f64 {
        let fro = x.norm();
        let ds = smooth_step_derivative(Self::arg_of_norm(self.scale * fro / (x.nrows() as f64).sqrt()));
        if ds == 0.0 {
            return 0.0;
        }
        let denom = (Self::OUTER_RADIUS - Self::FLAT_RADIUS) * fro * (x.nrows() as f64).sqrt();
        ds * self.scale / denom
    }

    /// `⟨ψ'(s x), A⟩` as a directional derivative in `x`.
    pub fn directional(&self, x: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
        self.gradient_factor(x) * x.dot(a)
    }
}

/// `scale = 1` gives `ψ`, `scale = 1/n` gives `ψ_n(x) = ψ(x / n)`.
pub fn make_psi(scale: f64) -> MatrixCutoff {
    MatrixCutoff { scale }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    /// `u ≡ 1`.
    Full,
    /// `u_m = φ_m ψ(Ad)`.
    UM,
    /// `v = ψ(Ad)`.
    V,
    /// `v_n = ψ(Ad / n)`.
    VN,
}

impl FromStr for CoefficientKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "u_m" => Ok(Self::UM),
            "v" => Ok(Self::V),
            "v_n" => Ok(Self::VN),
            _ => Err(LabError::UnknownName {
                what: "coefficient kind",
                name: s.to_string(),
            }),
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<BchScratch> = RefCell::new(BchScratch::new(0));
}

/// Coefficient built from `φ_m` and `ψ`.
#[derive(Debug, Clone)]
pub struct CutoffCoefficient {
    model: GroupModel,
    phi: Option<GroupCutoff>,
    psi: MatrixCutoff,
}

pub fn make_coefficient(
    model: &GroupModel,
    kind: CoefficientKind,
    spec: &CutoffSpec,
) -> Result<Box<dyn CoefficientField>> {
    spec.validate()?;
    let cutoff = |phi, scale| CutoffCoefficient {
        model: model.clone(),
        phi,
        psi: make_psi(scale),
    };
    Ok(match kind {
        CoefficientKind::Full => Box::new(UnitCoefficient),
        CoefficientKind::UM => Box::new(cutoff(Some(make_phi_m(spec.m, spec.width())?), 1.0)),
        CoefficientKind::V => Box::new(cutoff(None, 1.0)),
        CoefficientKind::VN => Box::new(cutoff(None, 1.0 / spec.n as f64)),
    })
}

impl CutoffCoefficient {
    /// `⟨∇̂ψ(s Ad), X_b⟩ = ⟨ψ'(s Ad_g), s ad_{X_b} Ad_g⟩`.
    fn psi_hat_gradient(&self, ad_g: &DMatrix<f64>) -> AlgebraVector {
        let d = self.model.dim();
        let factor = self.psi.gradient_factor(ad_g);
        if factor == 0.0 {
            return AlgebraVector::zeros(d);
        }
        // ⟨Ad, ad_b Ad⟩_F = Σ_kl (ad_b)_kl (Ad Adᵀ)_kl
        let gram = ad_g * ad_g.transpose();
        let alg = self.model.alg();
        AlgebraVector::from_fn(d, |b, _| {
            let ad_b = alg.ad_matrix_unchecked(&alg.basis(b));
            factor * ad_b.dot(&gram)
        })
    }
}

impl CoefficientField for CutoffCoefficient {
    fn value(&self, g: &GroupPoint) -> f64 {
        let phi = self.phi.map_or(1.0, |p| p.value(g));
        if phi == 0.0 {
            return 0.0;
        }
        let alg = self.model.alg();
        let d = alg.dim() as f64;
        // Ad − I is nilpotent, hence traceless: ‖Ad‖_F² = d + ‖Ad − I‖_F²,
        // and ‖Ad − I‖_F ≤ e^{‖ad‖_F} − 1.
        if self.psi.scale < 1.0 {
            let excess = alg.ad_norm_bound(g.coords.as_slice()).exp_m1();
            if self.psi.scale * (1.0 + excess * excess / d).sqrt() <= MatrixCutoff::FLAT_RADIUS {
                return phi;
            }
        }
        let fro_sq = SCRATCH.with(|cell| {
            let mut scratch = cell.borrow_mut();
            scratch.fit(alg.dim());
            alg.exp_ad_frobenius_sq(g.coords.as_slice(), &mut scratch)
        });
        phi * self.psi.value_of_norm((fro_sq / d).sqrt())
    }

    /// Product rule `∇̂u_m = ∇̂v φ_m + v ∇̂φ_m`.
    fn hat_gradient(&self, g: &GroupPoint) -> AlgebraVector {
        let ad_g = self.model.alg().exp_ad_unchecked(&g.coords);
        let grad_v = self.psi_hat_gradient(&ad_g);
        match &self.phi {
            None => grad_v,
            Some(phi) => {
                let v = self.psi.value(&ad_g);
                grad_v * phi.value(g) + phi.hat_gradient(&self.model, g) * v
            }
        }
    }

    /// Central differences of `∇̂u` along left-invariant directions.
    fn mixed_rows(&self, g: &GroupPoint, dirs: &[usize]) -> DMatrix<f64> {
        let d = self.model.dim();
        let mut out = DMatrix::zeros(dirs.len(), d);
        for (r, &a) in dirs.iter().enumerate() {
            let step = self.model.alg().basis(a) * MIXED_FD_STEP;
            let plus = self.hat_gradient(&self.model.right_step(g, &step));
            let minus = self.hat_gradient(&self.model.right_step(g, &(-step)));
            let row = (plus - minus) / (2.0 * MIXED_FD_STEP);
            out.row_mut(r).copy_from(&row.transpose());
        }
        out
    }
}
