//! Integrators for the rolling-map SDE `dξ = u(ξ) ξ ∘ db⃗`, the adjoint
//! process `W = Ad_ξ`, and the variation processes `θ` and `Θ`.
//!
//! States are advanced by right multiplication with group exponentials, so
//! every state lies on the group exactly. A state-dependent scalar `u` is
//! handled by a Heun predictor-corrector on the scalar weight.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::algebra::{AlgebraVector, BchScratch};
use crate::error::{LabError, Result};
use crate::group::{GroupModel, GroupPoint};
use crate::tolerances::BLOWUP_NORM;
use crate::wiener::{BrownianPath, CameronMartinPath, PathGrid};

/// Scalar coefficient `u: G → [0, 1]` with the derivatives the variation
/// equation needs.
pub trait CoefficientField: Send + Sync {
    fn value(&self, g: &GroupPoint) -> f64;

    /// `∇̂u(g)`, component `b` is `(X̂_b u)(g)`.
    fn hat_gradient(&self, g: &GroupPoint) -> AlgebraVector;

    /// Rows of the mixed table `⟨∇̃∇̂u(g), X_a ⊗ X_b⟩` for `a` in `dirs`;
    /// row `r` holds `a = dirs[r]`, column `b`.
    fn mixed_rows(&self, g: &GroupPoint, dirs: &[usize]) -> DMatrix<f64>;

    /// Full `dim × dim` mixed table.
    fn mixed(&self, g: &GroupPoint) -> DMatrix<f64> {
        let dirs: Vec<usize> = (0..g.dim()).collect();
        self.mixed_rows(g, &dirs)
    }

    /// True when `u ≡ 1`; integrators skip derivative evaluation.
    fn is_unit(&self) -> bool {
        false
    }
}

/// `u ≡ 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitCoefficient;

impl CoefficientField for UnitCoefficient {
    fn value(&self, _g: &GroupPoint) -> f64 {
        1.0
    }

    fn hat_gradient(&self, g: &GroupPoint) -> AlgebraVector {
        AlgebraVector::zeros(g.dim())
    }

    fn mixed_rows(&self, g: &GroupPoint, dirs: &[usize]) -> DMatrix<f64> {
        DMatrix::zeros(dirs.len(), g.dim())
    }

    fn is_unit(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "geometric-euler")]
    GeometricEuler,
    #[serde(rename = "geometric-heun")]
    GeometricHeun,
}

impl FromStr for Scheme {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric-euler" => Ok(Self::GeometricEuler),
            "geometric-heun" => Ok(Self::GeometricHeun),
            _ => Err(LabError::UnknownName {
                what: "scheme",
                name: s.to_string(),
            }),
        }
    }
}

/// Discrete solution of the rolling-map SDE.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub grid: PathGrid,
    pub model: String,
    pub generators: Vec<usize>,
    /// `ξ_{t_j}`, `j = 0..=n_steps`.
    pub states: Vec<GroupPoint>,
    /// `Ad_{ξ_{t_j}}` by the group route.
    pub adjoints: Vec<DMatrix<f64>>,
    /// `u(ξ_{t_j})`, `j < n_steps`.
    pub start_values: Vec<f64>,
    /// `u` at the predictor state (equal to `start_values` for Euler).
    pub predictor_values: Vec<f64>,
    /// First step whose effective weight was exactly zero.
    pub frozen_at: Option<usize>,
}

impl FlowTrajectory {
    pub fn terminal(&self) -> &GroupPoint {
        self.states.last().expect("nonempty trajectory")
    }

    /// Weight actually used in step `j`.
    pub fn step_weight(&self, j: usize) -> f64 {
        0.5 * (self.start_values[j] + self.predictor_values[j])
    }

    /// Writes `t, x1..xd`, optionally the adjoint entries (row-major) and a
    /// variation process.
    pub fn write_csv(
        &self,
        with_adjoints: bool,
        variation: Option<&VariationProcess>,
        mut out: impl Write,
    ) -> std::io::Result<()> {
        let d = self.states[0].dim();
        write!(out, "t")?;
        for i in 1..=d {
            write!(out, ",x{i}")?;
        }
        if with_adjoints {
            for r in 1..=d {
                for c in 1..=d {
                    write!(out, ",W{r}_{c}")?;
                }
            }
        }
        if variation.is_some() {
            for i in 1..=d {
                write!(out, ",theta{i}")?;
            }
        }
        writeln!(out)?;
        for (j, s) in self.states.iter().enumerate() {
            write!(out, "{}", self.grid.time(j))?;
            for v in s.coords.iter() {
                write!(out, ",{v}")?;
            }
            if with_adjoints {
                let w = &self.adjoints[j];
                for r in 0..d {
                    for c in 0..d {
                        write!(out, ",{}", w[(r, c)])?;
                    }
                }
            }
            if let Some(var) = variation {
                for v in var.values[j].iter() {
                    write!(out, ",{v}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// A `g`-valued process on the grid, starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationProcess {
    pub grid: PathGrid,
    pub values: Vec<AlgebraVector>,
}

impl VariationProcess {
    /// `max_j |a_j − b_j|`.
    pub fn sup_distance(&self, other: &VariationProcess) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }
}

fn check_driver(model: &GroupModel, omega: &BrownianPath) -> Result<()> {
    if omega.k() != model.k() {
        return Err(LabError::DimensionMismatch {
            expected: model.k(),
            got: omega.k(),
        });
    }
    Ok(())
}

fn scale_into(out: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * a;
    }
}

fn check_state(step: usize, g: &GroupPoint) -> Result<()> {
    let norm = g.norm();
    if !norm.is_finite() || norm > BLOWUP_NORM {
        return Err(LabError::Blowup { step, norm });
    }
    Ok(())
}

/// Integrates `dξ = u(ξ) ξ ∘ db⃗` from the identity.
///
/// Euler: `ξ_{j+1} = ξ_j exp(u(ξ_j) Σ X_i Δb^i_j)`. Heun: the same step
/// gives a predictor `ξ*`, then `ξ_{j+1} = ξ_j exp(½(u(ξ_j) + u(ξ*)) Σ X_i Δb^i_j)`.
pub fn solve_rolling(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    omega: &BrownianPath,
    scheme: Scheme,
) -> Result<FlowTrajectory> {
    let path = integrate_states(model, coeff, omega, scheme)?;
    let adjoints = path
        .states
        .iter()
        .map(|s| model.alg().exp_ad_unchecked(&s.coords))
        .collect();
    Ok(FlowTrajectory {
        grid: omega.grid(),
        model: model.label().to_string(),
        generators: model.generators().to_vec(),
        states: path.states,
        adjoints,
        start_values: path.start_values,
        predictor_values: path.predictor_values,
        frozen_at: path.frozen_at,
    })
}

pub(crate) struct StatePath {
    pub states: Vec<GroupPoint>,
    pub start_values: Vec<f64>,
    pub predictor_values: Vec<f64>,
    pub frozen_at: Option<usize>,
}

/// Group states only, without the adjoint matrices.
pub(crate) fn integrate_states(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    omega: &BrownianPath,
    scheme: Scheme,
) -> Result<StatePath> {
    let n = omega.grid().n_steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut start_values = Vec::with_capacity(n);
    let mut predictor_values = Vec::with_capacity(n);
    states.push(model.identity());
    let frozen_at = for_each_state(model, coeff, omega, scheme, |_, state, c, c_star| {
        states.push(state.clone());
        start_values.push(c);
        predictor_values.push(c_star);
    })?;
    Ok(StatePath {
        states,
        start_values,
        predictor_values,
        frozen_at,
    })
}

/// Steps the flow, calling `visit(j + 1, ξ_{j+1}, u(ξ_j), u(ξ*))` after each
/// step without storing the trajectory. Returns the first frozen step.
pub(crate) fn for_each_state(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    omega: &BrownianPath,
    scheme: Scheme,
    mut visit: impl FnMut(usize, &GroupPoint, f64, f64),
) -> Result<Option<usize>> {
    check_driver(model, omega)?;
    let n = omega.grid().n_steps();
    let d = model.dim();
    let alg = model.alg();
    let unit = coeff.is_unit();
    let mut frozen_at = None;
    let mut scratch = BchScratch::new(d);
    let mut drive = vec![0.0; d];
    let mut scaled = vec![0.0; d];
    let mut xi = model.identity();
    let mut next = model.identity();
    let mut predictor = model.identity();
    for j in 0..n {
        drive.fill(0.0);
        for (&g, &w) in model.generators().iter().zip(omega.increment(j)) {
            drive[g] += w;
        }
        let (c, c_star) = if unit {
            (1.0, 1.0)
        } else {
            let c = coeff.value(&xi);
            let c_star = match scheme {
                Scheme::GeometricEuler => c,
                Scheme::GeometricHeun => {
                    scale_into(&mut scaled, &drive, c);
                    alg.bch_into(
                        xi.coords.as_slice(),
                        &scaled,
                        predictor.coords.as_mut_slice(),
                        &mut scratch,
                    );
                    check_state(j + 1, &predictor)?;
                    coeff.value(&predictor)
                }
            };
            (c, c_star)
        };
        let weight = 0.5 * (c + c_star);
        if weight == 0.0 {
            frozen_at.get_or_insert(j);
            next.coords.copy_from(&xi.coords);
        } else {
            scale_into(&mut scaled, &drive, weight);
            alg.bch_into(xi.coords.as_slice(), &scaled, next.coords.as_mut_slice(), &mut scratch);
        }
        check_state(j + 1, &next)?;
        std::mem::swap(&mut xi, &mut next);
        visit(j + 1, &xi, c, c_star);
    }
    Ok(frozen_at)
}

/// Matrix route for `dW = u W ∘ ad_{db⃗}`, `W_0 = I`, reusing the
/// coefficient values cached by the flow:
/// `W_{j+1} = W_j (I + c̄_j A_j + ½ (c_j A_j)²)` with `A_j = Σ ad_{X_i} Δb^i_j`.
pub fn solve_adjoint(model: &GroupModel, flow: &FlowTrajectory, omega: &BrownianPath) -> Result<Vec<DMatrix<f64>>> {
    check_driver(model, omega)?;
    flow.grid.check_same(&omega.grid())?;
    let d = model.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut out = Vec::with_capacity(flow.grid.n_steps() + 1);
    out.push(eye.clone());
    for j in 0..flow.grid.n_steps() {
        let a = model
            .alg()
            .ad_matrix_unchecked(&model.driving_vector(omega.increment(j)));
        let c = flow.start_values[j];
        let ca = &a * c;
        let factor = &eye + &a * flow.step_weight(j) + (&ca * &ca) * 0.5;
        let next = &out[j] * factor;
        let norm = next.norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(LabError::Blowup { step: j + 1, norm });
        }
        out.push(next);
    }
    Ok(out)
}

fn check_shift(flow: &FlowTrajectory, h: &CameronMartinPath) -> Result<()> {
    flow.grid.check_same(&h.grid())?;
    if h.k() != flow.generators.len() {
        return Err(LabError::DimensionMismatch {
            expected: flow.generators.len(),
            got: h.k(),
        });
    }
    Ok(())
}

fn driving(generators: &[usize], dim: usize, weights: &[f64], scale: f64) -> AlgebraVector {
    let mut v = AlgebraVector::zeros(dim);
    for (&g, &w) in generators.iter().zip(weights) {
        v[g] += w * scale;
    }
    v
}

/// Euler–Maruyama on the Itô form of the variation equation:
///
/// `θ_{j+1} = θ_j + ⟨∇̂u, θ_j⟩ W_j Δb⃗_j + u W_j ḣ⃗_j dt
///            + ½ Σ_i ⟨∇̃∇̂u, X_i ⊗ θ_j⟩ W_j X_i dt`,
///
/// with `u` and its derivatives evaluated at `η_{t_j}` and `W = Ad_η`.
pub fn solve_variation(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    flow: &FlowTrajectory,
    omega: &BrownianPath,
    h: &CameronMartinPath,
) -> Result<VariationProcess> {
    check_driver(model, omega)?;
    flow.grid.check_same(&omega.grid())?;
    check_shift(flow, h)?;
    let d = model.dim();
    let gens = model.generators();
    let dt = flow.grid.dt();
    let n = flow.grid.n_steps();
    let mut values = Vec::with_capacity(n + 1);
    values.push(AlgebraVector::zeros(d));
    for j in 0..n {
        let theta = &values[j];
        let w = &flow.adjoints[j];
        let forcing = driving(gens, d, h.slope(j), dt);
        let step = if coeff.is_unit() {
            forcing
        } else {
            let eta = &flow.states[j];
            let grad = coeff.hat_gradient(eta);
            let mixed = coeff.mixed_rows(eta, gens);
            let mut v = driving(gens, d, omega.increment(j), grad.dot(theta));
            v.axpy(flow.start_values[j], &forcing, 1.0);
            for (r, &g) in gens.iter().enumerate() {
                let pairing: f64 = mixed.row(r).iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
                v[g] += 0.5 * dt * pairing;
            }
            v
        };
        let next = theta + w * step;
        let norm = next.norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(LabError::Blowup { step: j + 1, norm });
        }
        values.push(next);
    }
    Ok(VariationProcess {
        grid: flow.grid,
        values,
    })
}

/// `Θ_t = ∫_0^t Ad_{ξ_τ} dh⃗_τ` by the midpoint rule:
/// `Θ_{j+1} = Θ_j + ½(W_j + W_{j+1}) ḣ⃗_j dt`.
pub fn solve_shift_variation(flow: &FlowTrajectory, h: &CameronMartinPath) -> Result<VariationProcess> {
    check_shift(flow, h)?;
    let d = flow.states[0].dim();
    let dt = flow.grid.dt();
    let n = flow.grid.n_steps();
    let mut values = Vec::with_capacity(n + 1);
    values.push(AlgebraVector::zeros(d));
    for j in 0..n {
        let forcing = driving(&flow.generators, d, h.slope(j), dt);
        let mid = (&flow.adjoints[j] + &flow.adjoints[j + 1]) * 0.5;
        let next = &values[j] + mid * forcing;
        values.push(next);
    }
    Ok(VariationProcess {
        grid: flow.grid,
        values,
    })
}
