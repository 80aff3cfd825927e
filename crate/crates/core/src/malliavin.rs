//! Cameron–Martin derivatives of `f(ξ_t)`: the transported-shift formula
//! `∂_h f(ξ_t) = ⟨∇̂f(ξ_t), Θ_t⟩`, its finite-difference oracle, the H-kernel
//! of the Malliavin derivative, the integration-by-parts statistic, and the
//! `E sup |A − B|^p` estimators for the cutoff limits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cutoff::{make_coefficient, CoefficientKind, CutoffSpec};
use crate::error::{LabError, Result};
use crate::flow::{
    for_each_state, integrate_states, solve_adjoint, solve_rolling, solve_shift_variation, solve_variation,
    CoefficientField, FlowTrajectory, Scheme, UnitCoefficient, VariationProcess,
};
use crate::group::{GroupModel, ScalarField};
use crate::stats::{map_paths, median, quantile, MeanEstimate};
use crate::wiener::{
    cylinder_partial, dh_star, sample_brownian, shift_path, BrownianPath, CameronMartinPath, CylinderFunctional,
    PathGrid,
};

/// Median pathwise relative error allowed by the derivative battery.
pub const MEDIAN_REL_ERROR_LIMIT: f64 = 1e-3;
/// 95th percentile pathwise relative error allowed by the derivative battery.
pub const P95_REL_ERROR_LIMIT: f64 = 1e-2;

/// Formula vs oracle on one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub model: String,
    pub field: String,
    pub shift: String,
    pub path_index: u64,
    pub t_index: usize,
    pub formula_value: f64,
    pub oracle_value: f64,
    pub rel_error: f64,
    pub eps: f64,
    pub n_steps: usize,
}

pub fn relative_error(formula: f64, oracle: f64) -> f64 {
    (formula - oracle).abs() / oracle.abs().max(1.0)
}

fn check_t(flow: &FlowTrajectory, t_index: usize) -> Result<()> {
    if t_index > flow.grid.n_steps() {
        return Err(LabError::IndexOutOfRange {
            index: t_index,
            len: flow.grid.n_steps() + 1,
        });
    }
    Ok(())
}

/// `∂_h[f(ξ_t)] = ⟨∇̂f(ξ_t), Θ_t⟩` with `Θ` from [`solve_shift_variation`].
pub fn derivative_formula(
    model: &GroupModel,
    f: &ScalarField,
    flow: &FlowTrajectory,
    h: &CameronMartinPath,
    t_index: usize,
) -> Result<f64> {
    check_t(flow, t_index)?;
    let theta = solve_shift_variation(flow, h)?;
    Ok(pair_with_variation(model, f, flow, &theta, t_index))
}

/// `⟨∇̂f(ξ_t), θ_t⟩` for an already integrated variation process.
pub fn pair_with_variation(
    model: &GroupModel,
    f: &ScalarField,
    flow: &FlowTrajectory,
    theta: &VariationProcess,
    t_index: usize,
) -> f64 {
    model.hat_gradient(f, &flow.states[t_index]).dot(&theta.values[t_index])
}

/// Flows driven by `ω ± εh` on common increments.
#[derive(Debug, Clone)]
pub struct ShiftedFlows {
    pub plus: FlowTrajectory,
    pub minus: FlowTrajectory,
    pub eps: f64,
}

impl ShiftedFlows {
    pub fn new(
        model: &GroupModel,
        coeff: &dyn CoefficientField,
        scheme: Scheme,
        omega: &BrownianPath,
        h: &CameronMartinPath,
        eps: f64,
    ) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(LabError::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        let plus = solve_rolling(model, coeff, &shift_path(omega, h, eps)?, scheme)?;
        let minus = solve_rolling(model, coeff, &shift_path(omega, h, -eps)?, scheme)?;
        Ok(Self { plus, minus, eps })
    }

    pub fn central_difference(&self, f: &ScalarField, t_index: usize) -> f64 {
        (f.eval(&self.plus.states[t_index]) - f.eval(&self.minus.states[t_index])) / (2.0 * self.eps)
    }
}

/// `(f(ξ_t[ω + εh]) − f(ξ_t[ω − εh])) / 2ε`, re-integrating both flows.
#[allow(clippy::too_many_arguments)]
pub fn derivative_fd_oracle(
    model: &GroupModel,
    f: &ScalarField,
    coeff: &dyn CoefficientField,
    scheme: Scheme,
    omega: &BrownianPath,
    h: &CameronMartinPath,
    t_index: usize,
    eps: f64,
) -> Result<f64> {
    let flows = ShiftedFlows::new(model, coeff, scheme, omega, h, eps)?;
    check_t(&flows.plus, t_index)?;
    Ok(flows.central_difference(f, t_index))
}

/// Nested central difference `∂_{h1}∂_{h2} f(ξ_t)`.
#[allow(clippy::too_many_arguments)]
pub fn second_derivative_fd(
    model: &GroupModel,
    f: &ScalarField,
    coeff: &dyn CoefficientField,
    scheme: Scheme,
    omega: &BrownianPath,
    h1: &CameronMartinPath,
    h2: &CameronMartinPath,
    t_index: usize,
    eps: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for (s1, s2, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
        let w = shift_path(&shift_path(omega, h1, s1 * eps)?, h2, s2 * eps)?;
        let flow = integrate_states(model, coeff, &w, scheme)?;
        if t_index >= flow.states.len() {
            return Err(LabError::IndexOutOfRange {
                index: t_index,
                len: flow.states.len(),
            });
        }
        acc += sign * f.eval(&flow.states[t_index]);
    }
    Ok(acc / (4.0 * eps * eps))
}

/// Kernel of `D[f(ξ_t)]` on the grid: entry `[s][i]` is
/// `⟨∇̂f(ξ_t), ∫_0^{s∧t} Ad_{ξ_τ} X_{gen_i} dτ⟩` (midpoint rule).
pub fn kernel_table(
    model: &GroupModel,
    f: &ScalarField,
    flow: &FlowTrajectory,
    t_index: usize,
) -> Result<Vec<Vec<f64>>> {
    check_t(flow, t_index)?;
    let grad = model.hat_gradient(f, &flow.states[t_index]);
    let k = flow.generators.len();
    let n = flow.grid.n_steps();
    let dt = flow.grid.dt();
    // row vector ∇̂fᵀ W_l, restricted to generator columns
    let project = |l: usize| -> Vec<f64> {
        let row = grad.transpose() * &flow.adjoints[l];
        flow.generators.iter().map(|&g| row[g]).collect()
    };
    let mut table = Vec::with_capacity(n + 1);
    table.push(vec![0.0; k]);
    let mut prev = project(0);
    for s in 0..n {
        let mut next = table[s].clone();
        if s < t_index {
            let cur = project(s + 1);
            for i in 0..k {
                next[i] += 0.5 * (prev[i] + cur[i]) * dt;
            }
            prev = cur;
        }
        table.push(next);
    }
    Ok(table)
}

/// `(D_s[f(ξ_t)])^i` for generator slot `i`.
pub fn kernel_d(
    model: &GroupModel,
    f: &ScalarField,
    flow: &FlowTrajectory,
    slot: usize,
    s_index: usize,
    t_index: usize,
) -> Result<f64> {
    let k = flow.generators.len();
    if slot >= k {
        return Err(LabError::IndexOutOfRange { index: slot, len: k });
    }
    if s_index > flow.grid.n_steps() {
        return Err(LabError::IndexOutOfRange {
            index: s_index,
            len: flow.grid.n_steps() + 1,
        });
    }
    Ok(kernel_table(model, f, flow, t_index)?[s_index][slot])
}

/// `Σ_j Σ_i (d/ds kernel)_j^i ḣ^i_j dt`, which must reproduce
/// [`derivative_formula`].
pub fn kernel_reconstruction(
    model: &GroupModel,
    f: &ScalarField,
    flow: &FlowTrajectory,
    h: &CameronMartinPath,
    t_index: usize,
) -> Result<f64> {
    flow.grid.check_same(&h.grid())?;
    let table = kernel_table(model, f, flow, t_index)?;
    let dt = flow.grid.dt();
    let mut total = 0.0;
    for j in 0..flow.grid.n_steps() {
        for (i, s) in h.slope(j).iter().enumerate() {
            total += (table[j + 1][i] - table[j][i]) / dt * s * dt;
        }
    }
    Ok(total)
}

/// Settings for the formula–oracle battery.
#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub models: Vec<String>,
    pub fields: Vec<String>,
    pub shifts: Vec<String>,
    pub n_paths: u64,
    pub seed: u64,
    pub grid: PathGrid,
    pub eps: f64,
    pub scheme: Scheme,
}

/// Runs formula vs oracle at `t = 1` (u ≡ 1) for every model × field ×
/// shift × path. Reports are ordered by model, field, shift, path.
pub fn derivative_battery(cfg: &BatteryConfig) -> Result<Vec<DerivativeReport>> {
    let mut reports = Vec::new();
    let t = cfg.grid.n_steps();
    for label in &cfg.models {
        let model = GroupModel::from_label(label)?;
        let fields = cfg
            .fields
            .iter()
            .map(|name| ScalarField::bundled(name, model.dim()))
            .collect::<Result<Vec<_>>>()?;
        let shifts = cfg
            .shifts
            .iter()
            .map(|name| CameronMartinPath::bundled(name, cfg.grid, model.k()))
            .collect::<Result<Vec<_>>>()?;
        let per_path = map_paths(cfg.n_paths, |idx| -> Result<Vec<(f64, f64)>> {
            let omega = sample_brownian(cfg.grid, model.k(), cfg.seed, idx);
            let flow = solve_rolling(&model, &UnitCoefficient, &omega, cfg.scheme)?;
            let mut out = Vec::with_capacity(fields.len() * shifts.len());
            for h in &shifts {
                let theta = solve_shift_variation(&flow, h)?;
                let shifted = ShiftedFlows::new(&model, &UnitCoefficient, cfg.scheme, &omega, h, cfg.eps)?;
                for f in &fields {
                    out.push((
                        pair_with_variation(&model, f, &flow, &theta, t),
                        shifted.central_difference(f, t),
                    ));
                }
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (fi, f) in fields.iter().enumerate() {
            for (hi, shift) in cfg.shifts.iter().enumerate() {
                for (idx, values) in per_path.iter().enumerate() {
                    let (formula, oracle) = values[hi * fields.len() + fi];
                    reports.push(DerivativeReport {
                        model: label.clone(),
                        field: f.name().to_string(),
                        shift: shift.clone(),
                        path_index: idx as u64,
                        t_index: t,
                        formula_value: formula,
                        oracle_value: oracle,
                        rel_error: relative_error(formula, oracle),
                        eps: cfg.eps,
                        n_steps: cfg.grid.n_steps(),
                    });
                }
            }
        }
    }
    Ok(reports)
}

/// Per-combination summary of a derivative battery.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatterySummary {
    pub model: String,
    pub field: String,
    pub shift: String,
    pub n: usize,
    pub median_rel_error: f64,
    pub p95_rel_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn summarize_battery(reports: &[DerivativeReport]) -> Vec<BatterySummary> {
    let mut out: Vec<BatterySummary> = Vec::new();
    let mut start = 0;
    while start < reports.len() {
        let key = (&reports[start].model, &reports[start].field, &reports[start].shift);
        let end = reports[start..]
            .iter()
            .position(|r| (&r.model, &r.field, &r.shift) != key)
            .map_or(reports.len(), |p| start + p);
        let errs: Vec<f64> = reports[start..end].iter().map(|r| r.rel_error).collect();
        let med = median(&errs);
        let p95 = quantile(&errs, 0.95);
        out.push(BatterySummary {
            model: key.0.clone(),
            field: key.1.clone(),
            shift: key.2.clone(),
            n: errs.len(),
            median_rel_error: med,
            p95_rel_error: p95,
            max_rel_error: errs.iter().cloned().fold(0.0, f64::max),
            passed: med <= MEDIAN_REL_ERROR_LIMIT && p95 <= P95_REL_ERROR_LIMIT,
        });
        start = end;
    }
    out
}

/// One `(F, G, h)` integration-by-parts case.
#[derive(Debug, Clone)]
pub struct IbpTriple {
    pub name: String,
    pub f: CylinderFunctional,
    pub g: CylinderFunctional,
    pub h: CameronMartinPath,
}

/// Bundled two-dimensional IBP cases. The first has the closed form
/// `E[(∂_h F) G] = h¹_{1/2} = 1/2`.
pub fn ibp_battery(grid: PathGrid) -> Result<Vec<IbpTriple>> {
    let k = 2;
    let unit = CameronMartinPath::bundled("unit-first", grid, k)?;
    let cosine = CameronMartinPath::bundled("cosine", grid, k)?;
    let late = CameronMartinPath::bundled("late-switch", grid, k)?;
    let quarter = grid.index_of(0.25)?;
    let three_quarters = grid.index_of(0.75)?;
    Ok(vec![
        IbpTriple {
            name: "coordinate-one".into(),
            f: CylinderFunctional::coordinate(0.5, 0)?,
            g: CylinderFunctional::constant(1.0),
            h: unit.clone(),
        },
        IbpTriple {
            name: "one-one".into(),
            f: CylinderFunctional::constant(1.0),
            g: CylinderFunctional::constant(1.0),
            h: unit.clone(),
        },
        IbpTriple {
            name: "sine-coordinate".into(),
            f: CylinderFunctional::sine(0.5, 0)?,
            g: CylinderFunctional::coordinate(1.0, 0)?,
            h: unit,
        },
        IbpTriple {
            name: "square-cosprod".into(),
            f: CylinderFunctional::square(0.5, 1)?,
            g: CylinderFunctional::cos_times_coordinate(quarter, 0, three_quarters, 1, grid)?,
            h: cosine,
        },
        IbpTriple {
            name: "sine-late".into(),
            f: CylinderFunctional::sine(1.0, 1)?,
            g: CylinderFunctional::square(0.75, 1)?,
            h: late,
        },
    ])
}

/// Two sides of `E[(∂_h F) G] = E[F ∂_h^* G]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IbpReport {
    pub name: String,
    pub lhs: MeanEstimate,
    pub rhs: MeanEstimate,
    pub difference: f64,
    /// Standard error of the pathwise difference (both sides share paths).
    pub combined_se: f64,
    pub passed: bool,
}

pub const IBP_SIGMAS: f64 = 3.0;

pub fn ibp_statistic(triple: &IbpTriple, n_paths: u64, seed: u64) -> Result<IbpReport> {
    if n_paths < 1000 {
        return Err(LabError::InvalidArgument(format!(
            "IBP needs at least 1000 paths, got {n_paths}"
        )));
    }
    let grid = triple.h.grid();
    let k = triple.h.k();
    let samples = map_paths(n_paths, |idx| -> Result<(f64, f64)> {
        let omega = sample_brownian(grid, k, seed, idx);
        let lhs = cylinder_partial(&triple.f, &triple.h, &omega)? * triple.g.eval(&omega)?;
        let rhs = triple.f.eval(&omega)? * dh_star(&triple.g, &triple.h, &omega)?;
        Ok((lhs, rhs))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let lhs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let rhs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let diff: Vec<f64> = samples.iter().map(|s| s.0 - s.1).collect();
    let d = MeanEstimate::from_samples(&diff);
    Ok(IbpReport {
        name: triple.name.clone(),
        lhs: MeanEstimate::from_samples(&lhs),
        rhs: MeanEstimate::from_samples(&rhs),
        difference: d.mean,
        combined_se: d.stderr,
        passed: d.mean.abs() <= IBP_SIGMAS * d.stderr,
    })
}

/// Paired processes compared in the cutoff studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// `f(η^m)` vs `f(η)`, parameter `m`.
    EtaM,
    /// `Ad_{η^m}` vs `Ad_η` by the matrix route, parameter `m`.
    AdjointM,
    /// `θ^m` vs `θ`, parameter `m`.
    ThetaM,
    /// `Θ^n` vs `Θ`, parameter `n`.
    #[serde(rename = "Theta_n")]
    CapThetaN,
}

impl StudyKind {
    pub const ALL: [StudyKind; 4] = [Self::EtaM, Self::AdjointM, Self::ThetaM, Self::CapThetaN];

    pub fn name(&self) -> &'static str {
        match self {
            Self::EtaM => "eta_m",
            Self::AdjointM => "adjoint_m",
            Self::ThetaM => "theta_m",
            Self::CapThetaN => "Theta_n",
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::UnknownName {
                what: "study kind",
                name: s.to_string(),
            })
    }
}

/// `E sup_j |A_j − B_j|^p` for one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub parameter: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub excluded_paths: usize,
    /// Paths whose cutoff flow froze (weight exactly zero) at some step.
    pub frozen_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub kind: StudyKind,
    pub model: String,
    pub p: u32,
    pub n_paths: u64,
    pub seed: u64,
    pub n_steps: usize,
    pub rows: Vec<ConvergenceRow>,
}

/// Per-path outcome of one paired simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairOutcome {
    Distance { sup: f64, frozen: bool },
    Blowup,
}

/// Monte Carlo `E (sup distance)^p` over paths, excluding blowups.
pub fn lp_sup_distance(outcomes: &[PairOutcome], p: u32, parameter: f64) -> ConvergenceRow {
    let powered: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| match o {
            PairOutcome::Distance { sup, .. } => Some(sup.powi(p as i32)),
            PairOutcome::Blowup => None,
        })
        .collect();
    let est = MeanEstimate::from_samples(&powered);
    ConvergenceRow {
        parameter,
        estimate: est.mean,
        stderr: est.stderr,
        n_used: powered.len(),
        excluded_paths: outcomes.len() - powered.len(),
        frozen_paths: outcomes
            .iter()
            .filter(|o| matches!(o, PairOutcome::Distance { frozen: true, .. }))
            .count(),
    }
}

/// Maps blowups to [`PairOutcome::Blowup`] and propagates other errors.
pub fn pair_outcome(result: Result<(f64, bool)>) -> Result<PairOutcome> {
    match result {
        Ok((sup, frozen)) => Ok(PairOutcome::Distance { sup, frozen }),
        Err(LabError::Blowup { .. }) => Ok(PairOutcome::Blowup),
        Err(e) => Err(e),
    }
}

/// Settings for [`run_convergence_study`].
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub model: GroupModel,
    /// `m` values, or `n` values for `Theta_n`; ascending.
    pub parameters: Vec<f64>,
    pub p_list: Vec<u32>,
    pub n_paths: u64,
    pub seed: u64,
    pub grid: PathGrid,
    pub cutoff: CutoffSpec,
    pub field: ScalarField,
    pub shift: CameronMartinPath,
    pub scheme: Scheme,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parameters.is_empty() || self.parameters.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::InvalidArgument(
                "parameters must be nonempty and strictly ascending".into(),
            ));
        }
        if self.parameters.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err(LabError::InvalidArgument("parameters must be positive".into()));
        }
        if self.kind == StudyKind::CapThetaN && self.parameters.iter().any(|p| p.fract() != 0.0) {
            return Err(LabError::InvalidArgument("Theta_n parameters must be integers".into()));
        }
        if self.p_list.is_empty() || self.p_list.iter().any(|p| !matches!(p, 2 | 4)) {
            return Err(LabError::InvalidArgument("p must be 2 or 4".into()));
        }
        self.shift.grid().check_same(&self.grid)?;
        if self.shift.k() != self.model.k() {
            return Err(LabError::DimensionMismatch {
                expected: self.model.k(),
                got: self.shift.k(),
            });
        }
        self.cutoff.validate()
    }

    fn variant(&self, parameter: f64) -> Result<Box<dyn CoefficientField>> {
        match self.kind {
            StudyKind::CapThetaN => {
                make_coefficient(&self.model, CoefficientKind::VN, &self.cutoff.with_n(parameter as u32))
            }
            _ => make_coefficient(&self.model, CoefficientKind::UM, &self.cutoff.with_m(parameter)),
        }
    }

    fn reference(&self) -> Result<Box<dyn CoefficientField>> {
        match self.kind {
            StudyKind::CapThetaN => make_coefficient(&self.model, CoefficientKind::Full, &self.cutoff),
            _ => make_coefficient(&self.model, CoefficientKind::V, &self.cutoff),
        }
    }
}

enum Reference {
    Values(Vec<f64>),
    Matrices(Vec<DMatrix<f64>>),
    Variation(VariationProcess),
}

fn sup_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sup_matrix_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

impl StudyConfig {
    fn reference_process(&self, coeff: &dyn CoefficientField, omega: &BrownianPath) -> Result<Reference> {
        let flow = solve_rolling(&self.model, coeff, omega, self.scheme)?;
        self.process(coeff, &flow, omega)
    }

    fn process(&self, coeff: &dyn CoefficientField, flow: &FlowTrajectory, omega: &BrownianPath) -> Result<Reference> {
        Ok(match self.kind {
            StudyKind::EtaM => Reference::Values(flow.states.iter().map(|s| self.field.eval(s)).collect()),
            StudyKind::AdjointM => Reference::Matrices(solve_adjoint(&self.model, flow, omega)?),
            StudyKind::ThetaM | StudyKind::CapThetaN => {
                Reference::Variation(solve_variation(&self.model, coeff, flow, omega, &self.shift)?)
            }
        })
    }

    fn path_outcomes(
        &self,
        reference: &dyn CoefficientField,
        variants: &[Box<dyn CoefficientField>],
        idx: u64,
    ) -> Result<Vec<PairOutcome>> {
        let omega = sample_brownian(self.grid, self.model.k(), self.seed, idx);
        let base = match self.reference_process(reference, &omega) {
            Ok(r) => r,
            Err(LabError::Blowup { .. }) => return Ok(vec![PairOutcome::Blowup; variants.len()]),
            Err(e) => return Err(e),
        };
        variants
            .iter()
            .map(|coeff| {
                pair_outcome((|| {
                    let flow = solve_rolling(&self.model, coeff.as_ref(), &omega, self.scheme)?;
                    let frozen = flow.frozen_at.is_some();
                    let sup = match (&base, self.process(coeff.as_ref(), &flow, &omega)?) {
                        (Reference::Values(a), Reference::Values(b)) => sup_abs_diff(a, &b),
                        (Reference::Matrices(a), Reference::Matrices(b)) => sup_matrix_diff(a, &b),
                        (Reference::Variation(a), Reference::Variation(b)) => a.sup_distance(&b)?,
                        _ => unreachable!("reference and variant share a kind"),
                    };
                    Ok((sup, frozen))
                })())
            })
            .collect()
    }
}

/// Simulates the paired systems with common noise and returns one table
/// per exponent `p`.
///
/// * `eta_m`: `(η^m, η)` driven by `u_m` and `v`, compared through `f`,
/// * `adjoint_m`: `(U^m, U)`, the matrix-route adjoints of the same flows,
/// * `theta_m`: `(θ^m, θ)` from the Itô variation equation,
/// * `Theta_n`: `(Θ^n, Θ)` with `v_n` against `u ≡ 1`, both by the same
///   Euler–Maruyama variation integrator.
pub fn run_convergence_study(cfg: &StudyConfig) -> Result<Vec<ConvergenceTable>> {
    cfg.validate()?;
    let reference = cfg.reference()?;
    let variants = cfg
        .parameters
        .iter()
        .map(|&p| cfg.variant(p))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = map_paths(cfg.n_paths, |idx| cfg.path_outcomes(reference.as_ref(), &variants, idx))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg
        .p_list
        .iter()
        .map(|&p| ConvergenceTable {
            kind: cfg.kind,
            model: cfg.model.label().to_string(),
            p,
            n_paths: cfg.n_paths,
            seed: cfg.seed,
            n_steps: cfg.grid.n_steps(),
            rows: cfg
                .parameters
                .iter()
                .enumerate()
                .map(|(i, &param)| {
                    let column: Vec<PairOutcome> = outcomes.iter().map(|o| o[i]).collect();
                    lp_sup_distance(&column, p, param)
                })
                .collect(),
        })
        .collect())
}

/// Acceptance checks on a convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyVerdict {
    /// The first estimate is distinguishable from zero (> 5 SE).
    pub first_significant: bool,
    /// When significant: last ≤ first − 2 combined SE.
    pub decreasing: bool,
    /// Last estimate within 3 SE of zero.
    pub vanishes: bool,
}

impl StudyVerdict {
    pub fn passed(&self) -> bool {
        self.decreasing && self.vanishes
    }
}

impl ConvergenceTable {
    pub fn verdict(&self) -> StudyVerdict {
        let first = &self.rows[0];
        let last = self.rows.last().expect("nonempty table");
        let first_significant = first.estimate > 5.0 * first.stderr;
        let combined = (first.stderr.powi(2) + last.stderr.powi(2)).sqrt();
        StudyVerdict {
            first_significant,
            decreasing: !first_significant || last.estimate <= first.estimate - 2.0 * combined,
            vanishes: last.estimate <= 3.0 * last.stderr,
        }
    }
}

/// Count of paths whose coordinate norm ever exceeds `threshold`, and of
/// paths that hit the hard blowup guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExplosionReport {
    pub n_paths: u64,
    pub exceeded: usize,
    pub blowups: usize,
    pub frozen: usize,
    pub max_norm: f64,
}

pub fn explosion_count(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    scheme: Scheme,
    grid: PathGrid,
    n_paths: u64,
    seed: u64,
    threshold: f64,
) -> Result<ExplosionReport> {
    let per_path = map_paths(n_paths, |idx| -> Result<Option<(f64, bool)>> {
        let omega = sample_brownian(grid, model.k(), seed, idx);
        let mut max_norm = 0.0f64;
        match for_each_state(model, coeff, &omega, scheme, |_, s, _, _| {
            max_norm = max_norm.max(s.norm())
        }) {
            Ok(frozen_at) => Ok(Some((max_norm, frozen_at.is_some()))),
            Err(LabError::Blowup { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let finished: Vec<(f64, bool)> = per_path.iter().flatten().copied().collect();
    Ok(ExplosionReport {
        n_paths,
        exceeded: finished.iter().filter(|(n, _)| *n > threshold).count(),
        blowups: per_path.len() - finished.len(),
        frozen: finished.iter().filter(|(_, f)| *f).count(),
        max_norm: finished.iter().map(|(n, _)| *n).fold(0.0, f64::max),
    })
}

/// RMS over the grid of `‖W_j − Ad_{ξ_j}‖_F` (matrix route vs group route).
pub fn adjoint_route_error(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    scheme: Scheme,
    omega: &BrownianPath,
) -> Result<f64> {
    let flow = solve_rolling(model, coeff, omega, scheme)?;
    let matrix = solve_adjoint(model, &flow, omega)?;
    let sq: f64 = matrix
        .iter()
        .zip(&flow.adjoints)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok((sq / matrix.len() as f64).sqrt())
}

/// Strong two-route adjoint error on a ladder of grids. Paths are sampled on
/// the finest grid and coarsened, so every level sees the same Brownian
/// motion. Returns `(n_steps, root-mean-square error over paths)`.
pub fn adjoint_strong_errors(
    model: &GroupModel,
    coeff: &dyn CoefficientField,
    scheme: Scheme,
    steps: &[usize],
    n_paths: u64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let finest = *steps
        .iter()
        .max()
        .ok_or_else(|| LabError::InvalidArgument("empty step list".into()))?;
    let fine_grid = PathGrid::new(finest)?;
    for &n in steps {
        PathGrid::new(n)?;
    }
    let per_path = map_paths(n_paths, |idx| -> Result<Vec<f64>> {
        let omega = sample_brownian(fine_grid, model.k(), seed, idx);
        steps
            .iter()
            .map(|&n| adjoint_route_error(model, coeff, scheme, &omega.coarsen(finest / n)?))
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let sq: Vec<f64> = per_path.iter().map(|e| e[i] * e[i]).collect();
            (n, MeanEstimate::from_samples(&sq).mean.sqrt())
        })
        .collect())
}

/// `E sup_j |Θ_j|^p` for `u ≡ 1` on each grid of a dyadic ladder (common
/// Brownian motion via coarsening).
pub fn shift_variation_moments(
    model: &GroupModel,
    shift_name: &str,
    p: u32,
    steps: &[usize],
    n_paths: u64,
    seed: u64,
) -> Result<Vec<(usize, MeanEstimate)>> {
    let finest = *steps
        .iter()
        .max()
        .ok_or_else(|| LabError::InvalidArgument("empty step list".into()))?;
    let fine_grid = PathGrid::new(finest)?;
    let shifts = steps
        .iter()
        .map(|&n| CameronMartinPath::bundled(shift_name, PathGrid::new(n)?, model.k()))
        .collect::<Result<Vec<_>>>()?;
    let per_path = map_paths(n_paths, |idx| -> Result<Vec<f64>> {
        let omega = sample_brownian(fine_grid, model.k(), seed, idx);
        steps
            .iter()
            .zip(&shifts)
            .map(|(&n, h)| {
                let w = omega.coarsen(finest / n)?;
                let flow = solve_rolling(model, &UnitCoefficient, &w, Scheme::GeometricEuler)?;
                let theta = solve_shift_variation(&flow, h)?;
                let sup = theta.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
                Ok(sup.powi(p as i32))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let xs: Vec<f64> = per_path.iter().map(|e| e[i]).collect();
            (n, MeanEstimate::from_samples(&xs))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PathGrid {
        PathGrid::new(512).unwrap()
    }

    #[test]
    fn abelian_formula_is_gradient_times_shift() {
        let g = grid();
        let m = GroupModel::from_label("abelian:2").unwrap();
        let f = ScalarField::bundled("gauss", 2).unwrap();
        let h = CameronMartinPath::bundled("cosine", g, 2).unwrap();
        let w = sample_brownian(g, 2, 1, 0);
        let flow = solve_rolling(&m, &UnitCoefficient, &w, Scheme::GeometricEuler).unwrap();
        for t in [0, 100, 512] {
            let value = derivative_formula(&m, &f, &flow, &h, t).unwrap();
            let grad = f.coordinate_gradient(&flow.states[t]).unwrap();
            let expected: f64 = grad.iter().zip(h.value(t)).map(|(a, b)| a * b).sum();
            assert!((value - expected).abs() < 1e-13);
            let oracle =
                derivative_fd_oracle(&m, &f, &UnitCoefficient, Scheme::GeometricEuler, &w, &h, t, 1e-5).unwrap();
            assert!((oracle - expected).abs() < 1e-8);
        }
        let c = ScalarField::constant(3.0);
        assert_eq!(derivative_formula(&m, &c, &flow, &h, 512).unwrap(), 0.0);
        assert!(derivative_formula(&m, &c, &flow, &h, 513).is_err());
    }

    #[test]
    fn oracle_vanishes_for_zero_shift() {
        let g = grid();
        let m = GroupModel::from_label("paper-example").unwrap();
        let f = ScalarField::bundled("trig", 4).unwrap();
        let w = sample_brownian(g, 2, 2, 0);
        let zero = CameronMartinPath::zero(g, 2);
        let oracle =
            derivative_fd_oracle(&m, &f, &UnitCoefficient, Scheme::GeometricHeun, &w, &zero, 512, 1e-5).unwrap();
        assert_eq!(oracle, 0.0);
        assert!(derivative_fd_oracle(&m, &f, &UnitCoefficient, Scheme::GeometricHeun, &w, &zero, 512, 0.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        let g = grid();
        let m = GroupModel::from_label("abelian:2").unwrap();
        let f = ScalarField::bundled("trig", 2).unwrap();
        let w = sample_brownian(g, 2, 4, 0);
        let flow = solve_rolling(&m, &UnitCoefficient, &w, Scheme::GeometricEuler).unwrap();
        let t = 256;
        let grad = f.coordinate_gradient(&flow.states[t]).unwrap();
        for s in [0, 64, 256, 400, 512] {
            for i in 0..2 {
                let k = kernel_d(&m, &f, &flow, i, s, t).unwrap();
                let expected = grad[i] * g.time(s.min(t));
                assert!((k - expected).abs() < 1e-13, "s={s} i={i}");
            }
        }
        assert_eq!(kernel_d(&m, &f, &flow, 0, 0, t).unwrap(), 0.0);
        assert!(kernel_d(&m, &f, &flow, 2, 0, t).is_err());
        assert!(kernel_d(&m, &f, &flow, 0, 600, t).is_err());

        let pm = GroupModel::from_label("paper-example").unwrap();
        let flow = solve_rolling(&pm, &UnitCoefficient, &w, Scheme::GeometricEuler).unwrap();
        let f4 = ScalarField::bundled("gauss", 4).unwrap();
        let table = kernel_table(&pm, &f4, &flow, t).unwrap();
        for s in t..=512 {
            assert_eq!(table[s], table[t]);
        }
    }

    #[test]
    fn ibp_requires_enough_paths() {
        let triple = &ibp_battery(PathGrid::new(64).unwrap()).unwrap()[0];
        assert!(ibp_statistic(triple, 10, 0).is_err());
    }

    #[test]
    fn ibp_one_one_has_zero_lhs() {
        let triple = &ibp_battery(PathGrid::new(64).unwrap()).unwrap()[1];
        let r = ibp_statistic(triple, 2000, 3).unwrap();
        assert_eq!(r.lhs.mean, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn lp_sup_distance_counts() {
        let outcomes = [
            PairOutcome::Distance {
                sup: 0.0,
                frozen: false,
            },
            PairOutcome::Blowup,
            PairOutcome::Distance { sup: 0.0, frozen: true },
        ];
        let row = lp_sup_distance(&outcomes, 2, 1.0);
        assert_eq!(row.estimate, 0.0);
        assert_eq!(row.excluded_paths, 1);
        assert_eq!(row.frozen_paths, 1);
        assert_eq!(row.n_used, 2);
    }

    #[test]
    fn verdict_rules() {
        let row = |estimate: f64, stderr: f64| ConvergenceRow {
            parameter: 1.0,
            estimate,
            stderr,
            n_used: 10,
            excluded_paths: 0,
            frozen_paths: 0,
        };
        let table = |rows| ConvergenceTable {
            kind: StudyKind::EtaM,
            model: "x".into(),
            p: 2,
            n_paths: 10,
            seed: 0,
            n_steps: 8,
            rows,
        };
        assert!(table(vec![row(1.0, 0.1), row(0.0, 0.0)]).verdict().passed());
        assert!(!table(vec![row(1.0, 0.1), row(0.5, 0.01)]).verdict().passed());
        // insignificant first estimate waives the decrease check
        let v = table(vec![row(0.1, 0.1), row(0.05, 0.05)]).verdict();
        assert!(!v.first_significant && v.passed());
    }

    #[test]
    fn study_config_validation() {
        let g = PathGrid::new(16).unwrap();
        let model = GroupModel::from_label("heisenberg").unwrap();
        let base = StudyConfig {
            kind: StudyKind::EtaM,
            model: model.clone(),
            parameters: vec![1.0, 2.0],
            p_list: vec![2],
            n_paths: 4,
            seed: 0,
            grid: g,
            cutoff: CutoffSpec::default(),
            field: ScalarField::bundled("gauss", 3).unwrap(),
            shift: CameronMartinPath::bundled("unit-first", g, 2).unwrap(),
            scheme: Scheme::GeometricHeun,
        };
        assert!(base.validate().is_ok());
        assert!(StudyConfig {
            parameters: vec![2.0, 1.0],
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            p_list: vec![3],
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            kind: StudyKind::CapThetaN,
            parameters: vec![1.5],
            ..base.clone()
        }
        .validate()
        .is_err());
        assert_eq!("Theta_n".parse::<StudyKind>().unwrap(), StudyKind::CapThetaN);
    }
}
