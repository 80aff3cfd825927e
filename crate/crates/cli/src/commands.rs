use rolling_lab::cutoff::make_coefficient;
use rolling_lab::flow::{solve_rolling, solve_shift_variation, solve_variation};
use rolling_lab::malliavin::{
    adjoint_strong_errors, derivative_battery, ibp_battery, ibp_statistic, run_convergence_study, summarize_battery,
    BatteryConfig, StudyConfig,
};
use rolling_lab::stats::{fit_slope, map_paths};
use rolling_lab::tolerances::COMPOSED;
use rolling_lab::wiener::sample_brownian;
use rolling_lab::{CameronMartinPath, LabError, ScalarField};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Outcome};
use crate::output::OutputDir;

/// Fraction of blown-up paths above which a run exits with code 4.
pub const BLOWUP_FRACTION_LIMIT: f64 = 0.01;

/// Accepted range for the measured two-route adjoint rate.
pub const ADJOINT_RATE_RANGE: (f64, f64) = (0.6, 1.4);

fn blowup_outcome(blowups: usize, n_paths: u64) -> Outcome {
    if n_paths > 0 && blowups as f64 > BLOWUP_FRACTION_LIMIT * n_paths as f64 {
        Outcome::TooManyBlowups
    } else {
        Outcome::Pass
    }
}

#[derive(Debug, Serialize)]
struct PathRow {
    path_index: u64,
    status: &'static str,
    frozen_at: Option<usize>,
    terminal_norm: Option<f64>,
    error_step: Option<usize>,
    error_norm: Option<f64>,
}

/// Per-path trajectory exports under `paths/`, a summary table and a manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let coeff = make_coefficient(&model, cfg.coefficient, &cfg.cutoff)?;
    let shift = CameronMartinPath::bundled(&cfg.study_shift, grid, model.k())?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let mut rows = Vec::new();
    let mut blowups = 0;
    const CHUNK: u64 = 64;
    let mut start = 0;
    while start < cfg.n_paths {
        let len = CHUNK.min(cfg.n_paths - start);
        let chunk = map_paths(len, |i| -> Result<(PathRow, Option<Vec<u8>>), CliError> {
            let idx = start + i;
            let omega = sample_brownian(grid, model.k(), cfg.seed, idx);
            match solve_rolling(&model, coeff.as_ref(), &omega, cfg.scheme) {
                Ok(flow) => {
                    let variation = if !cfg.export_variation {
                        None
                    } else if coeff.is_unit() {
                        Some(solve_shift_variation(&flow, &shift)?)
                    } else {
                        Some(solve_variation(&model, coeff.as_ref(), &flow, &omega, &shift)?)
                    };
                    let mut bytes = Vec::new();
                    flow.write_csv(cfg.export_adjoints, variation.as_ref(), &mut bytes)?;
                    let row = PathRow {
                        path_index: idx,
                        status: "ok",
                        frozen_at: flow.frozen_at,
                        terminal_norm: Some(flow.terminal().norm()),
                        error_step: None,
                        error_norm: None,
                    };
                    Ok((row, Some(bytes)))
                }
                Err(LabError::Blowup { step, norm }) => Ok((
                    PathRow {
                        path_index: idx,
                        status: "blowup",
                        frozen_at: None,
                        terminal_norm: None,
                        error_step: Some(step),
                        error_norm: Some(norm),
                    },
                    None,
                )),
                Err(e) => Err(e.into()),
            }
        });
        for item in chunk {
            let (row, bytes) = item?;
            match bytes {
                Some(b) => out.write_bytes(&format!("paths/path_{:06}.csv", row.path_index), &b)?,
                None => blowups += 1,
            }
            rows.push(row);
        }
        start += len;
    }
    if cfg.n_paths > 0 {
        out.write_table("paths_summary", &rows)?;
    }
    let outcome = blowup_outcome(blowups, cfg.n_paths);
    out.finish("simulate", cfg, outcome)?;
    Ok(outcome)
}

/// Formula vs finite-difference oracle on the battery of models, fields and
/// shifts; exit 3 when a summary row misses its thresholds.
pub fn cmd_verify_derivative(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let battery = BatteryConfig {
        models: cfg.battery_models.clone(),
        fields: cfg.fields.clone(),
        shifts: cfg.shifts.clone(),
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        grid: cfg.grid()?,
        eps: cfg.eps,
        scheme: cfg.scheme,
    };
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let reports = derivative_battery(&battery)?;
    let summary = summarize_battery(&reports);
    out.write_table("derivative_reports", &reports)?;
    out.write_table("derivative_summary", &summary)?;
    let outcome = if summary.iter().all(|s| s.passed) {
        Outcome::Pass
    } else {
        Outcome::StatisticalFailure
    };
    out.finish("verify-derivative", cfg, outcome)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct ConvergenceCsvRow<'a> {
    kind: &'a str,
    model: &'a str,
    p: u32,
    parameter: f64,
    estimate: f64,
    stderr: f64,
    #[serde(rename = "N")]
    n: u64,
    excluded_paths: usize,
}

#[derive(Debug, Serialize)]
struct StudyVerdictRow<'a> {
    kind: &'a str,
    p: u32,
    first_significant: bool,
    decreasing: bool,
    vanishes: bool,
    passed: bool,
    frozen_paths: Vec<usize>,
}

/// One table per (kind, p) as `cutoff_<kind>_p<p>.csv`, plus a verdict table.
pub fn cmd_cutoff_study(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let mut outcome = Outcome::Pass;
    let mut verdicts = Vec::new();
    for &kind in &cfg.study_kinds {
        let study = StudyConfig {
            kind,
            model: model.clone(),
            parameters: cfg.parameters.clone(),
            p_list: cfg.p_list.clone(),
            n_paths: cfg.n_paths,
            seed: cfg.seed,
            grid,
            cutoff: cfg.cutoff,
            field: ScalarField::bundled(&cfg.study_field, model.dim())?,
            shift: CameronMartinPath::bundled(&cfg.study_shift, grid, model.k())?,
            scheme: cfg.scheme,
        };
        study.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for table in run_convergence_study(&study)? {
            let rows: Vec<_> = table
                .rows
                .iter()
                .map(|r| ConvergenceCsvRow {
                    kind: kind.name(),
                    model: &table.model,
                    p: table.p,
                    parameter: r.parameter,
                    estimate: r.estimate,
                    stderr: r.stderr,
                    n: table.n_paths,
                    excluded_paths: r.excluded_paths,
                })
                .collect();
            let stem = format!("cutoff_{}_p{}", kind.name(), table.p);
            out.write_table(&stem, &rows)?;
            out.write_json(&format!("{stem}_full.json"), &table)?;
            let v = table.verdict();
            if !v.passed() {
                outcome = outcome.worst(Outcome::StatisticalFailure);
            }
            let excluded = table.rows.iter().map(|r| r.excluded_paths).max().unwrap_or(0);
            outcome = outcome.worst(blowup_outcome(excluded, cfg.n_paths));
            verdicts.push(StudyVerdictRow {
                kind: kind.name(),
                p: table.p,
                first_significant: v.first_significant,
                decreasing: v.decreasing,
                vanishes: v.vanishes,
                passed: v.passed(),
                frozen_paths: table.rows.iter().map(|r| r.frozen_paths).collect(),
            });
        }
    }
    out.write_json("cutoff_verdicts.json", &verdicts)?;
    out.finish("cutoff-study", cfg, outcome)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct IbpRow {
    name: String,
    lhs_mean: f64,
    lhs_stderr: f64,
    rhs_mean: f64,
    rhs_stderr: f64,
    difference: f64,
    combined_se: f64,
    passed: bool,
}

/// Integration-by-parts battery; exit 3 on any 3σ failure.
pub fn cmd_ibp(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    if cfg.n_paths < 1000 {
        return Err(CliError::Config(format!(
            "ibp needs at least 1000 paths, got {}",
            cfg.n_paths
        )));
    }
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for triple in ibp_battery(cfg.grid()?)? {
        let r = ibp_statistic(&triple, cfg.n_paths, cfg.seed)?;
        rows.push(IbpRow {
            name: r.name,
            lhs_mean: r.lhs.mean,
            lhs_stderr: r.lhs.stderr,
            rhs_mean: r.rhs.mean,
            rhs_stderr: r.rhs.stderr,
            difference: r.difference,
            combined_se: r.combined_se,
            passed: r.passed,
        });
    }
    out.write_table("ibp", &rows)?;
    let outcome = if rows.iter().all(|r| r.passed) {
        Outcome::Pass
    } else {
        Outcome::StatisticalFailure
    };
    out.finish("ibp", cfg, outcome)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct AdjointRow {
    n_steps: usize,
    rms_error: f64,
}

#[derive(Debug, Serialize)]
pub struct AdjointSummary {
    pub model: String,
    /// Slope of `log error` against `log dt`; absent when both routes agree
    /// to rounding on every grid.
    pub rate: Option<f64>,
    pub max_error: f64,
    pub passed: bool,
}

/// Two-route adjoint comparison over `adjoint_steps`, with the fitted rate.
pub fn adjoint_summary(cfg: &ExperimentConfig, errors: &[(usize, f64)]) -> AdjointSummary {
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    if max_error <= COMPOSED {
        return AdjointSummary {
            model: cfg.model.clone(),
            rate: None,
            max_error,
            passed: true,
        };
    }
    let xs: Vec<f64> = errors.iter().map(|e| (1.0 / e.0 as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.1.ln()).collect();
    let rate = fit_slope(&xs, &ys);
    AdjointSummary {
        model: cfg.model.clone(),
        rate: Some(rate),
        max_error,
        passed: (ADJOINT_RATE_RANGE.0..=ADJOINT_RATE_RANGE.1).contains(&rate),
    }
}

pub fn cmd_adjoint_crosscheck(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let coeff = make_coefficient(&model, cfg.coefficient, &cfg.cutoff)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let errors = adjoint_strong_errors(
        &model,
        coeff.as_ref(),
        cfg.scheme,
        &cfg.adjoint_steps,
        cfg.n_paths,
        cfg.seed,
    )?;
    let rows: Vec<_> = errors
        .iter()
        .map(|&(n_steps, rms_error)| AdjointRow { n_steps, rms_error })
        .collect();
    out.write_table("adjoint_errors", &rows)?;
    let summary = adjoint_summary(cfg, &errors);
    out.write_json("adjoint_summary.json", &summary)?;
    let outcome = if summary.passed {
        Outcome::Pass
    } else {
        Outcome::StatisticalFailure
    };
    out.finish("adjoint-crosscheck", cfg, outcome)?;
    Ok(outcome)
}
