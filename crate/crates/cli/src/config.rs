use std::path::{Path, PathBuf};

use rolling_lab::cutoff::{CoefficientKind, CutoffSpec};
use rolling_lab::flow::Scheme;
use rolling_lab::group::BUNDLED_FIELDS;
use rolling_lab::malliavin::StudyKind;
use rolling_lab::wiener::BUNDLED_SHIFTS;
use rolling_lab::{CameronMartinPath, GroupModel, PathGrid, ScalarField};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment, as read from JSON. Every key is optional; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Model for `simulate`, `cutoff-study` and `adjoint-crosscheck`.
    pub model: String,
    /// Models for the `verify-derivative` battery.
    pub battery_models: Vec<String>,
    pub coefficient: CoefficientKind,
    pub cutoff: CutoffSpec,
    pub scheme: Scheme,
    pub n_steps: usize,
    pub seed: u64,
    pub n_paths: u64,
    pub p_list: Vec<u32>,
    /// `m` values (or `n` values for `Theta_n`), ascending.
    pub parameters: Vec<f64>,
    pub study_kinds: Vec<StudyKind>,
    pub fields: Vec<String>,
    pub shifts: Vec<String>,
    /// Field compared by the `eta_m` study.
    pub study_field: String,
    /// Shift used by the `theta_m` and `Theta_n` studies.
    pub study_shift: String,
    pub eps: f64,
    /// Grids for the adjoint two-route comparison.
    pub adjoint_steps: Vec<usize>,
    /// Include adjoint matrices in trajectory exports.
    pub export_adjoints: bool,
    /// Include the variation process along `study_shift` in trajectory exports.
    pub export_variation: bool,
    pub out_dir: PathBuf,
    /// Worker threads, 0 = automatic. Never changes results.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "paper-example".into(),
            battery_models: vec!["abelian:2".into(), "heisenberg".into(), "paper-example".into()],
            coefficient: CoefficientKind::Full,
            cutoff: CutoffSpec::default(),
            scheme: Scheme::GeometricHeun,
            n_steps: PathGrid::DEFAULT_STEPS,
            seed: 0,
            n_paths: 100,
            p_list: vec![2, 4],
            parameters: vec![1.0, 2.0, 4.0, 8.0],
            study_kinds: StudyKind::ALL.to_vec(),
            fields: BUNDLED_FIELDS.iter().map(|s| s.to_string()).collect(),
            shifts: BUNDLED_SHIFTS.iter().map(|s| s.to_string()).collect(),
            study_field: "gauss".into(),
            study_shift: "unit-first".into(),
            eps: 1e-5,
            adjoint_steps: vec![1024, 2048, 4096, 8192],
            export_adjoints: false,
            export_variation: false,
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(paths) = o.paths {
            self.n_paths = paths;
        }
        if let Some(steps) = o.steps {
            self.n_steps = steps;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(threads) = o.threads {
            self.threads = threads;
        }
        self
    }

    pub fn grid(&self) -> Result<PathGrid, CliError> {
        PathGrid::new(self.n_steps).map_err(config_error)
    }

    pub fn model(&self) -> Result<GroupModel, CliError> {
        GroupModel::from_label(&self.model).map_err(config_error)
    }

    /// Checks everything that can be checked without simulating.
    pub fn validate(&self) -> Result<(), CliError> {
        let grid = self.grid()?;
        let model = self.model()?;
        self.cutoff.validate().map_err(config_error)?;
        for label in &self.battery_models {
            let m = GroupModel::from_label(label).map_err(config_error)?;
            for name in &self.fields {
                ScalarField::bundled(name, m.dim()).map_err(config_error)?;
            }
            for name in &self.shifts {
                CameronMartinPath::bundled(name, grid, m.k()).map_err(config_error)?;
            }
        }
        ScalarField::bundled(&self.study_field, model.dim()).map_err(config_error)?;
        CameronMartinPath::bundled(&self.study_shift, grid, model.k()).map_err(config_error)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CliError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.p_list.is_empty() || self.p_list.iter().any(|p| !matches!(p, 2 | 4)) {
            return Err(CliError::Config("p_list entries must be 2 or 4".into()));
        }
        if self.parameters.is_empty() || self.parameters.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config(
                "parameters must be nonempty and strictly ascending".into(),
            ));
        }
        if self.parameters.iter().any(|p| *p <= 0.0 || !p.is_finite()) {
            return Err(CliError::Config("parameters must be positive".into()));
        }
        for &n in &self.adjoint_steps {
            PathGrid::new(n).map_err(config_error)?;
        }
        if self.adjoint_steps.len() < 2 {
            return Err(CliError::Config("adjoint_steps needs at least two grids".into()));
        }
        Ok(())
    }
}

fn config_error(e: rolling_lab::LabError) -> CliError {
    CliError::Config(e.to_string())
}

/// Thread count from the flag, then `ROLLING_LAB_THREADS`, then automatic.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<usize, CliError> {
    match (flag, env) {
        (Some(n), _) => Ok(n),
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("ROLLING_LAB_THREADS must be a count, got {v:?}"))),
        (None, None) => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "colour": "red"}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = ExperimentConfig::from_json(r#"{"cutoff": {"m": 1.0, "n": 2, "k": 3}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = ExperimentConfig::from_json(r#"{"model": "heisenberg", "coefficient": "u_m"}"#).unwrap();
        assert_eq!(c.model, "heisenberg");
        assert_eq!(c.coefficient, CoefficientKind::UM);
        assert_eq!(c.n_steps, 4096);
        assert_eq!(c.study_kinds.len(), 4);
    }

    #[test]
    fn overrides_win() {
        let c = ExperimentConfig::default().apply(&Overrides {
            seed: Some(9),
            paths: Some(3),
            steps: Some(64),
            out: Some("x".into()),
            threads: Some(2),
        });
        assert_eq!((c.seed, c.n_paths, c.n_steps, c.threads), (9, 3, 64, 2));
        assert_eq!(c.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn invalid_values() {
        let bad = [
            r#"{"n_steps": 1000}"#,
            r#"{"model": "sphere"}"#,
            r#"{"p_list": [3]}"#,
            r#"{"parameters": [2.0, 1.0]}"#,
            r#"{"fields": ["nope"]}"#,
            r#"{"eps": 0.0}"#,
            r#"{"cutoff": {"m": -1.0, "n": 1}}"#,
            r#"{"adjoint_steps": [1024]}"#,
        ];
        for text in bad {
            let c = ExperimentConfig::from_json(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn thread_resolution() {
        assert_eq!(resolve_threads(Some(3), Some("5")).unwrap(), 3);
        assert_eq!(resolve_threads(None, Some("5")).unwrap(), 5);
        assert_eq!(resolve_threads(None, None).unwrap(), 0);
        assert!(resolve_threads(None, Some("many")).is_err());
    }
}
