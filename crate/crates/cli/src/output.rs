use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Outcome};

/// Written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub library_version: &'a str,
    pub seed: u64,
    pub n_paths: u64,
    pub exit_code: i32,
    pub outputs: Vec<String>,
    pub config: &'a ExperimentConfig,
}

/// Collects the files a command writes, relative to the output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn write_bytes(&mut self, relative: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        self.written.push(relative.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, relative: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(relative, text.as_bytes())
    }

    /// `<stem>.csv` with a header row, plus the `<stem>.json` mirror.
    pub fn write_table<T: Serialize>(&mut self, stem: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.write_bytes(&format!("{stem}.csv"), &bytes)?;
        self.write_json(&format!("{stem}.json"), rows)
    }

    /// Writes `config.json` and `manifest.json` last.
    pub fn finish(mut self, command: &str, config: &ExperimentConfig, outcome: Outcome) -> Result<(), CliError> {
        self.write_json("config.json", config)?;
        let manifest = Manifest {
            command,
            library_version: rolling_lab::VERSION,
            seed: config.seed,
            n_paths: config.n_paths,
            exit_code: outcome.code(),
            outputs: self.written.clone(),
            config,
        };
        self.write_json("manifest.json", &manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        name: &'static str,
        value: f64,
    }

    #[test]
    fn table_has_header_and_quotes() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write_table(
            "t",
            &[
                Row {
                    name: "a,b",
                    value: 0.1,
                },
                Row { name: "c", value: 2.0 },
            ],
        )
        .unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "name,value\n\"a,b\",0.1\nc,2.0\n");
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(json[0]["name"], "a,b");
        out.finish("test", &ExperimentConfig::default(), Outcome::Pass).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["outputs"][0], "t.csv");
        assert_eq!(manifest["config"]["n_steps"], 4096);
    }
}
