use std::fs;
use std::path::PathBuf;

use serde_json::{json, Value};

use crate::config::Command;
use crate::CliError;

/// Files written by a run, plus the manifest that records them.
pub struct Outputs {
    dir: PathBuf,
    command: Command,
    seed: u64,
    threads: usize,
    files: Vec<String>,
    params: Value,
    result: Value,
    summary: Option<String>,
}

impl Outputs {
    pub fn create(dir: PathBuf, command: Command, seed: u64, threads: usize) -> Result<Self, CliError> {
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Internal(format!("output_dir {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            command,
            seed,
            threads,
            files: Vec::new(),
            params: Value::Null,
            result: Value::Null,
            summary: None,
        })
    }

    /// Records the fully resolved parameters for the manifest.
    pub fn set_params<T: serde::Serialize>(&mut self, params: &T) {
        self.params = serde_json::to_value(params).unwrap_or(Value::Null);
    }

    pub fn set_result<T: serde::Serialize>(&mut self, result: &T) {
        self.result = serde_json::to_value(result).unwrap_or(Value::Null);
    }

    pub fn set_summary(&mut self, s: String) {
        self.summary = Some(s);
    }

    pub fn summary(&self) -> Option<&str> {
        self.summary.as_deref()
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    pub fn finish(&mut self, result: &Result<(), CliError>) -> Result<(), CliError> {
        let (status, code, message) = match result {
            Ok(()) => ("ok", 0, None),
            Err(e) => (e.status(), e.exit_code(), Some(e.message().to_string())),
        };
        let manifest = json!({
            "command": self.command,
            "params": self.params,
            "output_dir": self.dir.display().to_string(),
            "seed": self.seed,
            "threads": self.threads,
            "status": status,
            "exit_code": code,
            "message": message,
            "outputs": self.files,
            "result": self.result,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
    }
}

pub fn f(v: f64) -> String {
    format!("{v}")
}
