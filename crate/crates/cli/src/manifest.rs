//! Per-run provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};

use ivy_core::digest::sha256_file;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(role: &str, path: &Path) -> CliResult<Self> {
        Ok(FileRecord {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, inputs: &[(&str, PathBuf)]) -> CliResult<Self> {
        Ok(RunManifest {
            run_id: uuid::Uuid::new_v4().to_string(),
            command: command.to_string(),
            config,
            inputs: inputs.iter().map(|(role, p)| FileRecord::of(role, p)).collect::<CliResult<_>>()?,
            outputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        })
    }

    pub fn finish(&mut self, result: &CliResult<Vec<(String, PathBuf)>>) {
        self.finished_at = Some(now());
        match result {
            Ok(outputs) => {
                let records: CliResult<Vec<FileRecord>> =
                    outputs.iter().map(|(role, p)| FileRecord::of(role, p)).collect();
                match records {
                    Ok(r) => {
                        self.outputs = r;
                        self.status = RunStatus::Success;
                    }
                    Err(e) => {
                        self.status = RunStatus::Failure;
                        self.error = Some(e.to_string());
                    }
                }
            }
            Err(e) => {
                self.status = RunStatus::Failure;
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn output(&self, role: &str) -> Option<&FileRecord> {
        self.outputs.iter().find(|f| f.role == role)
    }

    pub fn input(&self, role: &str) -> Option<&FileRecord> {
        self.inputs.iter().find(|f| f.role == role)
    }
}
