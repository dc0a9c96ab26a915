//! Shared command scaffolding: seed resolution, validation-first argument
//! checks and the manifest lifecycle.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const SEED_ENV: &str = "IVY_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `IVY_SEED`, when set, wins over the flag.
pub fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

pub fn usage(e: ivy_core::Error) -> CliError {
    match e {
        ivy_core::Error::Config(m) => CliError::Usage(m),
        other => CliError::Core(other),
    }
}

pub fn require_file(role: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{role} file {} does not exist", path.display())))
    }
}

/// Splits `NAME=VALUE`; a bare path is named after its file stem.
pub fn named_path(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<(String, PathBuf)>,
    /// Set when the command produced outputs but did not succeed.
    pub failure: Option<String>,
}

impl Outcome {
    pub fn add(&mut self, role: &str, path: PathBuf) {
        self.outputs.push((role.to_string(), path));
    }
}

pub struct Run {
    pub out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Fingerprints the inputs, then creates the output directory. Nothing
    /// is written if an input cannot be read.
    pub fn start(out_dir: &Path, command: &str, config: &impl Serialize, inputs: &[(&str, PathBuf)]) -> CliResult<Self> {
        let manifest = RunManifest::start(command, serde_json::to_value(config)?, inputs)?;
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Run { out_dir: out_dir.to_path_buf(), manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Records the result and writes `manifest.json`.
    pub fn finish(mut self, result: CliResult<Outcome>) -> CliResult<RunManifest> {
        let failure = result.as_ref().ok().and_then(|o| o.failure.clone());
        let flat = result.map(|o| o.outputs);
        self.manifest.finish(&flat);
        if let Some(f) = failure {
            self.manifest.status = crate::manifest::RunStatus::Failure;
            self.manifest.error = Some(f);
        }
        self.manifest.write(&self.out_dir.join(MANIFEST_FILE))?;
        Ok(self.manifest)
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
