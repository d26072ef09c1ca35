use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{write_file, CliResult};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Record of one artifact-producing command, written as a single JSON line
/// next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub seconds: f64,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::io(path, e))?;
        serde_json::from_str(text.trim()).map_err(|e| {
            ucoh_core::Error::Parse {
                path: path.into(),
                line: 1,
                message: e.to_string(),
            }
            .into()
        })
    }
}

pub(crate) struct ManifestBuilder {
    command: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.into(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(self, dir: &Path) -> CliResult<PathBuf> {
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join(MANIFEST_FILE);
        write_file(&path, serde_json::to_string(&m).expect("manifest serializes") + "\n")?;
        Ok(path)
    }
}
