//! Provenance record written next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::LedgerSnapshot;
use crate::config::RunConfig;
use crate::context::RunContext;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    /// Digest of `path`, recorded under `label`.
    pub fn of(path: &Path, label: impl Into<String>) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: label.into(), sha256: format!("{:x}", Sha256::digest(&data)), bytes: data.len() as u64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// `--set` assignments in the order given.
    pub overrides: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub template_hash: String,
    /// Agent role to backend description.
    pub backends: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub ledger: LedgerSnapshot,
}

impl RunManifest {
    pub fn new(command: &str, overrides: &[String], ctx: &RunContext) -> Self {
        let backends = [
            ("user", &ctx.agents.user),
            ("recommender", &ctx.agents.recommender),
            ("internal", &ctx.agents.internal),
        ]
        .into_iter()
        .map(|(k, c)| (k.to_string(), c.backend().describe()))
        .collect();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            overrides: overrides.to_vec(),
            config: ctx.config.clone(),
            seed: ctx.config.rng_seed,
            template_hash: ctx.prompts.hash(),
            backends,
            inputs: Vec::new(),
            outputs: Vec::new(),
            ledger: ctx.ledger_snapshot(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(FileDigest::of(path, path.display().to_string())?);
        Ok(self)
    }

    /// Records every file in `out_dir` except the manifest itself.
    pub fn collect_outputs(mut self, out_dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_FILE)
            .collect();
        names.sort();
        self.outputs = names
            .iter()
            .map(|n| FileDigest::of(&out_dir.join(n), n.clone()))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
