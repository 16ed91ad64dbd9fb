//! Run directories: `<root>/<regimen>/<fold>/{config.json, manifest.json,
//! dataset.json, metrics.csv, best.ckpt}`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::run::{metrics_csv, run_seed, RunData, RunOutcome};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Digest every file, in the given order.
pub fn digest_files(paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub dataset: u64,
    pub run: u64,
}

/// Everything needed to reproduce one run, written before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub inputs: Vec<InputDigest>,
    pub dataset_sha256: String,
    pub init_checkpoint_sha256: Option<String>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    /// Inputs whose current bytes no longer match the recorded digest.
    pub fn changed_inputs(&self) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for d in &self.inputs {
            let now = std::fs::read(&d.path).map_err(|e| Error::io(&d.path, e))?;
            if sha256_hex(&now) != d.sha256 {
                changed.push(d.path.clone());
            }
        }
        Ok(changed)
    }
}

/// Shared context for every run a command launches.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub root: PathBuf,
    pub command: String,
    pub inputs: Vec<InputDigest>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Dataset manifest of a fold as JSON bytes.
pub fn dataset_json(data: &RunData) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(&data.fold.manifest(&data.seqs)).expect("manifest serializes");
    v.push(b'\n');
    v
}

/// An open run directory.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn path_for(root: &Path, cfg: &TrainConfig, heldout: u32) -> PathBuf {
        root.join(cfg.regimen.name()).join(heldout.to_string())
    }

    /// Create the directory and write config, dataset and manifest.
    pub fn start(
        ctx: &RunContext,
        cfg: &TrainConfig,
        data: &RunData,
        init_checkpoint: Option<&[u8]>,
    ) -> Result<Self> {
        let path = Self::path_for(&ctx.root, cfg, data.heldout());
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let config = cfg.to_json();
        write(&path.join("config.json"), config.as_bytes())?;
        let dataset = dataset_json(data);
        write(&path.join("dataset.json"), &dataset)?;
        let manifest = RunManifest {
            command: ctx.command.clone(),
            config_sha256: sha256_hex(config.as_bytes()),
            seeds: Seeds {
                base: cfg.seed,
                dataset: data.fold.fold.seed,
                run: run_seed(cfg, data.heldout()),
            },
            inputs: ctx.inputs.clone(),
            dataset_sha256: sha256_hex(&dataset),
            init_checkpoint_sha256: init_checkpoint.map(sha256_hex),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now_unix(),
            finished_unix: None,
        };
        let dir = Self { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write(&self.path.join("manifest.json"), json.as_bytes())
    }

    pub fn finish(mut self, cfg: &TrainConfig, outcome: &RunOutcome) -> Result<PathBuf> {
        write(
            &self.path.join("metrics.csv"),
            metrics_csv(&outcome.metrics).as_bytes(),
        )?;
        let ckpt = save_checkpoint(&outcome.best_params, &outcome.checkpoint_meta(cfg));
        write(&self.path.join("best.ckpt"), &ckpt)?;
        self.manifest.finished_unix = Some(now_unix());
        self.write_manifest()?;
        Ok(self.path)
    }
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
