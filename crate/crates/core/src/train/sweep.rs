//! Grid sweeps over `(variant, beta, lr)`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train_on, HsicVariant, TrainConfig};
use crate::dataset::Splits;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};

/// Environment variable capping how many cells train concurrently.
pub const THREADS_ENV: &str = "SHIFTLAB_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Template for every cell. Its `out_dir` is the sweep root and its
    /// `seed` is the root from which per-cell seeds are derived.
    pub base: TrainConfig,
    pub betas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub variants: Vec<HsicVariant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub name: String,
    pub variant: HsicVariant,
    pub beta: f64,
    pub lr: f64,
    pub seed: u64,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diverged: bool,
}

pub fn cell_name(variant: HsicVariant, beta: f64, lr: f64) -> String {
    format!("{variant}_b{beta}_lr{lr}")
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl GridSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GridSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() || self.lrs.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        for config in self.cells() {
            config.validate()?;
        }
        Ok(())
    }

    /// One config per cell, ordered by variant, then beta, then lr.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &beta in &self.betas {
                for &lr in &self.lrs {
                    let name = cell_name(variant, beta, lr);
                    out.push(TrainConfig {
                        beta,
                        lr,
                        hsic_variant: variant,
                        seed: derive_seed(self.base.seed, tag(&name)),
                        out_dir: self.base.out_dir.join(&name),
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

pub fn sweep_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Train every cell of `spec` and write `manifest.json` under the sweep
/// root. A failing cell is recorded and does not stop the others.
pub fn run_sweep(spec: &GridSpec) -> Result<Vec<RunDescriptor>> {
    spec.validate()?;
    let splits = Splits::load_dir(&spec.base.data_dir)?;
    run_sweep_on(spec, &splits, sweep_threads())
}

pub fn run_sweep_on(spec: &GridSpec, splits: &Splits, threads: usize) -> Result<Vec<RunDescriptor>> {
    let cells = spec.cells();
    let results: Mutex<Vec<Option<RunDescriptor>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let run_cell = |config: &TrainConfig| {
        let outcome = train_on(config, splits);
        RunDescriptor {
            name: cell_name(config.hsic_variant, config.beta, config.lr),
            variant: config.hsic_variant,
            beta: config.beta,
            lr: config.lr,
            seed: config.seed,
            config_hash: config_hash(config),
            out_dir: config.out_dir.clone(),
            metrics: config.out_dir.join("metrics.csv"),
            checkpoints: outcome.as_ref().map(|o| o.checkpoints.clone()).unwrap_or_default(),
            status: if outcome.is_ok() { RunStatus::Ok } else { RunStatus::Failed },
            diverged: matches!(outcome, Err(Error::Divergence { .. })),
            error: outcome.err().map(|e| e.to_string()),
        }
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = cells.get(i) else { break };
                let desc = run_cell(config);
                results.lock().expect("no poisoned cells")[i] = Some(desc);
            });
        }
    });
    let runs: Vec<RunDescriptor> = results
        .into_inner()
        .expect("no poisoned cells")
        .into_iter()
        .map(|d| d.expect("every cell ran"))
        .collect();
    let root = &spec.base.out_dir;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&runs).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(runs)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<RunDescriptor>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
