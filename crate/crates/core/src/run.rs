//! Run directories: one root per run holding checkpoints, samples, metrics,
//! reports, and a `run.json` that records everything needed to rerun it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_data::write_json;

pub const RUN_FILE: &str = "run.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    const SUBDIRS: [&'static str; 4] = ["checkpoints", "samples", "metrics", "reports"];

    /// Creates the run layout. A fresh root is built under a temporary
    /// sibling name and renamed into place, so a half-made run directory is
    /// never visible. An existing root is reused and completed.
    pub fn create(root: &Path) -> Result<Self> {
        if root.exists() {
            for sub in Self::SUBDIRS {
                let p = root.join(sub);
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
            return Ok(Self {
                root: root.to_path_buf(),
            });
        }
        let parent = match root.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let name = root
            .file_name()
            .ok_or_else(|| Error::validation(format!("invalid run directory {}", root.display())))?;
        let staging = parent.join(format!(
            ".{}.staging-{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        for sub in Self::SUBDIRS {
            let p = staging.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        fs::rename(&staging, root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn metrics_file(&self) -> PathBuf {
        self.metrics().join("metrics.jsonl")
    }

    pub fn timing_file(&self) -> PathBuf {
        self.metrics().join("timing.jsonl")
    }

    pub fn run_file(&self) -> PathBuf {
        self.root.join(RUN_FILE)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }

    pub fn write_run_info<C: Serialize>(&self, info: &RunInfo<C>) -> Result<()> {
        write_json(&self.run_file(), info)
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo<C> {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: C,
}

impl<C> RunInfo<C> {
    pub fn new(command: &str, seed: u64, config: C) -> Self {
        Self {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            seed,
            config,
        }
    }
}

pub fn read_run_info<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<RunInfo<C>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
