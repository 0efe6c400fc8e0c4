//! Output handling: files are staged in memory or in a sibling directory and
//! only moved into place once a command has succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-run a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
}

pub struct Run {
    command: &'static str,
    config: RunConfig,
    inputs: BTreeMap<String, PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    pub fn start(command: &'static str, config: &RunConfig) -> Self {
        Self {
            command,
            config: config.clone(),
            inputs: BTreeMap::new(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    fn manifest(self, outputs: Vec<String>) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            config: self.config,
            inputs: self.inputs,
            outputs,
            started_unix_seconds: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Writes `files` and the manifest into `out`. Each file goes through a
    /// temporary name; on failure the files already placed are removed.
    pub fn finish(self, out: &Path, mut files: Vec<(String, Vec<u8>)>) -> anyhow::Result<()> {
        let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
        let manifest = serde_json::to_vec_pretty(&self.manifest(names))?;
        files.push((MANIFEST_FILE.to_string(), manifest));
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut placed = Vec::new();
        for (name, bytes) in &files {
            let target = out.join(name);
            if let Err(e) = write_atomic(&target, bytes) {
                for p in placed {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
            placed.push(target);
        }
        Ok(())
    }

    /// Builds a directory with `fill` in a staging location and renames it to
    /// `out`, which must be absent or empty.
    pub fn finish_dir(self, out: &Path, fill: impl FnOnce(&Path) -> anyhow::Result<Vec<String>>) -> anyhow::Result<()> {
        if out.exists() && fs::read_dir(out)?.next().is_some() {
            bail!("output directory {} is not empty", out.display());
        }
        let staging = sibling(out, "partial");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        let result = fill(&staging).and_then(|outputs| {
            let manifest = serde_json::to_vec_pretty(&self.manifest(outputs))?;
            fs::write(staging.join(MANIFEST_FILE), manifest)?;
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&staging, out).with_context(|| format!("moving results to {}", out.display()))
        });
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{suffix}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| {
            let _ = fs::remove_file(&tmp);
            e
        })
        .with_context(|| format!("writing {}", path.display()))
}
