//! Manifest bookkeeping shared by the subcommands.

use crate::CliError;
use drip_core::config::{ArtifactEntry, ExperimentConfig, RunManifest, StageTiming};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct ManifestWriter {
    manifest: RunManifest,
    path: PathBuf,
    out_dir: PathBuf,
    started: Instant,
}

impl ManifestWriter {
    /// Write a pending manifest immediately so interrupted runs are visible.
    pub fn start(
        command: &str,
        config: &ExperimentConfig,
        out_dir: &Path,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::new_io(out_dir, &e.to_string()))?;
        let path = out_dir.join(format!("{command}_manifest.json"));
        let manifest = RunManifest::new(command, config.clone());
        manifest
            .write(&path)
            .map_err(|e| CliError::new_io(&path, &e.to_string()))?;
        Ok(ManifestWriter {
            manifest,
            path,
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    /// Register a produced file, checksumming its current contents.
    pub fn add_artifact(&mut self, file: &Path) -> Result<(), CliError> {
        let bytes =
            std::fs::read(file).map_err(|e| CliError::new_io(file, &e.to_string()))?;
        let digest = Sha256::digest(&bytes);
        let rel = file
            .strip_prefix(&self.out_dir)
            .unwrap_or(file)
            .to_string_lossy()
            .into_owned();
        self.manifest.artifacts.push(ArtifactEntry {
            file: rel,
            sha256: format!("{digest:x}"),
        });
        Ok(())
    }

    pub fn add_timing(&mut self, stage: &str, seconds: f64) {
        self.manifest.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
    }

    pub fn set_certification(&mut self, value: serde_json::Value) {
        self.manifest.certification = Some(value);
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.manifest.status = "complete".into();
        self.add_timing_total();
        self.manifest
            .write(&self.path)
            .map_err(|e| CliError::new_io(&self.path, &e.to_string()))
    }

    fn add_timing_total(&mut self) {
        let total = self.started.elapsed().as_secs_f64();
        self.manifest.timings.push(StageTiming {
            stage: "total".into(),
            seconds: total,
        });
    }
}

impl CliError {
    pub fn new_io(path: &Path, message: &str) -> Self {
        CliError {
            code: 4,
            message: format!("{}: {message}", path.display()),
        }
    }
}
