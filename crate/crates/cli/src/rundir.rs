//! Run-directory layout and the single-owner lock. Every artifact a command
//! produces lives under one directory keyed by the config hash:
//!
//! ```text
//! runs/<run-id>/
//!   data/       split manifests
//!   models/     classifier checkpoints + training logs
//!   patches/    one artifact and preview image per patch size
//!   defense/    generator/discriminator checkpoints, per-epoch metrics
//!   reports/    accuracy/timing/transfer reports and plots
//! ```

use crate::config::ExperimentConfig;
use crate::CliError;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// The explicit override, or `runs/<run-id>` next to the working
    /// directory.
    pub fn for_config(cfg: &ExperimentConfig, override_dir: Option<PathBuf>) -> Self {
        let root =
            override_dir.unwrap_or_else(|| PathBuf::from("runs").join(cfg.run_id()));
        RunDir { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ensure_layout(&self) -> Result<(), CliError> {
        for sub in ["data", "models", "patches", "defense", "reports", "reports/plots"] {
            std::fs::create_dir_all(self.root.join(sub)).map_err(|e| {
                CliError::Validation(format!(
                    "cannot create run directory {}: {e}",
                    self.root.join(sub).display()
                ))
            })?;
        }
        Ok(())
    }

    /// Take exclusive ownership of the run directory for this process.
    pub fn lock(&self) -> Result<RunLock, CliError> {
        self.ensure_layout()?;
        let path = self.root.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Validation(format!(
                    "run directory {} is locked by another process \
                     (remove {} if that process is gone)",
                    self.root.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Validation(format!(
                "cannot create lock file {}: {e}",
                path.display()
            ))),
        }
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.manifest"))
    }

    pub fn model_ckpt(&self, backbone: &str) -> PathBuf {
        self.root.join("models").join(format!("{backbone}.ckpt"))
    }

    pub fn train_log(&self, backbone: &str) -> PathBuf {
        self.root.join("models").join(format!("{backbone}.train.log"))
    }

    pub fn patch_artifact(&self, size: usize) -> PathBuf {
        self.root.join("patches").join(format!("patch_{size}.tensors"))
    }

    pub fn patch_png(&self, size: usize) -> PathBuf {
        self.root.join("patches").join(format!("patch_{size}.png"))
    }

    pub fn patch_log(&self, size: usize) -> PathBuf {
        self.root.join("patches").join(format!("patch_{size}.log"))
    }

    pub fn generator_ckpt(&self) -> PathBuf {
        self.root.join("defense").join("generator.ckpt")
    }

    pub fn discriminator_ckpt(&self) -> PathBuf {
        self.root.join("defense").join("discriminator.ckpt")
    }

    pub fn epoch_generator_ckpt(&self, epoch: usize) -> PathBuf {
        self.root.join("defense").join(format!("generator_epoch_{epoch:03}.ckpt"))
    }

    pub fn defense_log(&self) -> PathBuf {
        self.root.join("defense").join("epochs.log")
    }

    pub fn selected_marker(&self) -> PathBuf {
        self.root.join("defense").join("selected.txt")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("reports").join("report.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("reports").join("report.txt")
    }

    pub fn timing_txt(&self) -> PathBuf {
        self.root.join("reports").join("timing.txt")
    }

    pub fn transfer_txt(&self) -> PathBuf {
        self.root.join("reports").join("transfer.txt")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("reports").join("plots")
    }
}

/// Held for the duration of a command; releases the lock file on drop.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
