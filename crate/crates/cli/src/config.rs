//! The experiment configuration: one TOML document drives every subcommand.
//! Unknown keys are rejected, all seeds are explicit, and the run identifier
//! is a content hash of the effective configuration, so identical configs
//! share a run directory and edited ones get a fresh one.

use crate::CliError;
use patchpure_core::models::BACKBONE_IDS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Big-endian IDX image/label pair (plain or gzipped).
    Idx,
    /// One subdirectory per class, any common image format.
    Folder,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub format: DataFormat,
    /// IDX: directory holding the image/label files. Folder: the class root.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub per_class_test: usize,
    pub split_seed: u64,
    /// Working shape every image is adapted to before training.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub backbone: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub patch_sizes: Vec<usize>,
    pub target_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Size range of the random squares stamped on purifier training inputs.
    pub random_patch_min: usize,
    pub random_patch_max: usize,
    pub random_patch_seed: u64,
    pub w_adv: f64,
    pub w_recon: f64,
    pub w_percep: f64,
    pub w_class: f64,
    /// Keep every epoch's generator weights on disk, not just the selected one.
    #[serde(default)]
    pub keep_all_epochs: bool,
}

/// Thresholds applied by `evaluate --check`; absent fields are not checked.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_baseline: Option<f64>,
    /// Upper bound on patched accuracy averaged over patch sizes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_attacked_mean: Option<f64>,
    /// Per-size lower bounds on after-defense accuracy, aligned with
    /// `attack.patch_sizes`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub min_defended: Vec<f64>,
    /// Per-size lower bound on (after-defense − under-attack).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_delta: Option<f64>,
    /// Same bound on the matrices pooled over all sizes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_delta_overall: Option<f64>,
    /// Require the transferability flag to come back confirmed.
    pub require_transfer: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub timing_repetitions: usize,
    #[serde(default)]
    pub check: CheckSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub classifier: ClassifierSection,
    /// Second backbone used only for the transferability evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<ClassifierSection>,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.dataset.channels, self.dataset.height, self.dataset.width]
    }

    /// The canonical serialized form hashed into the run identifier.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical form.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        let mut hex = String::new();
        for b in &digest[..6] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        let d = &self.dataset;
        if !d.path.exists() {
            return bad(format!("dataset.path {} does not exist", d.path.display()));
        }
        match d.format {
            DataFormat::Idx => {
                for (key, value) in [("dataset.images", &d.images), ("dataset.labels", &d.labels)] {
                    match value {
                        None => return bad(format!("{key} is required for format = \"idx\"")),
                        Some(name) => {
                            let p = d.path.join(name);
                            if !p.exists() {
                                return bad(format!("{key} file {} does not exist", p.display()));
                            }
                        }
                    }
                }
            }
            DataFormat::Folder => {
                if !d.path.is_dir() {
                    return bad(format!("dataset.path {} is not a directory", d.path.display()));
                }
            }
        }
        if d.per_class_train == 0 || d.per_class_val == 0 || d.per_class_test == 0 {
            return bad("dataset per-class split sizes must all be positive".to_string());
        }
        if d.channels != 1 && d.channels != 3 {
            return bad(format!("dataset.channels must be 1 or 3, got {}", d.channels));
        }
        let side_ok = |s: usize| s >= 8 && s % 4 == 0;
        if !side_ok(d.height) || !side_ok(d.width) {
            return bad(format!(
                "dataset.height/width must be multiples of 4 and at least 8 \
                 (the purifier halves the resolution twice), got {}x{}",
                d.height, d.width
            ));
        }
        for (name, c) in [("classifier", &self.classifier)]
            .into_iter()
            .chain(self.transfer.iter().map(|t| ("transfer", t)))
        {
            if !BACKBONE_IDS.contains(&c.backbone.as_str()) {
                return bad(format!(
                    "{name}.backbone {:?} is unknown; options: {BACKBONE_IDS:?}",
                    c.backbone
                ));
            }
            if c.epochs == 0 || c.batch_size == 0 {
                return bad(format!("{name}.epochs and batch_size must be positive"));
            }
            if !(c.learning_rate.is_finite() && c.learning_rate > 0.0) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
        }
        if let Some(t) = &self.transfer {
            if t.backbone == self.classifier.backbone {
                return bad("transfer.backbone must differ from classifier.backbone".to_string());
            }
        }
        let a = &self.attack;
        if a.patch_sizes.is_empty() {
            return bad("attack.patch_sizes must not be empty".to_string());
        }
        let side = d.height.min(d.width);
        for &s in &a.patch_sizes {
            if s == 0 {
                return bad("attack.patch_sizes entries must be at least 1".to_string());
            }
            if s > side {
                return bad(format!("attack patch size {s} exceeds image side {side}"));
            }
        }
        if a.epochs == 0 || a.batch_size == 0 {
            return bad("attack.epochs and batch_size must be positive".to_string());
        }
        if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
            return bad("attack.learning_rate must be positive".to_string());
        }
        let f = &self.defense;
        if f.epochs == 0 || f.batch_size == 0 {
            return bad("defense.epochs and batch_size must be positive".to_string());
        }
        if !(f.learning_rate.is_finite() && f.learning_rate > 0.0) {
            return bad("defense.learning_rate must be positive".to_string());
        }
        for (key, b) in [("beta1", f.beta1), ("beta2", f.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("defense.{key} must lie in [0, 1), got {b}"));
            }
        }
        if !(1 <= f.random_patch_min && f.random_patch_min <= f.random_patch_max
            && f.random_patch_max <= side)
        {
            return bad(format!(
                "defense random patch range [{}, {}] invalid for {side}-pixel images",
                f.random_patch_min, f.random_patch_max
            ));
        }
        for (key, w) in [
            ("w_adv", f.w_adv),
            ("w_recon", f.w_recon),
            ("w_percep", f.w_percep),
            ("w_class", f.w_class),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("defense.{key} must be a finite non-negative weight"));
            }
        }
        if self.eval.timing_repetitions < 2 {
            return bad("eval.timing_repetitions must be at least 2".to_string());
        }
        let check = &self.eval.check;
        if !check.min_defended.is_empty() && check.min_defended.len() != a.patch_sizes.len() {
            return bad(format!(
                "eval.check.min_defended has {} entries but attack.patch_sizes has {}",
                check.min_defended.len(),
                a.patch_sizes.len()
            ));
        }
        if check.require_transfer && self.transfer.is_none() {
            return bad(
                "eval.check.require_transfer needs a [transfer] section".to_string(),
            );
        }
        Ok(())
    }
}

/// Read and validate a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
