//! Training configuration: a single human-readable TOML file checked into
//! each run directory so fold/seed/weight settings are reproducible.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the two recalibration branches of a dual squeeze-and-excitation
/// block are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuseFusion {
    Max,
    Add,
}

/// All knobs of a training run. Defaults are the published operating point
/// where one exists (loss weights) and desk-scale values elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the domain-classification terms in both objectives.
    pub alpha_clsf: f64,
    /// Weight of the adversarial terms in both objectives.
    pub alpha_adv: f64,
    /// Weight of the cyclic-reconstruction term in the generator objective.
    pub alpha_rec: f64,

    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,

    pub batch_size: usize,
    pub patch_shape: [usize; 3],
    /// Random patches drawn per training study per epoch.
    pub patches_per_study: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fold_index: usize,
    pub k_folds: usize,
    /// A checkpoint is written every this many epochs (and on best
    /// validation NMSE). 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Held-out patches used per validation pass.
    pub val_patches: usize,

    pub gen_base_width: usize,
    pub gen_depth: usize,
    pub se_reduction: usize,
    pub duse_fusion: DuseFusion,
    pub disc_base_width: usize,
    /// When true the discriminator sees [PET, MR]; default is PET only.
    pub disc_sees_mr: bool,
    /// Use the saturating generator adversarial term instead of the
    /// default non-saturating -log D(G(..)) form.
    pub saturating_adv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_clsf: 0.1,
            alpha_adv: 0.1,
            alpha_rec: 0.5,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 2,
            patch_shape: [64, 64, 64],
            patches_per_study: 8,
            epochs: 200,
            seed: 42,
            fold_index: 0,
            k_folds: 5,
            checkpoint_every: 5,
            val_patches: 4,
            gen_base_width: 16,
            gen_depth: 4,
            se_reduction: 8,
            duse_fusion: DuseFusion::Max,
            disc_base_width: 16,
            disc_sees_mr: false,
            saturating_adv: false,
        }
    }
}

impl TrainConfig {
    /// Validates every field, reporting problems field-by-field.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        for (name, v) in [
            ("alpha_clsf", self.alpha_clsf),
            ("alpha_adv", self.alpha_adv),
            ("alpha_rec", self.alpha_rec),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be >= 0 and finite (got {v})"));
            }
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be > 0 (got {v})"));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1) (got {v})"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.k_folds < 2 {
            problems.push(format!("k_folds must be >= 2 (got {})", self.k_folds));
        }
        if self.fold_index >= self.k_folds {
            problems.push(format!(
                "fold_index {} out of range for k_folds {}",
                self.fold_index, self.k_folds
            ));
        }
        if self.gen_base_width == 0 || self.disc_base_width == 0 {
            problems.push("network base widths must be >= 1".into());
        }
        if self.gen_depth == 0 {
            problems.push("gen_depth must be >= 1".into());
        }
        if self.se_reduction == 0 {
            problems.push("se_reduction must be >= 1".into());
        }
        if self.patches_per_study == 0 {
            problems.push("patches_per_study must be >= 1".into());
        }
        let div = 1usize << self.gen_depth;
        for (axis, &p) in self.patch_shape.iter().enumerate() {
            if p == 0 || p % div != 0 {
                problems.push(format!(
                    "patch_shape[{axis}] = {p} must be a positive multiple of 2^gen_depth = {div}"
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                field: "train config".into(),
                reason: problems.join("; "),
            })
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig {
            field: "train config".into(),
            reason: format!("serialization failed: {e}"),
        })
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "train config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
    }

    /// SHA-256 of the canonical TOML serialization; stamped into manifests
    /// and checkpoints so runs can be traced back to their exact settings.
    pub fn hash(&self) -> String {
        let canonical = self.to_toml().expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_weights() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.alpha_clsf, 0.1);
        assert_eq!(cfg.alpha_adv, 0.1);
        assert_eq!(cfg.alpha_rec, 0.5);
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn negative_alpha_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.alpha_rec = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patch_shape_must_match_depth() {
        let mut cfg = TrainConfig::default();
        cfg.gen_depth = 3;
        cfg.patch_shape = [20, 16, 16];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("patch_shape[0]"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_toml("nonexistent_knob = 3").is_err());
    }
}
