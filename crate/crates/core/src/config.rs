//! Model, loss and training configuration, loadable from a TOML file with
//! `[model]`, `[loss]` and `[train]` tables. Every key is optional and falls
//! back to the desk-scale defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    /// Total transformer block count.
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub template_side: usize,
    pub search_side: usize,
    pub mlp_ratio: usize,
    /// Leading blocks that always run and are never examined for exit.
    pub enforced_blocks: usize,
    /// Weight applied to each exit score in the cumulative sum.
    pub exit_weight: f64,
    /// Exit fires once the cumulative score reaches `1 - exit_slack`.
    pub exit_slack: f64,
    /// Target mean exit score for the sparsity loss.
    pub sparsity_target: f64,
    /// Use one exit layer for every block instead of one per block.
    pub share_exit_layers: bool,
    /// Crop side over the box's geometric-mean side, for the template.
    pub template_context: f64,
    /// Same for the search region.
    pub search_context: f64,
    /// Strength of the center prior at inference: 1 multiplies the score map
    /// by the raw window, 0 disables it.
    pub window_blend: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            embed_dim: 64,
            num_heads: 4,
            patch_size: 8,
            channels: 3,
            template_side: 32,
            search_side: 64,
            mlp_ratio: 4,
            enforced_blocks: 3,
            exit_weight: 1.0,
            exit_slack: 0.01,
            sparsity_target: 0.5,
            share_exit_layers: false,
            template_context: 2.0,
            search_context: 4.0,
            window_blend: 1.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, channels and mlp_ratio must be positive".into());
        }
        if self.template_side % self.patch_size != 0 || self.search_side % self.patch_size != 0 {
            return bad(format!(
                "template_side {} and search_side {} must be multiples of patch_size {}",
                self.template_side, self.search_side, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 8 != 0 {
            return bad(format!("embed_dim {} must be a multiple of 8", self.embed_dim));
        }
        if !(self.enforced_blocks > 0 && self.enforced_blocks < self.depth) {
            return bad(format!(
                "need 0 < enforced_blocks ({}) < depth ({})",
                self.enforced_blocks, self.depth
            ));
        }
        if !(self.exit_slack > 0.0 && self.exit_slack < 1.0) {
            return bad(format!("exit_slack {} must lie in (0, 1)", self.exit_slack));
        }
        if !(self.exit_weight > 0.0) {
            return bad(format!("exit_weight {} must be positive", self.exit_weight));
        }
        if !(self.sparsity_target > 0.0 && self.sparsity_target <= 1.0) {
            return bad(format!("sparsity_target {} must lie in (0, 1]", self.sparsity_target));
        }
        if !(self.template_context > 0.0 && self.search_context > 0.0) {
            return bad("crop context factors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.window_blend) {
            return bad(format!("window_blend {} must lie in [0, 1]", self.window_blend));
        }
        let (kz, kx) = (self.template_tokens(), self.search_tokens());
        if !(1 < kz && kz < kx) {
            return bad(format!("need 1 < template tokens ({kz}) < search tokens ({kx})"));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch_size
    }

    /// Side of the square search feature map.
    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch_size
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn total_tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Threshold the cumulative exit score must reach.
    pub fn exit_threshold(&self) -> f64 {
        1.0 - self.exit_slack
    }
}

/// Weights of the terms in the overall objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
    pub blur: f64,
    pub sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            iou: 2.0,
            l1: 5.0,
            blur: 1e-4,
            sparsity: 1e3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.iou, self.l1, self.blur, self.sparsity];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps trained at forced full depth before exits are resolved.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Blur-robust representation loss on/off.
    pub mbrv: bool,
    /// Dynamic early exit on/off.
    pub deem: bool,
    pub blur_lengths: Vec<usize>,
    /// Probability that a sample's template receives a non-trivial blur.
    pub blur_prob: f64,
    /// Max search-crop center shift, as a fraction of the crop side.
    pub search_shift: f64,
    /// Max log-scale jitter of the search crop.
    pub search_scale_jitter: f64,
    /// Max frame gap between template and search frames.
    pub max_frame_gap: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 200,
            grad_clip: 0.0,
            seed: 0,
            mbrv: true,
            deem: true,
            blur_lengths: vec![3, 5, 7],
            blur_prob: 1.0,
            search_shift: 0.2,
            search_scale_jitter: 0.15,
            max_frame_gap: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.blur_lengths.is_empty() || self.blur_lengths.iter().any(|l| l % 2 == 0) {
            return Err(Error::Config(format!(
                "blur_lengths must be a nonempty set of odd lengths, got {:?}",
                self.blur_lengths
            )));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(Error::Config(format!("blur_prob {} not in [0, 1]", self.blur_prob)));
        }
        Ok(())
    }
}

/// Everything `train` needs, as read from a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_desk_geometry() {
        let cfg = ViTConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.template_tokens(), 16);
        assert_eq!(cfg.search_tokens(), 64);
        assert_eq!(cfg.total_tokens(), 80);
        let w = LossWeights::default();
        assert_eq!((w.iou, w.l1, w.blur, w.sparsity), (2.0, 5.0, 1e-4, 1e3));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = ViTConfig {
            template_side: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.template_side = 32;
        cfg.enforced_blocks = 0;
        assert!(cfg.validate().is_err());
        cfg.enforced_blocks = 8;
        assert!(cfg.validate().is_err());
        cfg.enforced_blocks = 3;
        cfg.exit_slack = 1.0;
        assert!(cfg.validate().is_err());
        cfg.exit_slack = 0.01;
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.num_heads = 4;
        cfg.template_side = 64;
        assert!(cfg.validate().is_err(), "template must have fewer tokens than search");
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);

        let partial = "[model]\ndepth = 4\nenforced_blocks = 2\n[train]\nmbrv = false\n";
        let cfg = RunConfig::from_toml_str(partial).unwrap();
        assert_eq!(cfg.model.depth, 4);
        assert!(!cfg.train.mbrv);
        assert_eq!(cfg.model.embed_dim, 64);

        assert!(RunConfig::from_toml_str("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nblur_lengths = [4]\n").is_err());
    }
}
