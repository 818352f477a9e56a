//! Flat TOML configuration shared by every command.

use std::path::Path;

use chromalink_autograd::PadMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlab::OcclusionThresholds;
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Working resolution; frames are resized to this before processing.
    pub width: usize,
    pub height: usize,
    pub block_size: usize,
    pub max_clip_len: usize,
    pub seed: u64,

    pub stem_channels: usize,
    pub c_low: usize,
    pub c_high: usize,
    /// Names of the reference-network layers the low/high taps stand in for.
    pub low_taps: String,
    pub high_taps: String,
    /// `zero`, `circular` or `replicate`.
    pub backbone_padding: String,
    pub backbone_pretrained: bool,

    pub d_model: usize,
    pub corr_heads: usize,
    pub ffn_hidden: usize,
    pub ct_blocks: usize,
    pub pos_every_block: bool,
    pub fuse_channels: usize,
    pub fuse_res_blocks: usize,
    pub head_dim: usize,
    /// Initial weight of the augmented head's high-level term (read from the
    /// listed α; the symbol is otherwise undefined).
    pub alpha_init: f64,
    /// Softmax temperature for color warping (read from the listed γ).
    pub tau: f64,

    pub linkage_hidden: usize,

    pub col_channels: usize,
    pub col_d_model: usize,
    pub col_heads: usize,
    pub col_ct_blocks: usize,

    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_temp: f64,
    pub lambda_adv: f64,
    pub lambda_smooth: f64,
    pub smooth_sigma: f64,
    pub disc_channels: usize,
    pub perc_channels: usize,
    pub occ_alpha1: f64,
    pub occ_alpha2: f64,

    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_disc: f64,
    pub lr_backbone: f64,
    pub lr_others: f64,
    pub lr_decay_epoch1: usize,
    pub lr_decay_epoch2: usize,
    pub epochs: usize,
    /// `0` means one pass over the dataset.
    pub steps_per_epoch: usize,
    /// `0` means `epochs × steps_per_epoch`.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,

    pub no_transformer_branch: bool,
    pub single_head: bool,
    pub no_linkage: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            width: 96,
            height: 64,
            block_size: 2,
            max_clip_len: 20,
            seed: 0,
            stem_channels: 32,
            c_low: 128,
            c_high: 256,
            low_taps: "relu1_2,relu2_3".into(),
            high_taps: "relu3_3,relu3_19".into(),
            backbone_padding: "zero".into(),
            backbone_pretrained: false,
            d_model: 96,
            corr_heads: 6,
            ffn_hidden: 192,
            ct_blocks: 3,
            pos_every_block: true,
            fuse_channels: 512,
            fuse_res_blocks: 3,
            head_dim: 256,
            alpha_init: 0.75,
            tau: 0.01,
            linkage_hidden: 192,
            col_channels: 32,
            col_d_model: 96,
            col_heads: 4,
            col_ct_blocks: 3,
            lambda_l1: 0.5,
            lambda_perc: 0.05,
            lambda_temp: 3.0,
            lambda_adv: 0.2,
            lambda_smooth: 4.0,
            smooth_sigma: 0.1,
            disc_channels: 32,
            perc_channels: 32,
            occ_alpha1: 0.01,
            occ_alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-4,
            lr_disc: 1e-3,
            lr_backbone: 1e-5,
            lr_others: 1e-4,
            lr_decay_epoch1: 4,
            lr_decay_epoch2: 8,
            epochs: 10,
            steps_per_epoch: 0,
            max_steps: 0,
            checkpoint_every: 0,
            log_every: 10,
            no_transformer_branch: false,
            single_head: false,
            no_linkage: false,
        }
    }
}

impl PipelineConfig {
    /// Full-scale geometry: 384×216 frames.
    pub fn full_scale() -> Self {
        PipelineConfig { width: 384, height: 216, stem_channels: 64, ..Default::default() }
    }

    /// A narrow model that trains in minutes on one CPU core.
    pub fn tiny() -> Self {
        PipelineConfig {
            stem_channels: 8,
            c_low: 16,
            c_high: 24,
            d_model: 24,
            corr_heads: 6,
            ffn_hidden: 48,
            ct_blocks: 1,
            fuse_channels: 32,
            fuse_res_blocks: 1,
            head_dim: 32,
            linkage_hidden: 48,
            col_channels: 12,
            col_d_model: 24,
            col_heads: 4,
            col_ct_blocks: 1,
            disc_channels: 8,
            perc_channels: 8,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_size == 0 {
            return bad("block_size must be ≥ 1".into());
        }
        if self.width < 8 || self.height < 8 {
            return bad(format!("resolution {}x{} is below 8x8", self.width, self.height));
        }
        if !self.d_model.is_multiple_of(6) || !self.d_model.is_multiple_of(self.corr_heads.max(1)) {
            return bad(format!("d_model {} must be divisible by 6 and by corr_heads {}", self.d_model, self.corr_heads));
        }
        if !self.col_d_model.is_multiple_of(6) || !self.col_d_model.is_multiple_of(self.col_heads.max(1)) {
            return bad(format!(
                "col_d_model {} must be divisible by 6 and by col_heads {}",
                self.col_d_model, self.col_heads
            ));
        }
        if self.corr_heads == 0 || self.col_heads == 0 {
            return bad("attention head counts must be ≥ 1".into());
        }
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("c_low", self.c_low),
            ("c_high", self.c_high),
            ("fuse_channels", self.fuse_channels),
            ("head_dim", self.head_dim),
            ("col_channels", self.col_channels),
            ("disc_channels", self.disc_channels),
            ("perc_channels", self.perc_channels),
            ("ffn_hidden", self.ffn_hidden),
            ("linkage_hidden", self.linkage_hidden),
        ] {
            if v < 2 {
                return bad(format!("{name} must be ≥ 2"));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.smooth_sigma <= 0.0 {
            return bad("smooth_sigma must be > 0".into());
        }
        self.loss_weights().validate()?;
        self.pad_mode()?;
        Ok(())
    }

    pub fn pad_mode(&self) -> Result<PadMode> {
        match self.backbone_padding.as_str() {
            "zero" => Ok(PadMode::Zero),
            "circular" => Ok(PadMode::Circular),
            "replicate" => Ok(PadMode::Replicate),
            other => Err(Error::Config(format!("backbone_padding {other:?}; valid: zero, circular, replicate"))),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.lambda_l1,
            perc: self.lambda_perc,
            temp: self.lambda_temp,
            adv: self.lambda_adv,
            smooth: self.lambda_smooth,
        }
    }

    pub fn occlusion_thresholds(&self) -> OcclusionThresholds {
        OcclusionThresholds { alpha1: self.occ_alpha1, alpha2: self.occ_alpha2 }
    }

    /// Linkage is active only when the transformer branch produces tokens.
    pub fn uses_linkage(&self) -> bool {
        !self.no_linkage && !self.no_transformer_branch
    }

    /// Base learning rate of a parameter group. The backbone's reduced rate
    /// applies only to pretrained weights.
    pub fn group_lr(&self, group: &str) -> f64 {
        match group {
            "disc" => self.lr_disc,
            "backbone" if self.backbone_pretrained => self.lr_backbone,
            _ => self.lr_others,
        }
    }

    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch2 {
            0.01
        } else if epoch >= self.lr_decay_epoch1 {
            0.1
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_listed_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.5, 0.999, 1e-4));
        assert_eq!((c.lr_disc, c.lr_backbone, c.lr_others), (1e-3, 1e-5, 1e-4));
        assert_eq!((c.block_size, c.max_clip_len, c.epochs), (2, 20, 10));
        assert_eq!((c.corr_heads, c.col_heads, c.ct_blocks, c.fuse_res_blocks), (6, 4, 3, 3));
        assert_eq!((c.alpha_init, c.tau), (0.75, 0.01));
        let f = PipelineConfig::full_scale();
        assert_eq!((f.width, f.height), (384, 216));
        c.validate().unwrap();
        f.validate().unwrap();
        PipelineConfig::tiny().validate().unwrap();
    }

    #[test]
    fn schedule_decays_tenfold_then_hundredfold() {
        let c = PipelineConfig::default();
        let lr = |e| c.group_lr("others") * c.lr_multiplier(e);
        assert!((lr(4) / lr(3) - 0.1).abs() < 1e-12);
        assert!((lr(8) / lr(3) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn backbone_rate_depends_on_pretraining() {
        let mut c = PipelineConfig::default();
        assert_eq!(c.group_lr("backbone"), c.lr_others);
        c.backbone_pretrained = true;
        assert_eq!(c.group_lr("backbone"), 1e-5);
    }

    #[test]
    fn toml_roundtrip_and_rejections() {
        let c = PipelineConfig::tiny();
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = PipelineConfig::from_toml_str("block_size = 3\nwidth = 128").unwrap();
        assert_eq!((partial.block_size, partial.width, partial.height), (3, 128, 64));
        assert!(PipelineConfig::from_toml_str("blok_size = 3").is_err());
        assert!(PipelineConfig::from_toml_str("d_model = 100").is_err());
        assert!(PipelineConfig::from_toml_str("tau = 0.0").is_err());
        assert!(PipelineConfig::from_toml_str("backbone_padding = \"mirror\"").is_err());
    }
}
