//! Toy SwinIR-shaped super-resolution network with TaylorShift window
//! attention: configuration, parameters, forward pass, single-image training
//! and checkpoint I/O.

mod checkpoint;
mod network;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{forward, forward_tensor, RGB_MEAN};
pub use params::{init_params, BlockParams, GroupParams, ModelParams, ParamSet};
pub use train::{batch_psnr_y, overfit_single, to_images, Adam, OverfitReport};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, ScoreScale, Variant};
use crate::error::{Error, Result};
use crate::windowing::WindowSpec;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hyperparameters. Every field has a default; JSON files may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks_per_group: usize,
    pub groups: usize,
    pub heads: usize,
    /// Window side in pixels.
    pub window: usize,
    /// Odd-indexed blocks in each group shift their windows by `window / 2`.
    pub shift_windows: bool,
    /// Upscaling factor, 2, 3 or 4.
    pub scale: usize,
    pub mlp_ratio: f64,
    pub variant: Variant,
    /// Fixed score multiplier; `None` means `d_head^(-1/2)`.
    pub score_scale: Option<f64>,
    pub auto_threshold_c: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            blocks_per_group: 2,
            groups: 1,
            heads: 2,
            window: 8,
            shift_windows: true,
            scale: 2,
            mlp_ratio: 2.0,
            variant: Variant::Auto,
            score_scale: None,
            auto_threshold_c: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embed_dim == 0 || self.blocks_per_group == 0 || self.groups == 0 {
            return bad("embed_dim, blocks_per_group and groups must be positive".into());
        }
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio must give a positive hidden width, got {}", self.mlp_ratio));
        }
        self.attention_spec().validate(self.embed_dim)?;
        self.window_spec(0)?;
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            variant: self.variant,
            heads: self.heads,
            score_scale: match self.score_scale {
                Some(s) => ScoreScale::Fixed(s),
                None => ScoreScale::InvSqrtHeadDim,
            },
            auto_threshold_c: self.auto_threshold_c,
        }
    }

    /// Window geometry for block `index` within a group.
    pub fn window_spec(&self, index: usize) -> Result<WindowSpec> {
        if self.shift_windows && index % 2 == 1 {
            WindowSpec::shifted(self.window)
        } else {
            WindowSpec::plain(self.window)
        }
    }

    /// Channels produced by the last convolution before pixel shuffle.
    pub fn upsample_channels(&self) -> usize {
        3 * self.scale * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hidden_dim(), 32);
        assert_eq!(c.window_spec(0).unwrap().shift, 0);
        assert_eq!(c.window_spec(1).unwrap().shift, 4);
        assert_eq!(c.upsample_channels(), 12);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { scale: 5, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { window: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { score_scale: Some(-1.0), ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_keys_and_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"window": 48, "variant": "efficient_taylor"}"#).unwrap();
        assert_eq!(c.window, 48);
        assert_eq!(c.variant, Variant::EfficientTaylor);
        assert_eq!(c.embed_dim, 16);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"windw": 8}"#).is_err());
    }
}
