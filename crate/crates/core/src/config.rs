//! Architecture hyperparameters.
//!
//! Values fixed by the published architecture are validated on load; any
//! deviation from them must be explicitly allowed (the CLI's `--override`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::output_extent;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config deviates from the pinned architecture ({}); pass --override to allow", .0.join(", "))]
    PinnedDeviation(Vec<String>),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Depthwise-separable front-end layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsmConfig {
    pub stem_out_channels: usize,
    pub block_out_channels: Vec<usize>,
    /// Frequency stride of each block's first depthwise stage.
    pub freq_strides: Vec<usize>,
    /// Square kernel size of every DSM convolution.
    pub dsm_kernel: usize,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig {
            stem_out_channels: 32,
            block_out_channels: vec![32, 32, 64, 64],
            freq_strides: vec![1, 2, 2, 2],
            dsm_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mel_bins: usize,
    #[serde(flatten)]
    pub dsm: DsmConfig,
    pub stem_tdnn_channels: usize,
    pub stem_tdnn_kernel: usize,
    pub block_depths: Vec<usize>,
    pub growth: usize,
    pub fnn_hidden: usize,
    pub cam_bottleneck: usize,
    pub segment_length: usize,
    pub tdnn_kernel: usize,
    pub tdnn_dilations: Vec<usize>,
    pub embedding_dim: usize,
    pub bn_epsilon: f32,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bins: 80,
            dsm: DsmConfig::default(),
            stem_tdnn_channels: 128,
            stem_tdnn_kernel: 5,
            block_depths: vec![12, 24, 16],
            growth: 32,
            fnn_hidden: 128,
            cam_bottleneck: 64,
            segment_length: 100,
            tdnn_kernel: 3,
            tdnn_dilations: vec![1, 2, 2],
            embedding_dim: 192,
            bn_epsilon: 1e-5,
            aam_margin: 0.2,
            aam_scale: 32.0,
        }
    }
}

impl ModelConfig {
    /// Read a flat TOML file; missing keys take their default values.
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Structural checks plus, unless `allow_override`, the pinned constants.
    pub fn validate(&self, allow_override: bool) -> Result<(), ConfigError> {
        self.validate_structure()?;
        if !allow_override {
            let dev = self.pinned_deviations();
            if !dev.is_empty() {
                return Err(ConfigError::PinnedDeviation(dev));
            }
        }
        Ok(())
    }

    /// Names of pinned architecture constants this config changes.
    pub fn pinned_deviations(&self) -> Vec<String> {
        let pinned = ModelConfig::default();
        let mut out = Vec::new();
        let mut check = |name: &str, same: bool| {
            if !same {
                out.push(name.to_string());
            }
        };
        check("mel_bins", self.mel_bins == pinned.mel_bins);
        check("block_out_channels", self.dsm.block_out_channels == pinned.dsm.block_out_channels);
        check("freq_strides", self.dsm.freq_strides == pinned.dsm.freq_strides);
        check("block_depths", self.block_depths == pinned.block_depths);
        check("growth", self.growth == pinned.growth);
        check("segment_length", self.segment_length == pinned.segment_length);
        check("aam_margin", self.aam_margin == pinned.aam_margin);
        check("aam_scale", self.aam_scale == pinned.aam_scale);
        out
    }

    fn validate_structure(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.mel_bins != crate::audio::NUM_MEL_BINS {
            return bad(format!("mel_bins must be {} to match the feature frontend", crate::audio::NUM_MEL_BINS));
        }
        let positive = [
            ("stem_out_channels", self.dsm.stem_out_channels),
            ("dsm_kernel", self.dsm.dsm_kernel),
            ("stem_tdnn_channels", self.stem_tdnn_channels),
            ("stem_tdnn_kernel", self.stem_tdnn_kernel),
            ("growth", self.growth),
            ("fnn_hidden", self.fnn_hidden),
            ("cam_bottleneck", self.cam_bottleneck),
            ("segment_length", self.segment_length),
            ("tdnn_kernel", self.tdnn_kernel),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, k) in [
            ("dsm_kernel", self.dsm.dsm_kernel),
            ("stem_tdnn_kernel", self.stem_tdnn_kernel),
            ("tdnn_kernel", self.tdnn_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd for same-length padding"));
            }
        }
        if self.dsm.block_out_channels.is_empty() || self.dsm.block_out_channels.len() != self.dsm.freq_strides.len() {
            return bad("block_out_channels and freq_strides must be non-empty and equally long".into());
        }
        if self.dsm.block_out_channels.contains(&0) || self.dsm.freq_strides.contains(&0) {
            return bad("DSM channels and strides must be positive".into());
        }
        if self.block_depths.len() != 3 || self.tdnn_dilations.len() != 3 {
            return bad("block_depths and tdnn_dilations need exactly three entries".into());
        }
        if self.block_depths.contains(&0) || self.tdnn_dilations.contains(&0) {
            return bad("block depths and dilations must be positive".into());
        }
        for b in 0..2 {
            if self.block_output_channels(b) % 2 != 0 {
                return bad(format!("dense block {} output channels must be even for the transition", b + 1));
            }
        }
        if !(self.bn_epsilon >= 0.0) {
            return bad("bn_epsilon must be non-negative".into());
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.aam_margin) || !(self.aam_scale > 0.0) {
            return bad("aam_margin must lie in [0, pi/2) and aam_scale must be positive".into());
        }
        Ok(())
    }

    pub fn dsm_padding(&self) -> usize {
        self.dsm.dsm_kernel / 2
    }

    /// Frequency extent after the stem and after each DSM block.
    pub fn dsm_freq_chain(&self) -> Vec<usize> {
        let k = self.dsm.dsm_kernel;
        let p = self.dsm_padding();
        let mut f = output_extent(self.mel_bins, k, 1, p, 1).unwrap_or(0);
        let mut chain = vec![f];
        for &s in &self.dsm.freq_strides {
            f = output_extent(f, k, s, p, 1).unwrap_or(0);
            chain.push(f);
        }
        chain
    }

    pub fn dsm_output_channels(&self) -> usize {
        *self.dsm.block_out_channels.last().unwrap()
    }

    /// Channels of the flattened DSM map fed to the TDNN stem.
    pub fn backbone_input_channels(&self) -> usize {
        self.dsm_output_channels() * self.dsm_freq_chain().last().copied().unwrap_or(0)
    }

    pub fn block_input_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.stem_tdnn_channels
        } else {
            self.block_output_channels(block - 1) / 2
        }
    }

    pub fn block_output_channels(&self, block: usize) -> usize {
        self.block_input_channels(block) + self.growth * self.block_depths[block]
    }

    /// Channels after multi-scale aggregation of all three blocks.
    pub fn mfa_channels(&self) -> usize {
        (0..3).map(|b| self.block_output_channels(b)).sum()
    }

    /// Length of the pooled mean+std statistics vector.
    pub fn stats_dim(&self) -> usize {
        2 * self.mfa_channels()
    }

    /// A deliberately small variant for fast tests; needs `allow_override`.
    pub fn tiny() -> Self {
        ModelConfig {
            dsm: DsmConfig {
                stem_out_channels: 4,
                block_out_channels: vec![4, 4, 8, 8],
                freq_strides: vec![1, 2, 2, 2],
                dsm_kernel: 3,
            },
            stem_tdnn_channels: 16,
            block_depths: vec![2, 2, 2],
            growth: 4,
            fnn_hidden: 8,
            cam_bottleneck: 4,
            segment_length: 10,
            embedding_dim: 12,
            ..ModelConfig::default()
        }
    }
}
