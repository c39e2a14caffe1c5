use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which decoder positions a tap reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPooling {
    /// The last decoder position.
    Final,
    /// Mean over decoder positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch length in samples.
    pub patch_len: usize,
    pub stride: usize,
    pub context_len: usize,
    pub d_model: usize,
    /// Hidden width of feed-forward sublayers and residual blocks.
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub n_heads: usize,
    /// Forecast horizon in samples.
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    /// Learned decoder input tokens; the forecast is read from the last one.
    pub decoder_tokens: usize,
    pub dropout: f64,
    /// Instance-normalization floor.
    pub epsilon: f64,
    pub layer_norm_eps: f64,
    pub tap_pooling: TapPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 16,
            context_len: 512,
            d_model: 64,
            d_ff: 128,
            n_enc: 4,
            n_dec: 4,
            n_heads: 4,
            horizon: 64,
            quantiles: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            decoder_tokens: 1,
            dropout: 0.1,
            epsilon: 1e-5,
            layer_norm_eps: 1e-6,
            tap_pooling: TapPooling::Final,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.context_len / self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Column of the median in the quantile list.
    pub fn median_index(&self) -> usize {
        self.quantiles
            .iter()
            .position(|q| (*q - 0.5).abs() < 1e-12)
            .expect("validated config contains the median")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.patch_len == 0 {
            return err("patch_len", "must be positive");
        }
        if self.stride != self.patch_len {
            return err("stride", "patches are non-overlapping: stride must equal patch_len");
        }
        if self.context_len == 0 || !self.context_len.is_multiple_of(self.patch_len) {
            return err("context_len", "must be a positive multiple of patch_len");
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return err("d_model", "widths must be positive");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err("n_heads", "must divide d_model");
        }
        if self.n_dec != 4 {
            return err("n_dec", "four decoder blocks are needed for the five probe taps");
        }
        if self.n_enc == 0 {
            return err("n_enc", "must be positive");
        }
        if self.horizon == 0 {
            return err("horizon", "must be positive");
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return err("quantiles", "must be strictly increasing inside (0, 1)");
        }
        if !self.quantiles.iter().any(|q| (*q - 0.5).abs() < 1e-12) {
            return err("quantiles", "must contain the median 0.5");
        }
        if self.decoder_tokens == 0 {
            return err("decoder_tokens", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0 && self.layer_norm_eps > 0.0) {
            return err("epsilon", "must be positive");
        }
        Ok(())
    }
}
