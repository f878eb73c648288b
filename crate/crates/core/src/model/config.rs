use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters of the mini promptable segmenter.
///
/// The defaults are a ViT-Tiny–sized analog (64 px input, 8 px patches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_res: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of encoder transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub num_mask_tokens: usize,
    pub fourier_freqs: usize,
    pub fourier_scale: f64,
    pub mlp_ratio: usize,
    pub decoder_mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_res: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            num_mask_tokens: 3,
            fourier_freqs: 16,
            fourier_scale: 1.0,
            mlp_ratio: 4,
            decoder_mlp_ratio: 2,
            layer_norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the gradient-fidelity check: 32 px input,
    /// one encoder block.
    pub fn tiny() -> Self {
        Self {
            input_res: 32,
            depth: 1,
            ..Self::default()
        }
    }

    /// Patch-grid side `R / p`.
    pub fn grid(&self) -> usize {
        self.input_res / self.patch_size.max(1)
    }

    /// Output mask side `M = 4 · grid`.
    pub fn mask_side(&self) -> usize {
        4 * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    /// Collects every violated invariant into one config error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.patch_size == 0 || !self.input_res.is_multiple_of(self.patch_size) {
            bad.push(format!(
                "input_res ({}) must be divisible by patch_size ({})",
                self.input_res, self.patch_size
            ));
        } else if self.grid() < 2 {
            bad.push(format!("grid side input_res/patch_size = {} must be >= 2", self.grid()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            bad.push(format!(
                "embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if 4 * self.fourier_freqs != self.decoder_dim {
            bad.push(format!(
                "prompt embedding width 4*fourier_freqs ({}) must equal decoder_dim ({})",
                4 * self.fourier_freqs,
                self.decoder_dim
            ));
        }
        if self.decoder_dim != self.embed_dim {
            bad.push(format!(
                "decoder_dim ({}) must equal embed_dim ({})",
                self.decoder_dim, self.embed_dim
            ));
        }
        if !self.embed_dim.is_multiple_of(4) || self.embed_dim == 0 {
            bad.push(format!(
                "embed_dim ({}) must be a positive multiple of 4 for the upscaling path",
                self.embed_dim
            ));
        }
        if self.decoder_depth != 2 {
            bad.push(format!("decoder_depth is fixed at 2, got {}", self.decoder_depth));
        }
        if self.num_mask_tokens != 3 {
            bad.push(format!("num_mask_tokens is fixed at 3, got {}", self.num_mask_tokens));
        }
        if self.depth == 0 {
            bad.push("depth must be >= 1".into());
        }
        if self.mlp_ratio == 0 || self.decoder_mlp_ratio == 0 {
            bad.push("mlp ratios must be >= 1".into());
        }
        if !(self.fourier_scale.is_finite() && self.fourier_scale >= 0.0) {
            bad.push(format!("fourier_scale must be finite and >= 0, got {}", self.fourier_scale));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps >= 0.0) {
            bad.push(format!("layer_norm_eps must be finite and >= 0, got {}", self.layer_norm_eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
