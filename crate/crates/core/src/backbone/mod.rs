//! Desk-scale denoising network and everything needed to train it.
//!
//! The network is a small U-Net over pixel-space latents with sinusoidal
//! timestep conditioning and self-/cross-attention at configurable token
//! grids. Every attention call is routed through an [`AttentionHook`], which
//! is how the editing processors take over.

pub mod checkpoint;
pub mod dataset;
pub mod layers;
pub mod schedule;
pub mod text;
pub mod train;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::tensor::{Fmap, Mat};

pub use schedule::NoiseSchedule;
pub use text::ConditionEmbedding;
pub use unet::{Denoiser, NetCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Square working resolution in pixels.
    pub resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of U-Net levels after the 2× space-to-depth stem.
    pub levels: usize,
    /// Token-grid sides hosting self- and cross-attention.
    pub attention_grids: Vec<usize>,
    pub embed_dim: usize,
    pub cond_dim: usize,
    /// Token count of a condition embedding.
    pub cond_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            in_channels: 3,
            base_channels: 32,
            levels: 3,
            attention_grids: vec![16, 8],
            embed_dim: 64,
            cond_dim: 32,
            cond_len: 8,
            vocab_size: 1024,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Network small enough for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            in_channels: 3,
            base_channels: 2,
            levels: 3,
            attention_grids: vec![2],
            embed_dim: 8,
            cond_dim: 4,
            cond_len: 3,
            vocab_size: 16,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("levels, channels must be positive"));
        }
        let div = 1usize << self.levels;
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(Error::invalid(format!(
                "resolution {} must be divisible by {div}",
                self.resolution
            )));
        }
        let grids = self.level_grids();
        if let Some(g) = self.attention_grids.iter().find(|g| !grids.contains(g)) {
            return Err(Error::invalid(format!("attention grid {g} is not produced by the level structure {grids:?}")));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::invalid("embed_dim must be even"));
        }
        if self.cond_len == 0 || self.vocab_size < 2 {
            return Err(Error::invalid("cond_len and vocab_size too small"));
        }
        Ok(())
    }

    /// Grid side of each level (level 0 is the finest).
    pub fn level_grids(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.resolution / (2 << i)).collect()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            self.base_channels * 2
        }
    }
}

/// Where an attention layer sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerInfo {
    pub id: usize,
    /// `(rows, cols)` of the token grid.
    pub grid: (usize, usize),
    pub decoder: bool,
}

/// Keys and values projected from one condition embedding.
#[derive(Debug, Clone, Copy)]
pub struct KvPair<'a> {
    pub k: &'a Mat,
    pub v: &'a Mat,
}

/// Attention processor consulted by every attention layer of a forward pass.
///
/// `q`, `k`, `v` are projected token matrices (one token per row); the
/// returned features go through the layer's output projection.
pub trait AttentionHook {
    fn self_attention(&mut self, layer: &LayerInfo, q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
        let _ = layer;
        crate::attention::plain_attention(q, k, v)
    }

    /// `cond` holds the projections of the branch's condition; `null` those
    /// of the null embedding (identical to `cond` on the unconditional branch).
    fn cross_attention(&mut self, layer: &LayerInfo, q: &Mat, cond: KvPair<'_>, null: KvPair<'_>) -> Result<Mat> {
        let _ = (layer, null);
        crate::attention::plain_attention(q, cond.k, cond.v)
    }
}

/// No registered processor: plain attention everywhere.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainAttention;

impl AttentionHook for PlainAttention {}

/// Maps images to the latents the denoiser operates on.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, img: &ImageBuffer) -> Fmap;
    fn decode(&self, latent: &Fmap) -> Result<ImageBuffer>;
}

/// Pixel-space latents: the latent is the image itself in channel-major
/// order, so decode(encode(x)) == x exactly.
#[derive(Debug, Default, Clone, Copy)]
pub struct PixelCodec;

impl LatentCodec for PixelCodec {
    fn encode(&self, img: &ImageBuffer) -> Fmap {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut out = Fmap::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.data[(ch * h + y) * w + x] = img.get(y, x, ch);
                }
            }
        }
        out
    }

    fn decode(&self, latent: &Fmap) -> Result<ImageBuffer> {
        let (c, h, w) = (latent.c, latent.h, latent.w);
        let mut data = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = latent.data[(ch * h + y) * w + x];
                }
            }
        }
        ImageBuffer::from_unclamped(h, w, c, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        assert_eq!(c.level_grids(), vec![32, 16, 8]);
        DenoiserConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_unreachable_grid() {
        let c = DenoiserConfig {
            attention_grids: vec![12],
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
        let c = DenoiserConfig {
            resolution: 60,
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pixel_codec_round_trip_is_exact() {
        let img = ImageBuffer::from_fn(4, 5, |y, x| [y as f32 / 3.0, x as f32 / 7.0, 0.123]);
        let lat = PixelCodec.encode(&img);
        assert_eq!((lat.c, lat.h, lat.w), (3, 4, 5));
        assert_eq!(PixelCodec.decode(&lat).unwrap(), img);
    }
}
