//! Semantic-communication pipeline: semantic encoder with skip connections,
//! channel encoder, Rayleigh + AWGN channel, zero-forcing equalization,
//! channel decoder and semantic decoder.
//!
//! The skip tensors `s1`, `s2` travel from encoder to decoder directly and are
//! never passed through the simulated channel.

mod channel;
mod loss;
mod model;

pub use channel::{apply_channel, noise_variance, zf_equalize, ChannelDraw};
pub use loss::{reconstruction_loss, reconstruction_loss_grad};
pub use model::{PipelineTape, SemComModel, Skips};

use crate::error::{Error, Result};

/// Default zero-forcing stabilizer, added to the real part of each fading coefficient.
pub const DEFAULT_EPS_ZF: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SemComConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the three stride-2 encoder convolutions.
    pub encoder_channels: [usize; 3],
    /// Semantic bottleneck width `d_s`.
    pub semantic_dim: usize,
    /// Number of real channel symbols `d_c`; pairs form complex symbols.
    pub channel_dim: usize,
    pub snr_db: f64,
    /// Weight of the squared-error term in the reconstruction loss.
    pub alpha_loss: f64,
    pub eps_zf: f64,
    pub noise_enabled: bool,
    pub fading_enabled: bool,
    pub normalize_power: bool,
}

impl SemComConfig {
    /// 64x64x3 images, channels 3 -> 32 -> 64 -> 128, 256-dim bottleneck, 32 symbols.
    pub fn paper_scale() -> Self {
        Self {
            channels: 3,
            height: 64,
            width: 64,
            encoder_channels: [32, 64, 128],
            semantic_dim: 256,
            channel_dim: 32,
            snr_db: 10.0,
            alpha_loss: 0.8,
            eps_zf: DEFAULT_EPS_ZF,
            noise_enabled: true,
            fading_enabled: true,
            normalize_power: false,
        }
    }

    /// 16x16x3 images, channels 3 -> 8 -> 16 -> 32, 64-dim bottleneck, 8 symbols.
    pub fn desk_scale() -> Self {
        Self {
            height: 16,
            width: 16,
            encoder_channels: [8, 16, 32],
            semantic_dim: 64,
            channel_dim: 8,
            ..Self::paper_scale()
        }
    }

    /// Noise-free, fading-free channel (`h = 1`, `n = 0`).
    pub fn without_channel(mut self) -> Self {
        self.noise_enabled = false;
        self.fading_enabled = false;
        self
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `d_s / d_c`.
    pub fn compression_ratio(&self) -> f64 {
        self.semantic_dim as f64 / self.channel_dim as f64
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }

    /// Hidden widths of the channel encoder, geometric between `d_s` and `d_c`
    /// (256 -> 128 -> 64 -> 32 in the `paper-scale` preset). The decoder mirrors them.
    pub fn channel_hidden(&self) -> [usize; 2] {
        let ratio = self.channel_dim as f64 / self.semantic_dim as f64;
        let width = |i: i32| {
            ((self.semantic_dim as f64 * ratio.powf(i as f64 / 3.0)).round() as usize).max(1)
        };
        [width(1), width(2)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be >= 1".into());
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!(
                "image height and width must be multiples of 8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder channels must be >= 1".into());
        }
        if !self.channel_dim.is_multiple_of(2) {
            return bad(format!("d_c must be even, got {}", self.channel_dim));
        }
        if !(self.channel_dim > 0 && self.channel_dim < self.semantic_dim) {
            return bad(format!(
                "need 0 < d_c < d_s, got d_c = {}, d_s = {}",
                self.channel_dim, self.semantic_dim
            ));
        }
        if self.semantic_dim >= self.image_numel() {
            return bad(format!(
                "need d_s < C*H*W = {}, got d_s = {}",
                self.image_numel(),
                self.semantic_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_loss) {
            return bad(format!("alpha_loss must be in [0, 1], got {}", self.alpha_loss));
        }
        if !(self.eps_zf >= 0.0 && self.eps_zf.is_finite()) {
            return bad(format!("eps_zf must be finite and >= 0, got {}", self.eps_zf));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        Ok(())
    }
}
