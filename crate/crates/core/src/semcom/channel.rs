use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::semcom::SemComConfig;

/// `sigma^2 = 10^(-snr_db / 10)`.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One realization of the channel for `d_c / 2` complex symbols, stored as
/// interleaved `(re, im)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub fading: Vec<f64>,
    pub noise: Vec<f64>,
}

impl ChannelDraw {
    /// `h = 1 + 0j`, `n = 0` for every symbol.
    pub fn identity(channel_dim: usize) -> Self {
        let mut fading = vec![0.0; channel_dim];
        fading.iter_mut().step_by(2).for_each(|v| *v = 1.0);
        Self {
            fading,
            noise: vec![0.0; channel_dim],
        }
    }

    /// `h_i ~ CN(0, 1)` when fading is enabled, `n_i ~ CN(0, sigma^2)` when
    /// noise is enabled. Disabled parts consume no randomness.
    pub fn sample<R: Rng + ?Sized>(cfg: &SemComConfig, rng: &mut R) -> Self {
        let mut draw = Self::identity(cfg.channel_dim);
        if cfg.fading_enabled {
            let sd = 0.5f64.sqrt();
            for v in draw.fading.iter_mut() {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if cfg.noise_enabled {
            let sd = (cfg.noise_variance() / 2.0).sqrt();
            for v in draw.noise.iter_mut() {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        draw
    }

    pub fn symbols(&self) -> usize {
        self.fading.len() / 2
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if !x.numel().is_multiple_of(2) {
            return Err(Error::config(format!(
                "channel input has odd length {}",
                x.numel()
            )));
        }
        if x.numel() != self.fading.len() || x.numel() != self.noise.len() {
            return Err(Error::usage(format!(
                "channel draw sized for {} reals, input has {}",
                self.fading.len(),
                x.numel()
            )));
        }
        Ok(())
    }

    /// `h_i / (h_i + eps)` per symbol: the end-to-end gain seen by `x` after equalization.
    pub(crate) fn equalized_gain(&self, eps_zf: f64) -> Vec<(f64, f64)> {
        self.fading
            .chunks_exact(2)
            .map(|h| complex_div((h[0], h[1]), (h[0] + eps_zf, h[1])))
            .collect()
    }
}

fn complex_mul((a, b): (f64, f64), (c, d): (f64, f64)) -> (f64, f64) {
    (a * c - b * d, a * d + b * c)
}

fn complex_div((a, b): (f64, f64), (c, d): (f64, f64)) -> (f64, f64) {
    let den = (c * c + d * d).max(f64::MIN_POSITIVE);
    ((a * c + b * d) / den, (b * c - a * d) / den)
}

/// `y = h * x + n` on complex symbols formed from adjacent real pairs.
pub fn apply_channel(x: &Tensor, draw: &ChannelDraw) -> Result<Tensor> {
    draw.check(x)?;
    let mut out = Vec::with_capacity(x.numel());
    for ((xs, h), n) in x
        .data()
        .chunks_exact(2)
        .zip(draw.fading.chunks_exact(2))
        .zip(draw.noise.chunks_exact(2))
    {
        let (re, im) = complex_mul((h[0], h[1]), (xs[0], xs[1]));
        out.push(re + n[0]);
        out.push(im + n[1]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Zero-forcing: `x_hat = y / (h + eps_zf)`, with `eps_zf` added to the real part of `h`.
///
/// Near-zero fading makes the output blow up as `|y| / |h|`; this is kept
/// as-is, only an exactly-zero denominator is clamped.
pub fn zf_equalize(y: &Tensor, draw: &ChannelDraw, eps_zf: f64) -> Result<Tensor> {
    draw.check(y)?;
    let mut out = Vec::with_capacity(y.numel());
    for (ys, h) in y.data().chunks_exact(2).zip(draw.fading.chunks_exact(2)) {
        let (re, im) = complex_div((ys[0], ys[1]), (h[0] + eps_zf, h[1]));
        out.push(re);
        out.push(im);
    }
    Tensor::new(y.shape().to_vec(), out)
}
