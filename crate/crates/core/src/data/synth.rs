use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Class-structured synthetic images: each class has a smooth base pattern,
/// each image shifts it by a few pixels, adjusts brightness and adds noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl SynthSpec {
    pub fn desk_scale() -> Self {
        Self {
            classes: 4,
            per_class: 100,
            channels: 3,
            height: 16,
            width: 16,
            noise: 0.03,
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

/// Deterministic in `rng`. Images are ordered class by class.
pub fn synth_corpus<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Corpus> {
    if spec.classes == 0 || spec.per_class == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config("synthetic corpus dimensions must all be >= 1"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("synthetic noise must be >= 0"));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let tau = std::f64::consts::TAU;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.classes {
        let base: Vec<(f64, Vec<Wave>)> = (0..c)
            .map(|_| {
                let offset = rng.random_range(0.3..0.7);
                let waves = (0..2)
                    .map(|_| Wave {
                        fy: rng.random_range(0.5..2.5) / h as f64,
                        fx: rng.random_range(0.5..2.5) / w as f64,
                        phase: rng.random_range(0.0..tau),
                        amp: rng.random_range(0.1..0.2),
                    })
                    .collect();
                (offset, waves)
            })
            .collect();
        for _ in 0..spec.per_class {
            let dy = rng.random_range(-2.0..2.0);
            let dx = rng.random_range(-2.0..2.0);
            let brightness = rng.random_range(-0.08..0.08);
            let mut data = Vec::with_capacity(c * h * w);
            for (offset, waves) in &base {
                for y in 0..h {
                    for x in 0..w {
                        let (yy, xx) = (y as f64 + dy, x as f64 + dx);
                        let mut v = offset + brightness;
                        for wave in waves {
                            v += wave.amp * (tau * (wave.fy * yy + wave.fx * xx) + wave.phase).sin();
                        }
                        v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            images.push(Tensor::new(vec![c, h, w], data)?);
            labels.push(class);
        }
    }
    Corpus::new(images, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn deterministic_and_labeled() {
        let spec = SynthSpec {
            per_class: 5,
            ..SynthSpec::desk_scale()
        };
        let a = synth_corpus(&spec, &mut seeded(1)).unwrap();
        let b = synth_corpus(&spec, &mut seeded(1)).unwrap();
        let c = synth_corpus(&spec, &mut seeded(2)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.len(), 20);
        assert_eq!(a.image_shape(), &[3, 16, 16]);
        assert_eq!(&a.labels().unwrap()[..6], &[0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn classes_differ_more_than_members() {
        let spec = SynthSpec {
            per_class: 4,
            ..SynthSpec::desk_scale()
        };
        let corpus = synth_corpus(&spec, &mut seeded(3)).unwrap();
        let dist = |a: usize, b: usize| crate::metrics::mse(corpus.image(a), corpus.image(b)).unwrap();
        let within = (dist(0, 1) + dist(4, 5) + dist(8, 9)) / 3.0;
        let across = (dist(0, 4) + dist(4, 8) + dist(8, 12)) / 3.0;
        assert!(across > within, "across {across} within {within}");
    }
}
