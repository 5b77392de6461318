use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Global L2 norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Scale `grads` by `min(1, tau / ||grads||)`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("clipping threshold must be > 0, got {tau}")));
    }
    let norm = global_norm(grads);
    if norm > tau {
        let scale = tau / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(scale));
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Coefficient of the `weight_decay * ||theta||^2` penalty; its gradient
    /// `2 * weight_decay * theta` is added before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &[Tensor]| p.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `params` in place.
    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::usage(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.check_same_shape(g)?;
            p.check_same_shape(m)?;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let grad = g.data()[i] + 2.0 * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clip_leaves_small_norm_alone() {
        let mut g = vec![Tensor::from_vec(vec![0.3, 0.4])];
        let before = g.clone();
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(g, before);
    }

    #[test]
    fn clip_scales_three_four() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        clip_gradients(&mut g, 1.0).unwrap();
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_rejects_nonpositive_tau() {
        let mut g = vec![Tensor::from_vec(vec![1.0])];
        assert!(matches!(clip_gradients(&mut g, 0.0), Err(Error::Config(_))));
        assert!(matches!(clip_gradients(&mut g, -1.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn clip_norm_is_min_of_norm_and_tau(seed in any::<u64>(), tau in 1e-3f64..10.0) {
            let mut rng = seeded(seed);
            let mut g: Vec<Tensor> = (0..3)
                .map(|i| Tensor::from_vec((0..(i + 2)).map(|_| rng.random_range(-3.0..3.0)).collect()))
                .collect();
            // independent oracle: recompute the norm by hand
            let pre: f64 = g.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
            clip_gradients(&mut g, tau).unwrap();
            let post: f64 = g.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((post - pre.min(tau)).abs() <= 1e-12);
            let once = g.clone();
            clip_gradients(&mut g, tau).unwrap();
            for (a, b) in once.iter().zip(&g) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn adam_zero_grad_no_decay_is_fixed_point() {
        let mut p = vec![Tensor::from_vec(vec![1.5, -2.0])];
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.0), &p);
        for _ in 0..3 {
            opt.adam_step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1 -> w -= 0.1 * 1 / (1 + 1e-8)
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.0), &p);
        opt.adam_step(&mut p, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_weight_decay_shrinks_toward_zero() {
        let mut p = vec![Tensor::from_vec(vec![0.8, -0.5])];
        let mut opt = OptimizerState::new(AdamConfig::new(0.01, 1e-4), &p);
        let mut prev = p[0].data().to_vec();
        for _ in 0..5 {
            opt.adam_step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
            for (now, before) in p[0].data().iter().zip(&prev) {
                assert!(now.abs() < before.abs());
            }
            prev = p[0].data().to_vec();
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.0), &p);
        assert!(opt.adam_step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.adam_step(&mut p, &[]).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
