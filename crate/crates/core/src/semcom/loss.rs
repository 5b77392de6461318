use crate::error::Result;
use crate::metrics::mean_squared;
use crate::nn::Tensor;

/// `alpha * mean((x - x_hat)^2) + (1 - alpha) * mean(|x - x_hat|)`.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor, alpha: f64) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let l2 = mean_squared(x.data(), x_hat.data());
    let l1 = mean_abs(x.data(), x_hat.data());
    Ok(alpha * l2 + (1.0 - alpha) * l1)
}

/// Loss value and its gradient with respect to `x_hat`. `sign(0) = 0`.
pub fn reconstruction_loss_grad(x: &Tensor, x_hat: &Tensor, alpha: f64) -> Result<(f64, Tensor)> {
    let loss = reconstruction_loss(x, x_hat, alpha)?;
    let n = x.numel() as f64;
    let grad = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = b - a;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (alpha * 2.0 * d + (1.0 - alpha) * sign) / n
        })
        .collect();
    Ok((loss, Tensor::new(x.shape().to_vec(), grad)?))
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mse;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identical_is_zero() {
        let x = Tensor::from_vec(vec![0.1, 0.5, 0.9]);
        assert_eq!(reconstruction_loss(&x, &x, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn constant_half_offset() {
        let x = Tensor::from_vec(vec![0.0; 4]);
        let y = Tensor::from_vec(vec![0.5; 4]);
        let l = reconstruction_loss(&x, &y, 0.8).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Tensor::from_vec(vec![0.0; 4]);
        let y = Tensor::from_vec(vec![0.0; 3]);
        assert!(reconstruction_loss(&x, &y, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn alpha_one_is_mse_and_loss_is_positive(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = seeded(seed);
            let x = Tensor::from_vec((0..12).map(|_| rng.random::<f64>()).collect());
            let y = Tensor::from_vec((0..12).map(|_| rng.random::<f64>()).collect());
            prop_assert_eq!(reconstruction_loss(&x, &y, 1.0).unwrap(), mse(&x, &y).unwrap());
            prop_assert!(reconstruction_loss(&x, &y, alpha).unwrap() > 0.0);
        }

        #[test]
        fn gradient_matches_central_difference(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = seeded(seed);
            let x = Tensor::from_vec((0..6).map(|_| rng.random::<f64>()).collect());
            let y = Tensor::from_vec((0..6).map(|_| rng.random::<f64>()).collect());
            let (_, g) = reconstruction_loss_grad(&x, &y, alpha).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut p = y.clone();
                p.data_mut()[i] += h;
                let mut m = y.clone();
                m.data_mut()[i] -= h;
                let fd = (reconstruction_loss(&x, &p, alpha).unwrap()
                    - reconstruction_loss(&x, &m, alpha).unwrap()) / (2.0 * h);
                prop_assert!((fd - g.data()[i]).abs() < 1e-7);
            }
        }
    }
}
