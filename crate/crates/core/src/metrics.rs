//! Reconstruction-quality, fairness and efficiency metrics.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// PSNR reported when the MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-element mean of squared differences. Shared by [`mse`] and the
/// reconstruction loss so that `loss(alpha = 1) == mse` holds bit-for-bit.
pub(crate) fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared error over all elements of two equally shaped tensors.
pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    Ok(mean_squared(x.data(), x_hat.data()))
}

/// MSE over a batch of image pairs: the sum of squared errors divided by the
/// total element count `N * C * H * W`.
pub fn batch_mse(x: &[Tensor], x_hat: &[Tensor]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::usage(format!(
            "batch_mse needs equal nonempty batches, got {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in x.iter().zip(x_hat) {
        a.check_same_shape(b)?;
        sum += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        count += a.numel();
    }
    Ok(sum / count as f64)
}

/// `10 * log10(1 / mse)` for unit-range pixels, capped at [`PSNR_CAP_DB`].
pub fn psnr(mse_value: f64) -> Result<f64> {
    if mse_value < 0.0 || mse_value.is_nan() {
        return Err(Error::usage(format!("MSE must be >= 0, got {mse_value}")));
    }
    if mse_value == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse_value.log10()).min(PSNR_CAP_DB))
}

/// Gini coefficient of nonnegative values:
/// `G = (2 * sum(i * v_(i)) - (K + 1) * sum(v)) / (K * sum(v))` with `v_(i)` sorted
/// ascending and `i` 1-based. All-zero (or all-equal) input gives 0.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("gini of an empty list"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::usage(format!("gini needs finite values >= 0, got {v}")));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let ranked: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1) as f64 * v)
        .sum();
    // One division at the end: integer-valued inputs give exactly rounded results.
    let g = (2.0 * ranked - (k + 1.0) * total) / (k * total);
    Ok(g.clamp(0.0, (k - 1.0) / k))
}

/// `(G_part, G_effort)`: Gini over participation counts and over cumulative
/// training steps (dataset size x epochs, summed over rounds).
pub fn participation_and_effort_gini(participation: &[u64], cumulative_steps: &[u64]) -> Result<(f64, f64)> {
    let part: Vec<f64> = participation.iter().map(|&n| n as f64).collect();
    let effort: Vec<f64> = cumulative_steps.iter().map(|&s| s as f64).collect();
    Ok((gini(&part)?, gini(&effort)?))
}

/// PSNR per 1000 training steps.
pub fn efficiency(psnr_db: f64, cumulative_steps: u64) -> Result<f64> {
    if cumulative_steps == 0 {
        return Err(Error::usage("efficiency needs at least one training step"));
    }
    Ok(psnr_db / (cumulative_steps as f64 / 1000.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mse_basics() {
        let x = Tensor::from_vec(vec![0.2, 0.4, 0.6]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let y = Tensor::from_vec(vec![0.3, 0.5, 0.7]);
        assert!((mse(&x, &y).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&x, &Tensor::from_vec(vec![0.0; 2])).is_err());
    }

    #[test]
    fn batch_mse_matches_reference_loop() {
        let mut rng = seeded(21);
        let make = |rng: &mut crate::rng::Rng| {
            Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.random::<f64>()).collect()).unwrap()
        };
        let xs: Vec<Tensor> = (0..5).map(|_| make(&mut rng)).collect();
        let ys: Vec<Tensor> = (0..5).map(|_| make(&mut rng)).collect();
        let mut acc = 0.0;
        for n in 0..5 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..4 {
                        let i = (c * 4 + h) * 4 + w;
                        let d = xs[n].data()[i] - ys[n].data()[i];
                        acc += d * d;
                    }
                }
            }
        }
        let reference = acc / (5.0 * 48.0);
        assert!((batch_mse(&xs, &ys).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(0.01).unwrap(), 20.0);
        assert_eq!(psnr(0.001).unwrap(), 30.0);
        assert_eq!(psnr(0.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(-1e-3).is_err());
        assert!(psnr(0.02).unwrap() < psnr(0.01).unwrap());
    }

    #[test]
    fn gini_reference_values() {
        assert_eq!(gini(&[3.0; 7]).unwrap(), 0.0);
        assert_eq!(gini(&[0.0; 4]).unwrap(), 0.0);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 5.0;
        assert_eq!(gini(&one_hot).unwrap(), 0.9);
        assert_eq!(gini(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.25);
        assert_eq!(gini(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 0.25);
        assert!(gini(&[1.0, -1.0]).is_err());
        assert!(gini(&[]).is_err());
    }

    #[test]
    fn single_selected_client_participation_gini() {
        let (gp, ge) = participation_and_effort_gini(&[1, 0, 0, 0], &[40, 0, 0, 0]).unwrap();
        assert!((gp - 0.75).abs() < 1e-15);
        assert!((ge - 0.75).abs() < 1e-15);
    }

    #[test]
    fn efficiency_values() {
        assert!((efficiency(30.0, 10_000).unwrap() - 3.0).abs() < 1e-15);
        assert!((efficiency(30.0, 5_000).unwrap() - 6.0).abs() < 1e-15);
        assert!(efficiency(30.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn gini_bounded_and_scale_invariant(v in prop::collection::vec(0.0f64..100.0, 1..12), c in 1e-3f64..1e3) {
            let k = v.len() as f64;
            let g = gini(&v).unwrap();
            prop_assert!(g >= 0.0 && g <= (k - 1.0) / k);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((gini(&scaled).unwrap() - g).abs() <= 1e-12);
        }

        #[test]
        fn psnr_strictly_decreasing(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr(a).unwrap() > psnr(b).unwrap());
        }
    }
}
