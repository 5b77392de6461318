//! Central finite-difference oracle for analytic gradients.

use crate::error::Result;
use crate::nn::{Sequential, Tensor};

/// Perturbation for single-layer checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Perturbation for whole-pipeline checks. Roundoff through a dozen layers
/// dominates at `1e-5`; the fourth-order stencil keeps truncation negligible here.
pub const PIPELINE_STEP: f64 = 1e-3;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are compared absolutely instead of dividing roundoff by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries skipped because a perturbation flipped a ReLU.
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    fn merge(&mut self, other: GradCheckReport, tensor_offset: usize) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.map(|(t, i)| (t + tensor_offset, i));
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Element indices to probe in a tensor of `numel` entries: all of them, or
/// `limit` evenly strided ones.
fn probe_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(n) if n < numel => (0..n).map(|i| i * numel / n).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compare `analytic[t][i]` against the five-point central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` for every probed entry;
/// differencing first keeps a locally constant objective at exactly zero.
///
/// `eval` returns the scalar objective and the ReLU sign pattern of that
/// evaluation. An entry for which any evaluation within `±2h` changes the
/// pattern relative to the unperturbed one sits on a kink and is skipped.
pub fn check_gradients<F>(
    tensors: &mut [Tensor],
    analytic: &[Tensor],
    step: f64,
    per_tensor_limit: Option<usize>,
    tolerance: f64,
    mut eval: F,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> (f64, Vec<bool>),
{
    let (_, base_pattern) = eval(tensors);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
    };
    for t in 0..tensors.len() {
        for i in probe_indices(tensors[t].numel(), per_tensor_limit) {
            let original = tensors[t].data()[i];
            let mut values = [0.0; 4];
            let mut flipped = false;
            for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                tensors[t].data_mut()[i] = original + offset * step;
                let (value, pattern) = eval(tensors);
                values[slot] = value;
                flipped |= pattern != base_pattern;
            }
            tensors[t].data_mut()[i] = original;
            if flipped {
                report.skipped_kinks += 1;
                continue;
            }
            let [p2, p1, m1, m2] = values;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let err = relative_error(analytic[t].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, i));
            }
        }
    }
    report
}

/// Fixed, non-symmetric projection weights so the objective `sum(w * y)` has
/// no accidental cancellations.
pub fn projection_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect()
}

/// Finite-difference check of a [`Sequential`] under the objective
/// `sum(w * net(input))`, covering every parameter and the input itself.
pub fn finite_diff_check(
    net: &Sequential,
    params: &[Tensor],
    input: &Tensor,
    tolerance: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_at(net, params, input, DEFAULT_STEP, tolerance)
}

/// [`finite_diff_check`] with an explicit step, for deep stacks where roundoff
/// at [`DEFAULT_STEP`] swamps small gradient entries.
pub fn finite_diff_check_at(
    net: &Sequential,
    params: &[Tensor],
    input: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let weights = projection_weights(net.output_shape().iter().product());
    let (out, tape) = net.forward(params, input, true)?;
    let grad_out = Tensor::new(out.shape().to_vec(), weights.clone())?;
    let (param_grads, input_grad) = net.backward(params, &tape, &grad_out)?;

    let objective = |params: &[Tensor], input: &Tensor| -> (f64, Vec<bool>) {
        let (y, tape) = net.forward(params, input, true).expect("validated");
        let value = y.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        (value, net.relu_pattern(&tape))
    };

    let mut work = params.to_vec();
    let mut report = check_gradients(&mut work, &param_grads, step, None, tolerance, |p| {
        objective(p, input)
    });
    let mut x = vec![input.clone()];
    let input_report = check_gradients(&mut x, &[input_grad], step, None, tolerance, |x| {
        objective(params, &x[0])
    });
    report.merge(input_report, params.len());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvGeom, LayerSpec};
    use crate::rng::seeded;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(net: Sequential, seed: u64) -> GradCheckReport {
        let params = net.init_params(&mut seeded(seed));
        let x = random_input(net.input_shape(), seed + 100);
        finite_diff_check(&net, &params, &x, 1e-6).unwrap()
    }

    #[test]
    fn linear_model_is_nearly_exact() {
        let report = check(Sequential::new(&[5], vec![LayerSpec::dense(5, 3)]).unwrap(), 1);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 15 + 3 + 5);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let net = Sequential::new(&[2, 5, 5], vec![LayerSpec::Conv2d(ConvGeom::new(2, 3, 3, 2, 1))]).unwrap();
        let report = check(net, 2);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_transpose2d_matches_finite_differences() {
        let net = Sequential::new(
            &[3, 3, 3],
            vec![LayerSpec::ConvTranspose2d(ConvGeom::new(3, 2, 4, 2, 1))],
        )
        .unwrap();
        assert_eq!(net.output_shape(), &[2, 6, 6]);
        let report = check(net, 3);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn relu_and_sigmoid_chain() {
        let net = Sequential::new(
            &[6],
            vec![LayerSpec::dense(6, 8), LayerSpec::Relu, LayerSpec::dense(8, 4), LayerSpec::Sigmoid],
        )
        .unwrap();
        let report = check(net, 4);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn kinks_are_skipped() {
        // ReLU input exactly at zero: both perturbations flip the pattern.
        let net = Sequential::new(&[2], vec![LayerSpec::Relu]).unwrap();
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let report = finite_diff_check(&net, &[], &x, 1e-6).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut x = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let wrong = vec![Tensor::from_vec(vec![2.0, 5.0])];
        // f = x0^2 + x1^2, true gradient (2, 4)
        let report = check_gradients(&mut x, &wrong, DEFAULT_STEP, None, 1e-6, |t| {
            (t[0].sum_squares(), Vec::new())
        });
        assert!(!report.passed());
        assert_eq!(report.worst, Some((0, 1)));
    }

    #[test]
    fn probe_limit_strides() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(probe_indices(2, Some(5)), vec![0, 1]);
    }
}
