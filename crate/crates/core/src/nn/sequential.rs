use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Tensor};

/// A validated chain of layers with a fixed input shape.
///
/// Construction runs the full shape algebra, so a `Sequential` that exists can
/// only fail at runtime on a wrong input shape or parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

/// Intermediate activations recorded by [`Sequential::forward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    activations: Vec<Tensor>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        !self.activations.is_empty()
    }
}

impl Sequential {
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::LayerShape {
                layer: 0,
                msg: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        Ok(Self { layers, shapes })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("nonempty")
    }

    /// Shapes of every parameter tensor, in layer order (weight then bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn num_param_tensors(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count() * 2
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.num_param_tensors());
        for layer in self.layers.iter().filter(|l| l.has_params()) {
            let shapes = layer.param_shapes();
            let (fan_in, fan_out) = layer.fans();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = Tensor::zeros(&shapes[0]);
            for v in weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            out.push(weight);
            out.push(Tensor::zeros(&shapes[1]));
        }
        out
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (want, got)) in expected.iter().zip(params).enumerate() {
            if want.as_slice() != got.shape() {
                return Err(Error::usage(format!(
                    "parameter {i}: expected shape {want:?}, got {:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &[Tensor], input: &Tensor, record_tape: bool) -> Result<(Tensor, Tape)> {
        self.check_params(params)?;
        if input.shape() != self.input_shape() {
            return Err(Error::LayerShape {
                layer: 0,
                msg: format!(
                    "input shape {:?} does not match {:?}",
                    input.shape(),
                    self.input_shape()
                ),
            });
        }
        let mut tape = Tape::default();
        let mut current = input.clone();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let n = if layer.has_params() { 2 } else { 0 };
            let next = layer.forward(&params[offset..offset + n], &current, &self.shapes[i + 1]);
            offset += n;
            if record_tape {
                tape.activations.push(current);
            }
            current = next;
        }
        if record_tape {
            tape.activations.push(current.clone());
        }
        Ok((current, tape))
    }

    /// Returns `(param_grads, input_grad)`; `param_grads` aligns with `params`.
    pub fn backward(&self, params: &[Tensor], tape: &Tape, output_grad: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        if !tape.is_recorded() {
            return Err(Error::usage("backward called without a recorded tape"));
        }
        self.check_params(params)?;
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::usage("tape does not belong to this network"));
        }
        if output_grad.shape() != self.output_shape() {
            return Err(Error::usage(format!(
                "output gradient shape {:?} does not match {:?}",
                output_grad.shape(),
                self.output_shape()
            )));
        }
        let mut grads_rev: Vec<Tensor> = Vec::with_capacity(params.len());
        let mut grad = output_grad.clone();
        let mut offset = params.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let n = if layer.has_params() { 2 } else { 0 };
            offset -= n;
            let mut local = Vec::with_capacity(2);
            grad = layer.backward(
                &params[offset..offset + n],
                &tape.activations[i],
                &tape.activations[i + 1],
                &grad,
                &mut local,
            );
            // pushed as [weight, bias]; reversed below together with the layer order
            grads_rev.extend(local.into_iter().rev());
        }
        grads_rev.reverse();
        Ok((grads_rev, grad))
    }

    /// Sign pattern of every ReLU input on the tape; used to skip kink crossings.
    pub fn relu_pattern(&self, tape: &Tape) -> Vec<bool> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .flat_map(|(i, _)| tape.activations[i].data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvGeom;
    use crate::rng::seeded;

    #[test]
    fn dense_zero_map() {
        let net = Sequential::new(&[4], vec![LayerSpec::dense(4, 2)]).unwrap();
        let params = vec![Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])];
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let (y, tape) = net.forward(&params, &x, false).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        assert!(!tape.is_recorded());
    }

    #[test]
    fn relu_forward() {
        let net = Sequential::new(&[3], vec![LayerSpec::Relu]).unwrap();
        let (y, _) = net.forward(&[], &Tensor::from_vec(vec![-1.0, 0.0, 2.5]), false).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn large_preset_encoder_halves_to_eight() {
        let conv = |i, o| LayerSpec::Conv2d(ConvGeom::new(i, o, 3, 2, 1));
        let first = Sequential::new(&[3, 64, 64], vec![conv(3, 32)]).unwrap();
        assert_eq!(first.output_shape(), &[32, 32, 32]);
        let chain = Sequential::new(
            &[3, 64, 64],
            vec![conv(3, 32), LayerSpec::Relu, conv(32, 64), LayerSpec::Relu, conv(64, 128)],
        )
        .unwrap();
        assert_eq!(chain.output_shape(), &[128, 8, 8]);
    }

    #[test]
    fn transposed_conv_doubles() {
        let up = LayerSpec::ConvTranspose2d(ConvGeom::new(128, 64, 4, 2, 1));
        let net = Sequential::new(&[128, 8, 8], vec![up]).unwrap();
        assert_eq!(net.output_shape(), &[64, 16, 16]);
    }

    #[test]
    fn bad_chain_names_layer() {
        let err = Sequential::new(
            &[3, 8, 8],
            vec![LayerSpec::Relu, LayerSpec::Conv2d(ConvGeom::new(4, 8, 3, 2, 1))],
        )
        .unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 1, .. }), "{err}");
        let err = Sequential::new(&[3], vec![LayerSpec::dense(3, 2), LayerSpec::dense(3, 1)]).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 1, .. }));
        let err = Sequential::new(&[3, 8, 8], vec![LayerSpec::Conv2d(ConvGeom::new(3, 8, 3, 0, 1))]).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, .. }));
        assert!(Sequential::new(&[3], vec![LayerSpec::dense(3, 0)]).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = Sequential::new(&[4], vec![LayerSpec::dense(4, 2)]).unwrap();
        let params = net.init_params(&mut seeded(0));
        assert!(net.forward(&params, &Tensor::zeros(&[5]), false).is_err());
        assert!(net.forward(&params[..1], &Tensor::zeros(&[4]), false).is_err());
    }

    #[test]
    fn dense_linear_gradients() {
        let net = Sequential::new(&[3], vec![LayerSpec::dense(3, 2)]).unwrap();
        let params = net.init_params(&mut seeded(1));
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let (y, tape) = net.forward(&params, &x, true).unwrap();
        // loss = sum(y)
        let (grads, gx) = net.backward(&params, &tape, &Tensor::filled(y.shape(), 1.0)).unwrap();
        assert_eq!(grads[1].data(), &[1.0, 1.0]);
        assert_eq!(grads[0].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let w = params[0].data();
        let expect: Vec<f64> = (0..3).map(|i| w[i] + w[3 + i]).collect();
        assert_eq!(gx.data(), expect.as_slice());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let net = Sequential::new(&[3], vec![LayerSpec::Relu]).unwrap();
        let (_, tape) = net.forward(&[], &Tensor::from_vec(vec![-1.0, 0.0, 1.0]), true).unwrap();
        let (_, gx) = net.backward(&[], &tape, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_without_tape_is_usage_error() {
        let net = Sequential::new(&[2], vec![LayerSpec::Relu]).unwrap();
        let (_, tape) = net.forward(&[], &Tensor::zeros(&[2]), false).unwrap();
        let err = net.backward(&[], &tape, &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let net = Sequential::new(&[10], vec![LayerSpec::dense(10, 6)]).unwrap();
        let a = net.init_params(&mut seeded(5));
        let b = net.init_params(&mut seeded(5));
        assert_eq!(a, b);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a[0].data().iter().all(|v| v.abs() < bound));
        assert!(a[1].data().iter().all(|&v| v == 0.0));
    }
}
