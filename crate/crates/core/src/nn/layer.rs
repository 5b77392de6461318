use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Geometry shared by `Conv2d` and `ConvTranspose2d`. Kernels are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// `y = W x + b`; the input is flattened, so any shape with `in_features` elements is accepted.
    Dense { in_features: usize, out_features: usize },
    /// Input `[C, H, W]`, weight `[out, in, k, k]`.
    Conv2d(ConvGeom),
    /// Input `[C, H, W]`, weight `[in, out, k, k]`; output side is `(H - 1) * s - 2p + k`.
    ConvTranspose2d(ConvGeom),
    Relu,
    Sigmoid,
    /// Parameter-free view change.
    Reshape(Vec<usize>),
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d(_) | LayerSpec::ConvTranspose2d(_)
        )
    }

    /// Weight and bias shapes, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![*out_features, *in_features], vec![*out_features]],
            LayerSpec::Conv2d(g) => vec![
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                vec![g.out_channels],
            ],
            LayerSpec::ConvTranspose2d(g) => vec![
                vec![g.in_channels, g.out_channels, g.kernel, g.kernel],
                vec![g.out_channels],
            ],
            _ => Vec::new(),
        }
    }

    /// `(fan_in, fan_out)` of the weight, used by the uniform initializer.
    pub(crate) fn fans(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (*in_features, *out_features),
            LayerSpec::Conv2d(g) | LayerSpec::ConvTranspose2d(g) => {
                let area = g.kernel * g.kernel;
                (g.in_channels * area, g.out_channels * area)
            }
            _ => (0, 0),
        }
    }

    /// Static shape algebra. `index` only feeds error messages.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Error::LayerShape { layer: index, msg };
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(err("dense widths must be >= 1".into()));
                }
                let numel: usize = input.iter().product();
                if numel != *in_features {
                    return Err(err(format!(
                        "dense expects {in_features} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv2d(g) | LayerSpec::ConvTranspose2d(g) => {
                if g.kernel == 0 || g.stride == 0 || g.in_channels == 0 || g.out_channels == 0 {
                    return Err(err("conv needs kernel, stride and channels >= 1".into()));
                }
                if input.len() != 3 || input[0] != g.in_channels {
                    return Err(err(format!(
                        "conv expects [{}, H, W], got {input:?}",
                        g.in_channels
                    )));
                }
                let (h, w) = (input[1], input[2]);
                let (oh, ow) = if matches!(self, LayerSpec::Conv2d(_)) {
                    if h + 2 * g.padding < g.kernel || w + 2 * g.padding < g.kernel {
                        return Err(err(format!("kernel {} larger than padded input", g.kernel)));
                    }
                    (
                        (h + 2 * g.padding - g.kernel) / g.stride + 1,
                        (w + 2 * g.padding - g.kernel) / g.stride + 1,
                    )
                } else {
                    let full_h = (h - 1) * g.stride + g.kernel;
                    let full_w = (w - 1) * g.stride + g.kernel;
                    if full_h <= 2 * g.padding || full_w <= 2 * g.padding {
                        return Err(err("transposed conv padding consumes the output".into()));
                    }
                    (full_h - 2 * g.padding, full_w - 2 * g.padding)
                };
                Ok(vec![g.out_channels, oh, ow])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Reshape(shape) => {
                let from: usize = input.iter().product();
                let to: usize = shape.iter().product();
                if from != to || shape.contains(&0) {
                    return Err(err(format!("cannot reshape {input:?} into {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Forward pass of one layer. `params` holds `[weight, bias]` for parametric layers.
    pub(crate) fn forward(&self, params: &[Tensor], input: &Tensor, out_shape: &[usize]) -> Tensor {
        match self {
            LayerSpec::Dense { .. } => dense_forward(&params[0], &params[1], input),
            LayerSpec::Conv2d(g) => conv2d_forward(g, &params[0], &params[1], input, out_shape),
            LayerSpec::ConvTranspose2d(g) => {
                conv_transpose2d_forward(g, &params[0], &params[1], input, out_shape)
            }
            LayerSpec::Relu => map(input, |v| if v > 0.0 { v } else { 0.0 }),
            LayerSpec::Sigmoid => map(input, sigmoid),
            LayerSpec::Reshape(shape) => input.clone().reshape(shape).expect("validated"),
        }
    }

    /// Returns the input gradient and pushes parameter gradients (weight, bias) into `param_grads`.
    pub(crate) fn backward(
        &self,
        params: &[Tensor],
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
        param_grads: &mut Vec<Tensor>,
    ) -> Tensor {
        match self {
            LayerSpec::Dense { .. } => dense_backward(&params[0], input, grad_out, param_grads),
            LayerSpec::Conv2d(g) => conv2d_backward(g, &params[0], input, grad_out, param_grads),
            LayerSpec::ConvTranspose2d(g) => {
                conv_transpose2d_backward(g, &params[0], input, grad_out, param_grads)
            }
            // Subgradient 0 at the kink.
            LayerSpec::Relu => zip_map(input, grad_out, |x, g| if x > 0.0 { g } else { 0.0 }),
            LayerSpec::Sigmoid => zip_map(output, grad_out, |y, g| g * y * (1.0 - y)),
            LayerSpec::Reshape(_) => grad_out
                .clone()
                .reshape(input.shape())
                .expect("validated"),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn dense_forward(weight: &Tensor, bias: &Tensor, input: &Tensor) -> Tensor {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let x = input.data();
    let out = (0..out_f)
        .map(|o| {
            let row = &w[o * in_f..(o + 1) * in_f];
            bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_vec(out)
}

fn dense_backward(weight: &Tensor, input: &Tensor, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Tensor {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let x = input.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; out_f * in_f];
    let mut gx = vec![0.0; in_f];
    for o in 0..out_f {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        let row = &w[o * in_f..(o + 1) * in_f];
        let grow = &mut gw[o * in_f..(o + 1) * in_f];
        for i in 0..in_f {
            grow[i] = go * x[i];
            gx[i] += go * row[i];
        }
    }
    grads.push(Tensor::new(vec![out_f, in_f], gw).expect("shape"));
    grads.push(Tensor::from_vec(g.to_vec()));
    Tensor::new(input.shape().to_vec(), gx).expect("shape")
}

/// Visits every `(output offset, input offset)` pair touched by kernel tap `(ky, kx)`,
/// for a conv with output spatial size `(oh, ow)` over input `(h, w)`.
#[inline]
fn for_each_tap(
    g: &ConvGeom,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize),
) {
    for y in 0..oh {
        let iy = (y * g.stride + ky) as isize - g.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let iy = iy as usize;
        for x in 0..ow {
            let ix = (x * g.stride + kx) as isize - g.padding as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            f(y * ow + x, iy * w + ix as usize);
        }
    }
}

fn conv2d_forward(g: &ConvGeom, weight: &Tensor, bias: &Tensor, input: &Tensor, out_shape: &[usize]) -> Tensor {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = g.kernel;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias.data()[o]);
        for c in 0..g.in_channels {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((o * g.in_channels + c) * k + ky) * k + kx];
                    for_each_tap(g, (h, w), (oh, ow), ky, kx, |po, pi| plane[po] += wv * xin[pi]);
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

fn conv2d_backward(g: &ConvGeom, weight: &Tensor, input: &Tensor, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Tensor {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let k = g.kernel;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.out_channels];
    let mut gx = vec![0.0; x.len()];
    for o in 0..g.out_channels {
        let gplane = &go[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = gplane.iter().sum();
        for c in 0..g.in_channels {
            let xin = &x[c * h * w..(c + 1) * h * w];
            let gxin = &mut gx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * g.in_channels + c) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for_each_tap(g, (h, w), (oh, ow), ky, kx, |po, pi| {
                        acc += gplane[po] * xin[pi];
                        gxin[pi] += gplane[po] * wv;
                    });
                    gw[widx] = acc;
                }
            }
        }
    }
    grads.push(Tensor::new(weight.shape().to_vec(), gw).expect("shape"));
    grads.push(Tensor::from_vec(gb));
    Tensor::new(input.shape().to_vec(), gx).expect("shape")
}

// A transposed conv is the adjoint of a conv with the same geometry: the roles of
// the small (input) and large (output) planes swap in `for_each_tap`.
fn conv_transpose2d_forward(g: &ConvGeom, weight: &Tensor, bias: &Tensor, input: &Tensor, out_shape: &[usize]) -> Tensor {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = g.kernel;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias.data()[o]);
    }
    for c in 0..g.in_channels {
        let xin = &x[c * h * w..(c + 1) * h * w];
        for o in 0..g.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((c * g.out_channels + o) * k + ky) * k + kx];
                    for_each_tap(g, (oh, ow), (h, w), ky, kx, |pi, po| plane[po] += wv * xin[pi]);
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

fn conv_transpose2d_backward(g: &ConvGeom, weight: &Tensor, input: &Tensor, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Tensor {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let k = g.kernel;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gx = vec![0.0; x.len()];
    let gb = (0..g.out_channels)
        .map(|o| go[o * oh * ow..(o + 1) * oh * ow].iter().sum())
        .collect();
    for c in 0..g.in_channels {
        let xin = &x[c * h * w..(c + 1) * h * w];
        let gxin = &mut gx[c * h * w..(c + 1) * h * w];
        for o in 0..g.out_channels {
            let gplane = &go[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((c * g.out_channels + o) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for_each_tap(g, (oh, ow), (h, w), ky, kx, |pi, po| {
                        acc += gplane[po] * xin[pi];
                        gxin[pi] += gplane[po] * wv;
                    });
                    gw[widx] = acc;
                }
            }
        }
    }
    grads.push(Tensor::new(weight.shape().to_vec(), gw).expect("shape"));
    grads.push(Tensor::from_vec(gb));
    Tensor::new(input.shape().to_vec(), gx).expect("shape")
}
