use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvGeom, LayerSpec, ModelParams, Section, Sequential, Tape, Tensor};
use crate::semcom::channel::{apply_channel, zf_equalize, ChannelDraw};
use crate::nn::gradcheck::{check_gradients, GradCheckReport, PIPELINE_STEP};
use crate::semcom::loss::{reconstruction_loss, reconstruction_loss_grad};
use crate::semcom::SemComConfig;

/// Post-activation outputs of the first two encoder convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Skips {
    pub s1: Tensor,
    pub s2: Tensor,
}

/// Network architecture for one [`SemComConfig`].
///
/// Encoder: three `(conv k3 s2 p1, ReLU)` stages, the last followed by a dense
/// map to `d_s`. Decoder: dense back to the `H/8 x W/8` feature map, then three
/// transposed convs (k4 s2 p1), each of the last two consuming the matching
/// skip tensor concatenated channel-wise after the upsampled features.
#[derive(Debug, Clone)]
pub struct SemComModel {
    cfg: SemComConfig,
    encoder: [Sequential; 3],
    channel_encoder: Sequential,
    channel_decoder: Sequential,
    decoder: [Sequential; 3],
}

/// Everything needed to backpropagate one [`SemComModel::reconstruct`] call.
#[derive(Debug, Clone)]
pub struct PipelineTape {
    encoder: [Tape; 3],
    skips: Skips,
    channel_encoder: Tape,
    /// Channel-encoder output before power normalization.
    raw_symbols: Tensor,
    draw: ChannelDraw,
    channel_decoder: Tape,
    decoder: [Tape; 3],
}

impl PipelineTape {
    pub fn draw(&self) -> &ChannelDraw {
        &self.draw
    }

    pub fn skips(&self) -> &Skips {
        &self.skips
    }
}

impl SemComModel {
    pub fn new(cfg: SemComConfig) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.encoder_channels;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let down = |i, o| LayerSpec::Conv2d(ConvGeom::new(i, o, 3, 2, 1));
        let up = |i, o| LayerSpec::ConvTranspose2d(ConvGeom::new(i, o, 4, 2, 1));
        let bottom = [c3, h / 8, w / 8];
        let bottom_numel = c3 * (h / 8) * (w / 8);
        let [w1, w2] = cfg.channel_hidden();
        let (ds, dc) = (cfg.semantic_dim, cfg.channel_dim);

        let encoder = [
            Sequential::new(&[c, h, w], vec![down(c, c1), LayerSpec::Relu])?,
            Sequential::new(&[c1, h / 2, w / 2], vec![down(c1, c2), LayerSpec::Relu])?,
            Sequential::new(
                &[c2, h / 4, w / 4],
                vec![down(c2, c3), LayerSpec::Relu, LayerSpec::dense(bottom_numel, ds)],
            )?,
        ];
        let channel_encoder = Sequential::new(
            &[ds],
            vec![
                LayerSpec::dense(ds, w1),
                LayerSpec::Relu,
                LayerSpec::dense(w1, w2),
                LayerSpec::Relu,
                LayerSpec::dense(w2, dc),
            ],
        )?;
        let channel_decoder = Sequential::new(
            &[dc],
            vec![
                LayerSpec::dense(dc, w2),
                LayerSpec::Relu,
                LayerSpec::dense(w2, w1),
                LayerSpec::Relu,
                LayerSpec::dense(w1, ds),
            ],
        )?;
        let decoder = [
            Sequential::new(
                &[ds],
                vec![
                    LayerSpec::dense(ds, bottom_numel),
                    LayerSpec::Relu,
                    LayerSpec::Reshape(bottom.to_vec()),
                    up(c3, c2),
                    LayerSpec::Relu,
                ],
            )?,
            Sequential::new(&[2 * c2, h / 4, w / 4], vec![up(2 * c2, c1), LayerSpec::Relu])?,
            Sequential::new(&[2 * c1, h / 2, w / 2], vec![up(2 * c1, c), LayerSpec::Sigmoid])?,
        ];
        debug_assert_eq!(decoder[2].output_shape(), &[c, h, w]);
        Ok(Self {
            cfg,
            encoder,
            channel_encoder,
            channel_decoder,
            decoder,
        })
    }

    pub fn config(&self) -> &SemComConfig {
        &self.cfg
    }

    /// Shapes `(s1, s2)` of the skip tensors.
    pub fn skip_shapes(&self) -> (&[usize], &[usize]) {
        (self.encoder[0].output_shape(), self.encoder[1].output_shape())
    }

    /// Fresh parameters: fan-based uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let cat = |nets: &[Sequential], rng: &mut R| -> Vec<Tensor> {
            nets.iter().flat_map(|n| n.init_params(rng)).collect()
        };
        let se = cat(&self.encoder, rng);
        let ce = self.channel_encoder.init_params(rng);
        let cd = self.channel_decoder.init_params(rng);
        let sd = cat(&self.decoder, rng);
        ModelParams::from_sections([se, ce, cd, sd])
    }

    /// All-zero parameters with the model's layout.
    pub fn zero_params(&self) -> ModelParams {
        let zeros = |nets: &[Sequential]| -> Vec<Tensor> {
            nets.iter()
                .flat_map(|n| n.param_shapes())
                .map(|s| Tensor::zeros(&s))
                .collect()
        };
        ModelParams::from_sections([
            zeros(&self.encoder),
            zeros(std::slice::from_ref(&self.channel_encoder)),
            zeros(std::slice::from_ref(&self.channel_decoder)),
            zeros(&self.decoder),
        ])
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if !params.same_layout(&self.zero_params()) {
            return Err(Error::usage("parameters do not match the model architecture"));
        }
        Ok(())
    }

    /// Split a section into per-stage parameter slices.
    fn stage_params<'a>(nets: &[Sequential], section: &'a [Tensor]) -> Vec<&'a [Tensor]> {
        let mut out = Vec::with_capacity(nets.len());
        let mut offset = 0;
        for net in nets {
            let n = net.num_param_tensors();
            out.push(&section[offset..offset + n]);
            offset += n;
        }
        out
    }

    fn encode_taped(&self, params: &ModelParams, image: &Tensor, record: bool) -> Result<(Tensor, Skips, [Tape; 3])> {
        self.check_params(params)?;
        let p = Self::stage_params(&self.encoder, params.section(Section::SemanticEncoder));
        let (s1, t1) = self.encoder[0].forward(p[0], image, record)?;
        let (s2, t2) = self.encoder[1].forward(p[1], &s1, record)?;
        let (z, t3) = self.encoder[2].forward(p[2], &s2, record)?;
        Ok((z, Skips { s1, s2 }, [t1, t2, t3]))
    }

    /// `z, {s1, s2} = f_se(x)`.
    pub fn semantic_encode(&self, params: &ModelParams, image: &Tensor) -> Result<(Tensor, Skips)> {
        let (z, skips, _) = self.encode_taped(params, image, false)?;
        Ok((z, skips))
    }

    fn normalize_power(&self, raw: &Tensor) -> Tensor {
        let energy = raw.sum_squares();
        if !self.cfg.normalize_power || energy == 0.0 {
            return raw.clone();
        }
        let mut out = raw.clone();
        out.scale_in_place((raw.numel() as f64 / energy).sqrt());
        out
    }

    fn normalize_power_backward(&self, raw: &Tensor, grad: &Tensor) -> Tensor {
        let energy = raw.sum_squares();
        if !self.cfg.normalize_power || energy == 0.0 {
            return grad.clone();
        }
        // y = s x with s = sqrt(n / E):  dL/dx = s (g - x (x . g) / E)
        let s = (raw.numel() as f64 / energy).sqrt();
        let xg: f64 = raw.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
        let data = raw
            .data()
            .iter()
            .zip(grad.data())
            .map(|(x, g)| s * (g - x * xg / energy))
            .collect();
        Tensor::new(raw.shape().to_vec(), data).expect("shape")
    }

    /// `x_c = f_ce(z)`, power-normalized to unit mean energy when enabled.
    pub fn channel_encode(&self, params: &ModelParams, z: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let (raw, _) = self
            .channel_encoder
            .forward(params.section(Section::ChannelEncoder), z, false)?;
        Ok(self.normalize_power(&raw))
    }

    /// `z_hat = f_cd(x_hat_c)`.
    pub fn channel_decode(&self, params: &ModelParams, symbols: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let (z, _) = self
            .channel_decoder
            .forward(params.section(Section::ChannelDecoder), symbols, false)?;
        Ok(z)
    }

    fn decode_taped(&self, params: &ModelParams, z_hat: &Tensor, skips: &Skips, record: bool) -> Result<(Tensor, [Tape; 3])> {
        let (s1_shape, s2_shape) = self.skip_shapes();
        if skips.s1.shape() != s1_shape || skips.s2.shape() != s2_shape {
            return Err(Error::usage(format!(
                "skip shapes {:?}/{:?} do not match {s1_shape:?}/{s2_shape:?}",
                skips.s1.shape(),
                skips.s2.shape()
            )));
        }
        let p = Self::stage_params(&self.decoder, params.section(Section::SemanticDecoder));
        let (u1, t1) = self.decoder[0].forward(p[0], z_hat, record)?;
        let (u2, t2) = self.decoder[1].forward(p[1], &u1.concat_leading(&skips.s2)?, record)?;
        let (x_hat, t3) = self.decoder[2].forward(p[2], &u2.concat_leading(&skips.s1)?, record)?;
        Ok((x_hat, [t1, t2, t3]))
    }

    /// `x_hat = f_sd(z_hat, {s1, s2})`; sigmoid output in `[0, 1]`.
    pub fn semantic_decode(&self, params: &ModelParams, z_hat: &Tensor, skips: &Skips) -> Result<Tensor> {
        self.check_params(params)?;
        Ok(self.decode_taped(params, z_hat, skips, false)?.0)
    }

    /// Full pipeline with a fresh channel draw from `rng`.
    pub fn reconstruct<R: Rng + ?Sized>(&self, params: &ModelParams, image: &Tensor, rng: &mut R) -> Result<(Tensor, PipelineTape)> {
        let draw = ChannelDraw::sample(&self.cfg, rng);
        self.reconstruct_with_draw(params, image, draw)
    }

    /// Full pipeline for a given channel realization; the draw is treated as a
    /// constant by [`SemComModel::backward`].
    pub fn reconstruct_with_draw(&self, params: &ModelParams, image: &Tensor, draw: ChannelDraw) -> Result<(Tensor, PipelineTape)> {
        let (z, skips, enc_tapes) = self.encode_taped(params, image, true)?;
        let (raw, ce_tape) = self
            .channel_encoder
            .forward(params.section(Section::ChannelEncoder), &z, true)?;
        let symbols = self.normalize_power(&raw);
        let received = apply_channel(&symbols, &draw)?;
        let equalized = zf_equalize(&received, &draw, self.cfg.eps_zf)?;
        let (z_hat, cd_tape) = self
            .channel_decoder
            .forward(params.section(Section::ChannelDecoder), &equalized, true)?;
        let (x_hat, dec_tapes) = self.decode_taped(params, &z_hat, &skips, true)?;
        Ok((
            x_hat,
            PipelineTape {
                encoder: enc_tapes,
                skips,
                channel_encoder: ce_tape,
                raw_symbols: raw,
                draw,
                channel_decoder: cd_tape,
                decoder: dec_tapes,
            },
        ))
    }

    /// Forward without recording, for evaluation.
    pub fn infer<R: Rng + ?Sized>(&self, params: &ModelParams, image: &Tensor, rng: &mut R) -> Result<Tensor> {
        let draw = ChannelDraw::sample(&self.cfg, rng);
        let (z, skips) = self.semantic_encode(params, image)?;
        let symbols = self.channel_encode(params, &z)?;
        let equalized = zf_equalize(&apply_channel(&symbols, &draw)?, &draw, self.cfg.eps_zf)?;
        let z_hat = self.channel_decode(params, &equalized)?;
        self.semantic_decode(params, &z_hat, &skips)
    }

    /// Gradients of a scalar objective with respect to every parameter, given
    /// its gradient with respect to the reconstruction.
    pub fn backward(&self, params: &ModelParams, tape: &PipelineTape, grad_x_hat: &Tensor) -> Result<ModelParams> {
        self.check_params(params)?;
        let dec_p = Self::stage_params(&self.decoder, params.section(Section::SemanticDecoder));
        let enc_p = Self::stage_params(&self.encoder, params.section(Section::SemanticEncoder));
        let [c1, c2, _] = self.cfg.encoder_channels;

        let (g_d3, g_cat1) = self.decoder[2].backward(dec_p[2], &tape.decoder[2], grad_x_hat)?;
        let (g_u2, g_s1_skip) = g_cat1.split_leading(c1)?;
        let (g_d2, g_cat2) = self.decoder[1].backward(dec_p[1], &tape.decoder[1], &g_u2)?;
        let (g_u1, g_s2_skip) = g_cat2.split_leading(c2)?;
        let (g_d1, g_z_hat) = self.decoder[0].backward(dec_p[0], &tape.decoder[0], &g_u1)?;

        let (g_cd, g_equalized) = self.channel_decoder.backward(
            params.section(Section::ChannelDecoder),
            &tape.channel_decoder,
            &g_z_hat,
        )?;
        // x_hat_c = c * x_c + noise term, c = h / (h + eps): dL/dx_c = conj(c) * g
        let gain = tape.draw.equalized_gain(self.cfg.eps_zf);
        let mut g_symbols = Vec::with_capacity(g_equalized.numel());
        for (g, &(a, b)) in g_equalized.data().chunks_exact(2).zip(&gain) {
            g_symbols.push(a * g[0] + b * g[1]);
            g_symbols.push(a * g[1] - b * g[0]);
        }
        let g_symbols = Tensor::new(g_equalized.shape().to_vec(), g_symbols)?;
        let g_raw = self.normalize_power_backward(&tape.raw_symbols, &g_symbols);
        let (g_ce, g_z) = self.channel_encoder.backward(
            params.section(Section::ChannelEncoder),
            &tape.channel_encoder,
            &g_raw,
        )?;

        let (g_e3, mut g_s2) = self.encoder[2].backward(enc_p[2], &tape.encoder[2], &g_z)?;
        g_s2.axpy(1.0, &g_s2_skip)?;
        let (g_e2, mut g_s1) = self.encoder[1].backward(enc_p[1], &tape.encoder[1], &g_s2)?;
        g_s1.axpy(1.0, &g_s1_skip)?;
        let (g_e1, _) = self.encoder[0].backward(enc_p[0], &tape.encoder[0], &g_s1)?;

        let se = [g_e1, g_e2, g_e3].concat();
        let sd = [g_d1, g_d2, g_d3].concat();
        Ok(ModelParams::from_sections([se, g_ce, g_cd, sd]))
    }

    /// Reconstruction loss of one image and its parameter gradients.
    pub fn loss_and_grad<R: Rng + ?Sized>(&self, params: &ModelParams, image: &Tensor, rng: &mut R) -> Result<(f64, ModelParams)> {
        let (x_hat, tape) = self.reconstruct(params, image, rng)?;
        let (loss, grad) = reconstruction_loss_grad(image, &x_hat, self.cfg.alpha_loss)?;
        Ok((loss, self.backward(params, &tape, &grad)?))
    }

    /// Finite-difference check of [`SemComModel::backward`] under the MSE
    /// objective for a fixed channel draw, probing at most `per_tensor_limit`
    /// entries of each parameter tensor.
    pub fn gradcheck(
        &self,
        params: &ModelParams,
        image: &Tensor,
        draw: &ChannelDraw,
        per_tensor_limit: Option<usize>,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        let (x_hat, tape) = self.reconstruct_with_draw(params, image, draw.clone())?;
        let (_, grad) = reconstruction_loss_grad(image, &x_hat, 1.0)?;
        let grads = self.backward(params, &tape, &grad)?;
        let mut work = params.tensors().to_vec();
        let report = check_gradients(
            &mut work,
            grads.tensors(),
            PIPELINE_STEP,
            per_tensor_limit,
            tolerance,
            |t| {
                let p = params.with_tensors(t.to_vec()).expect("same layout");
                let (y, tape) = self
                    .reconstruct_with_draw(&p, image, draw.clone())
                    .expect("validated");
                let loss = reconstruction_loss(image, &y, 1.0).expect("same shape");
                (loss, self.relu_pattern(&tape))
            },
        );
        Ok(report)
    }

    /// ReLU sign pattern over every stage on the tape.
    pub fn relu_pattern(&self, tape: &PipelineTape) -> Vec<bool> {
        let mut out = Vec::new();
        for (net, t) in self.encoder.iter().zip(&tape.encoder) {
            out.extend(net.relu_pattern(t));
        }
        out.extend(self.channel_encoder.relu_pattern(&tape.channel_encoder));
        out.extend(self.channel_decoder.relu_pattern(&tape.channel_decoder));
        for (net, t) in self.decoder.iter().zip(&tape.decoder) {
            out.extend(net.relu_pattern(t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_image(cfg: &SemComConfig, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = cfg.image_numel();
        Tensor::new(cfg.image_shape().to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let cfg = SemComConfig::desk_scale();
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.init_params(&mut seeded(1));
        let x = random_image(&cfg, 2);
        let (z, skips) = model.semantic_encode(&params, &x).unwrap();
        assert_eq!(z.shape(), &[64]);
        assert_eq!(skips.s1.shape(), &[8, 8, 8]);
        assert_eq!(skips.s2.shape(), &[16, 4, 4]);
        let xc = model.channel_encode(&params, &z).unwrap();
        assert_eq!(xc.shape(), &[8]);
        let zh = model.channel_decode(&params, &xc).unwrap();
        assert_eq!(zh.shape(), &[64]);
        let out = model.semantic_decode(&params, &zh, &skips).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn large_preset_shapes() {
        let cfg = SemComConfig::paper_scale();
        let model = SemComModel::new(cfg.clone()).unwrap();
        assert_eq!(model.encoder[2].input_shape(), &[64, 16, 16]);
        assert_eq!(model.encoder[2].output_shape(), &[256]);
        assert_eq!(model.channel_encoder.output_shape(), &[32]);
        assert_eq!(model.channel_decoder.input_shape(), &[32]);
        assert_eq!(model.channel_decoder.output_shape(), &[256]);
        assert_eq!(model.decoder[0].output_shape(), &[64, 16, 16]);
        assert_eq!(model.decoder[2].output_shape(), &[3, 64, 64]);
        // encoder reaches 8x8 before the bottleneck
        assert_eq!(
            model.encoder[2].layers()[2],
            LayerSpec::dense(128 * 8 * 8, 256)
        );
    }

    #[test]
    fn zero_everything() {
        let cfg = SemComConfig::desk_scale();
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.zero_params();
        let x = Tensor::zeros(&cfg.image_shape());
        let (z, skips) = model.semantic_encode(&params, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let xc = model.channel_encode(&params, &z).unwrap();
        assert!(xc.data().iter().all(|&v| v == 0.0));
        let zh = model.channel_decode(&params, &xc).unwrap();
        assert!(zh.data().iter().all(|&v| v == 0.0));
        let out = model.semantic_decode(&params, &zh, &skips).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));

        let mut normalized = cfg.clone();
        normalized.normalize_power = true;
        let model = SemComModel::new(normalized).unwrap();
        let xc = model.channel_encode(&params, &z).unwrap();
        assert!(xc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn power_normalization_gives_unit_energy() {
        let mut cfg = SemComConfig::desk_scale();
        cfg.normalize_power = true;
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.init_params(&mut seeded(4));
        let (z, _) = model.semantic_encode(&params, &random_image(&cfg, 5)).unwrap();
        let xc = model.channel_encode(&params, &z).unwrap();
        assert!((xc.sum_squares() / 8.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skip_shape_mismatch_rejected() {
        let model = SemComModel::new(SemComConfig::desk_scale()).unwrap();
        let params = model.zero_params();
        let skips = Skips {
            s1: Tensor::zeros(&[8, 8, 8]),
            s2: Tensor::zeros(&[16, 2, 2]),
        };
        assert!(model.semantic_decode(&params, &Tensor::zeros(&[64]), &skips).is_err());
    }

    #[test]
    fn identity_channel_equals_noiseless_path() {
        let mut cfg = SemComConfig::desk_scale().without_channel();
        cfg.eps_zf = 0.0;
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.init_params(&mut seeded(6));
        let x = random_image(&cfg, 7);
        let (via_channel, _) = model.reconstruct(&params, &x, &mut seeded(8)).unwrap();
        let (z, skips) = model.semantic_encode(&params, &x).unwrap();
        let xc = model.channel_encode(&params, &z).unwrap();
        let direct = model
            .semantic_decode(&params, &model.channel_decode(&params, &xc).unwrap(), &skips)
            .unwrap();
        assert_eq!(via_channel, direct);
    }

    #[test]
    fn reconstruct_is_deterministic_and_in_range() {
        let cfg = SemComConfig::desk_scale();
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.init_params(&mut seeded(1));
        let x = random_image(&cfg, 2);
        let (a, _) = model.reconstruct(&params, &x, &mut seeded(3)).unwrap();
        let (b, _) = model.reconstruct(&params, &x, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = model.infer(&params, &x, &mut seeded(3)).unwrap();
        assert_eq!(a, c);
    }

    /// Finite differences through the whole pipeline (including the channel
    /// gain and power normalization), on a subset of entries per tensor.
    fn pipeline_gradcheck(cfg: SemComConfig, draw_seed: u64) {
        let model = SemComModel::new(cfg.clone()).unwrap();
        let params = model.init_params(&mut seeded(10));
        let x = random_image(&cfg, 11);
        let draw = ChannelDraw::sample(&cfg, &mut seeded(draw_seed));
        let (x_hat, tape) = model.reconstruct_with_draw(&params, &x, draw.clone()).unwrap();
        let (_, g) = reconstruction_loss_grad(&x, &x_hat, 1.0).unwrap();
        let grads = model.backward(&params, &tape, &g).unwrap();
        for s in Section::ALL {
            assert!(
                grads.section(s).iter().any(|t| t.sum_squares() > 0.0),
                "dead path into {s:?}"
            );
        }
        let report = model.gradcheck(&params, &x, &draw, Some(6), 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradients_through_fading_and_noise() {
        let cfg = SemComConfig::desk_scale();
        pipeline_gradcheck(cfg, 12);
    }

    #[test]
    fn gradients_through_power_normalization() {
        let mut cfg = SemComConfig::desk_scale();
        cfg.normalize_power = true;
        pipeline_gradcheck(cfg, 13);
    }
}
