use crate::data::{synth_corpus, SynthSpec};
use crate::error::Result;
use crate::nn::gradcheck::PIPELINE_STEP;
use crate::nn::{finite_diff_check, finite_diff_check_at, ConvGeom, GradCheckReport, LayerSpec, Sequential, Tensor};
use crate::rng::seeded;
use crate::semcom::{ChannelDraw, SemComConfig, SemComModel};
use rand::Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Entries probed per parameter tensor of the full pipeline.
const PIPELINE_PROBES: usize = 12;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn layer_case(name: &'static str, input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<GradCheckCase> {
    case_at(name, input, layers, seed, None)
}

fn case_at(name: &'static str, input: &[usize], layers: Vec<LayerSpec>, seed: u64, step: Option<f64>) -> Result<GradCheckCase> {
    let net = Sequential::new(input, layers)?;
    let mut rng = seeded(seed);
    let params = net.init_params(&mut rng);
    let n = input.iter().product();
    let x = Tensor::new(input.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(GradCheckCase {
        name,
        report: match step {
            None => finite_diff_check(&net, &params, &x, GRADCHECK_TOLERANCE)?,
            Some(h) => finite_diff_check_at(&net, &params, &x, h, GRADCHECK_TOLERANCE)?,
        },
    })
}

/// Every layer kind on its own, a mixed stack, and the desk-scale pipeline
/// with the channel fixed to `h = 1` and no noise. The two composites use the
/// larger pipeline step.
pub fn gradcheck_suite() -> Result<Vec<GradCheckCase>> {
    let conv = |i, o| LayerSpec::Conv2d(ConvGeom::new(i, o, 3, 2, 1));
    let convt = |i, o| LayerSpec::ConvTranspose2d(ConvGeom::new(i, o, 4, 2, 1));
    let mut cases = vec![
        layer_case("dense", &[6], vec![LayerSpec::dense(6, 4)], 1)?,
        layer_case("conv2d", &[2, 6, 6], vec![conv(2, 3)], 2)?,
        layer_case("conv_transpose2d", &[3, 3, 3], vec![convt(3, 2)], 3)?,
        layer_case("relu", &[6], vec![LayerSpec::dense(6, 8), LayerSpec::Relu, LayerSpec::dense(8, 3)], 4)?,
        layer_case("sigmoid", &[5], vec![LayerSpec::dense(5, 4), LayerSpec::Sigmoid], 5)?,
        layer_case(
            "reshape",
            &[4],
            vec![LayerSpec::dense(4, 8), LayerSpec::Reshape(vec![2, 2, 2]), convt(2, 1)],
            6,
        )?,
        case_at(
            "stack",
            &[2, 8, 8],
            vec![
                conv(2, 3),
                LayerSpec::Relu,
                LayerSpec::Reshape(vec![48]),
                LayerSpec::dense(48, 12),
                LayerSpec::Relu,
                LayerSpec::Reshape(vec![3, 2, 2]),
                convt(3, 2),
                LayerSpec::Sigmoid,
            ],
            7,
            Some(PIPELINE_STEP),
        )?,
    ];

    let cfg = SemComConfig::desk_scale().without_channel();
    let model = SemComModel::new(cfg.clone())?;
    let params = model.init_params(&mut seeded(8));
    let spec = SynthSpec {
        classes: 1,
        per_class: 1,
        ..SynthSpec::desk_scale()
    };
    let image = synth_corpus(&spec, &mut seeded(9))?.image(0).clone();
    let draw = ChannelDraw::identity(cfg.channel_dim);
    cases.push(GradCheckCase {
        name: "pipeline",
        report: model.gradcheck(&params, &image, &draw, Some(PIPELINE_PROBES), GRADCHECK_TOLERANCE)?,
    });
    Ok(cases)
}
