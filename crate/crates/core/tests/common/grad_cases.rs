//! Gradient checks of every differentiable operation, loss and the full
//! model against central finite differences in double precision. Each case
//! reports how many entries it compared or the first mismatch.

use fcnet::autodiff::{ParamStore, Tape, Var};
use fcnet::correction::{CorrectionBlock, CorrectionBlockConfig};
use fcnet::fusion::{guided_upsample, FusionBlock, FusionBlockConfig};
use fcnet::losses::{loss_pr, loss_ps, loss_r, total_loss, LossTerms, LossWeights, SpatialLossConfig};
use fcnet::model::{FcNet, ModelConfig};
use fcnet::nn::init_kaiming;
use fcnet::ops::ConvParams;
use fcnet::pyramid::{compose_base, gaussian_pyramid, LearnedUpsampler, PyramidTarget};
use fcnet::Tensor;

use super::{project, uniform, CheckStats, GradCheck};

pub type CaseResult = Result<CheckStats, String>;

fn unary(shape: &[usize], lo: f64, hi: f64, op: impl Fn(&mut Tape<f64>, Var) -> fcnet::Result<Var>) -> CaseResult {
    let x = uniform(shape, lo, hi, 3);
    GradCheck::default().inputs(&[x], |t, v| {
        let y = op(t, v[0])?;
        project(t, y, 99)
    })
}

fn binary(shape: &[usize], op: impl Fn(&mut Tape<f64>, Var, Var) -> fcnet::Result<Var>) -> CaseResult {
    let a = uniform(shape, -1.0, 1.0, 4);
    let b = uniform(shape, 0.5, 2.0, 5);
    GradCheck::default().inputs(&[a, b], |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, 98)
    })
}

/// Runs every sub-check, labelling the first failure.
fn all(parts: Vec<(String, CaseResult)>) -> CaseResult {
    let mut total = CheckStats::default();
    for (label, r) in parts {
        let s = r.map_err(|e| format!("{label}: {e}"))?;
        total.checked += s.checked;
        total.kinks_skipped += s.kinks_skipped;
        total.worst_rel = total.worst_rel.max(s.worst_rel);
    }
    Ok(total)
}

macro_rules! parts {
    ($($label:expr => $check:expr),+ $(,)?) => {
        all(vec![$(($label.to_string(), $check)),+])
    };
}

pub fn conv2d_variants() -> CaseResult {
    let variants = [
        (3, ConvParams::same3(1)),
        (3, ConvParams::new(2, 1, 1)),
        (3, ConvParams::same3(2)),
        (3, ConvParams::new(1, 0, 3)),
        (1, ConvParams::new(1, 0, 1)),
    ];
    all(variants
        .into_iter()
        .map(|(k, p)| {
            let x = uniform(&[2, 3, 9, 8], -1.0, 1.0, 1);
            let w = uniform(&[4, 3, k, k], -0.5, 0.5, 2);
            let b = uniform(&[4], -0.5, 0.5, 3);
            let r = GradCheck::default().inputs(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
                project(t, y, 7)
            });
            (format!("{k}x{k} {p:?}"), r)
        })
        .collect())
}

pub fn resize() -> CaseResult {
    parts![
        "upsample" => unary(&[2, 3, 4, 5], -1.0, 1.0, |t, x| t.resize(x, 9, 7)),
        "downsample" => unary(&[1, 2, 9, 7], -1.0, 1.0, |t, x| t.resize(x, 4, 3)),
        "same extent" => unary(&[1, 2, 5, 5], -1.0, 1.0, |t, x| t.resize(x, 5, 5)),
    ]
}

pub fn elementwise() -> CaseResult {
    let s = [2, 3, 4, 4];
    parts![
        "leaky_relu" => unary(&s, -1.0, 1.0, |t, x| Ok(t.leaky_relu(x, 0.1))),
        "abs" => unary(&s, -1.0, 1.0, |t, x| Ok(t.abs(x))),
        "square" => unary(&s, -1.0, 1.0, |t, x| Ok(t.square(x))),
        "scale" => unary(&s, -1.0, 1.0, |t, x| Ok(t.scale(x, -2.5))),
        "add_scalar" => unary(&s, -1.0, 1.0, |t, x| Ok(t.add_scalar(x, 0.3))),
        "sum" => unary(&s, -1.0, 1.0, |t, x| Ok(t.sum(x))),
        "add" => binary(&s, |t, a, b| t.add(a, b)),
        "sub" => binary(&s, |t, a, b| t.sub(a, b)),
        "mul" => binary(&s, |t, a, b| t.mul(a, b)),
        "div" => binary(&s, |t, a, b| t.div(a, b)),
    ]
}

pub fn pooling_and_box_filters() -> CaseResult {
    parts![
        "avg_pool 2" => unary(&[2, 3, 5, 7], -1.0, 1.0, |t, x| t.avg_pool(x, 2)),
        "avg_pool 4" => unary(&[1, 1, 9, 9], -1.0, 1.0, |t, x| t.avg_pool(x, 4)),
        "box_mean 2" => unary(&[2, 2, 6, 5], -1.0, 1.0, |t, x| t.box_mean(x, 2)),
        "box_mean 3" => unary(&[1, 1, 3, 8], -1.0, 1.0, |t, x| t.box_mean(x, 3)),
    ]
}

pub fn channel_and_batch_ops() -> CaseResult {
    parts![
        "channel_mean" => unary(&[2, 3, 4, 5], -1.0, 1.0, |t, x| t.channel_mean(x)),
        "expand_channels" => unary(&[2, 1, 4, 5], -1.0, 1.0, |t, x| t.expand_channels(x, 3)),
        "expand_batch" => unary(&[1, 3, 4, 5], -1.0, 1.0, |t, x| t.expand_batch(x, 4)),
        "sum_batch" => unary(&[4, 3, 4, 5], -1.0, 1.0, |t, x| t.sum_batch(x)),
        "softmax_batch" => unary(&[4, 3, 4, 5], -2.0, 2.0, |t, x| t.softmax_batch(x)),
        "crop" => unary(&[2, 3, 6, 7], -1.0, 1.0, |t, x| t.crop(x, 1, 2, 4, 3)),
        "concat_channels" => binary(&[2, 3, 4, 4], |t, a, b| t.concat_channels(a, b)),
    ]
}

pub fn guided_upsampling() -> CaseResult {
    let low = uniform(&[2, 3, 4, 5], -1.0, 1.0, 11);
    let guide = uniform(&[2, 3, 8, 10], 0.0, 1.0, 12);
    all([(1, 1e-2), (2, 1e-4)]
        .into_iter()
        .map(|(r, eps)| {
            let res = GradCheck::default().inputs(&[low.clone(), guide.clone()], |t, v| {
                let y = guided_upsample(t, v[0], v[1], r, eps)?;
                project(t, y, 13)
            });
            (format!("r={r} eps={eps}"), res)
        })
        .collect())
}

pub fn kaiming_store(seed: u64, build: impl FnOnce(&mut ParamStore<f64>)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    build(&mut store);
    init_kaiming(&mut store, seed).unwrap();
    // Non-zero biases so their gradients are exercised away from zero.
    for p in store.iter_mut() {
        if p.name().ends_with(".bias") {
            let n = p.value().len();
            p.set_value(uniform(&[n], -0.1, 0.1, n as u64)).unwrap();
        }
    }
    store
}

pub fn fusion_block() -> CaseResult {
    let mut block = None;
    let store = kaiming_store(21, |s| {
        block = Some(FusionBlock::register(s, "f", FusionBlockConfig::with_m(2)).unwrap());
    });
    let block = block.unwrap();
    let frames = uniform(&[3, 3, 12, 10], 0.0, 1.0, 22);
    let params = GradCheck::default().params(&store, |t, s| {
        let x = t.constant(frames.clone());
        let y = block.forward(t, s, x)?.fused;
        project(t, y, 23)
    });
    let inputs = GradCheck::default().inputs(std::slice::from_ref(&frames), |t, v| {
        let y = block.forward(t, &store, v[0])?.fused;
        project(t, y, 23)
    });
    parts!["parameters" => params, "frames" => inputs]
}

pub fn correction_block() -> CaseResult {
    all([CorrectionBlockConfig::SMALL, CorrectionBlockConfig::new(2, 4)]
        .into_iter()
        .map(|cfg| {
            let mut block = None;
            let store = kaiming_store(31, |s| block = Some(CorrectionBlock::register(s, "c", cfg).unwrap()));
            let block = block.unwrap();
            let x = uniform(&[2, 3, 9, 11], 0.0, 1.0, 32);
            let r = GradCheck::default().params(&store, |t, s| {
                let xv = t.constant(x.clone());
                let y = block.forward(t, s, xv)?;
                project(t, y, 33)
            });
            (format!("{cfg:?}"), r)
        })
        .collect())
}

pub fn base_detail_composition() -> CaseResult {
    let mut up = None;
    let store = kaiming_store(41, |s| up = Some(LearnedUpsampler::register(s, "up").unwrap()));
    let up = up.unwrap();
    let out = uniform(&[1, 3, 5, 4], 0.0, 1.0, 42);
    let details = uniform(&[3, 3, 9, 8], -0.2, 0.2, 43);
    let inputs = GradCheck::default().inputs(&[out.clone(), details.clone()], |t, v| {
        let y = compose_base(t, &store, v[0], v[1], &up)?;
        project(t, y, 44)
    });
    let params = GradCheck::default().params(&store, |t, s| {
        let (o, d) = (t.constant(out.clone()), t.constant(details.clone()));
        let y = compose_base(t, s, o, d, &up)?;
        project(t, y, 44)
    });
    parts!["inputs" => inputs, "upsampler" => params]
}

fn pyramid_case(n: usize, seed: u64) -> (Vec<Tensor<f64>>, PyramidTarget<f64>) {
    let gt = uniform(&[1, 3, 16, 12], 0.0, 1.0, seed);
    let target = gaussian_pyramid(&gt, n).unwrap();
    let outputs = target.levels.iter().enumerate().map(|(i, l)| {
        let noise = uniform(l.shape(), -0.3, 0.3, seed + 1 + i as u64);
        l.zip_map(&noise, |a, b| a + b).unwrap()
    });
    (outputs.collect(), target)
}

/// L1 terms have kinks, so these use the looser tolerance.
pub fn losses() -> CaseResult {
    let l1 = GradCheck::with_tol(1e-2);
    let (outs, target) = pyramid_case(3, 50);
    let spatial = SpatialLossConfig::default();
    let mut parts = vec![
        ("loss_r".to_string(), l1.inputs(&outs[..1], |t, v| loss_r(t, v[0], &target.levels[0]))),
        ("loss_pr".to_string(), l1.inputs(&outs, |t, v| loss_pr(t, v, &target))),
        ("loss_ps".to_string(), l1.inputs(&outs, |t, v| loss_ps(t, v, &target, spatial))),
    ];
    for terms in [LossTerms::Reconstruction, LossTerms::WithPyramid, LossTerms::WithFinestSpatial, LossTerms::All] {
        let r = l1.inputs(&outs, |t, v| Ok(total_loss(t, v, &target, terms, LossWeights::default(), spatial)?.total));
        parts.push((format!("total ({terms})"), r));
    }
    all(parts)
}

/// The full two-level network on two 32x32 frames.
pub fn full_model_setup() -> (FcNet, ParamStore<f64>, Tensor<f64>, PyramidTarget<f64>) {
    let mut net = None;
    let store = kaiming_store(61, |s| net = Some(FcNet::register(ModelConfig::with_depth(2), s).unwrap()));
    let frames = uniform(&[2, 3, 32, 32], 0.0, 1.0, 62);
    let gt = uniform(&[1, 3, 32, 32], 0.0, 1.0, 63);
    let target = gaussian_pyramid(&gt, 2).unwrap();
    (net.unwrap(), store, frames, target)
}

pub fn objective(
    net: &FcNet,
    frames: &Tensor<f64>,
    target: &PyramidTarget<f64>,
    t: &mut Tape<f64>,
    s: &ParamStore<f64>,
) -> fcnet::Result<Var> {
    let out = net.forward(t, s, frames)?;
    let levels = out.levels_finest_first();
    Ok(total_loss(t, &levels, target, LossTerms::All, LossWeights::default(), SpatialLossConfig::default())?.total)
}

pub fn full_model() -> CaseResult {
    let (net, store, frames, target) = full_model_setup();
    let check = GradCheck { samples: 4, ..GradCheck::with_tol(1e-2) };
    let stats = check.params(&store, |t, s| objective(&net, &frames, &target, t, s))?;
    if stats.checked < 2 * store.len() {
        return Err(format!("only {} entries checked over {} tensors", stats.checked, store.len()));
    }
    Ok(stats)
}

/// Every case, in a fixed order.
pub const CASES: &[(&str, fn() -> CaseResult)] = &[
    ("conv2d", conv2d_variants),
    ("resize", resize),
    ("elementwise", elementwise),
    ("pooling and box filters", pooling_and_box_filters),
    ("channel and batch ops", channel_and_batch_ops),
    ("guided upsampling", guided_upsampling),
    ("fusion block", fusion_block),
    ("correction block", correction_block),
    ("base-detail composition", base_detail_composition),
    ("losses", losses),
    ("full model", full_model),
];
