//! Randomized invariants of the pyramid, fusion, losses and metrics.

mod common;

use common::uniform;
use fcnet::autodiff::Tape;
use fcnet::losses::{spatial_term, SpatialLossConfig};
use fcnet::metrics::{psnr, ssim};
use fcnet::model::{FcNet, ModelConfig, Variant};
use fcnet::ops::{bilinear_resize, softmax_batch};
use fcnet::pyramid::{gaussian_pyramid, lp_decompose, lp_reconstruct};
use fcnet::Tensor;
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    uniform(&[1, 3, h, w], 0.0, 1.0, seed)
}

/// Permutes the batch axis of a `(K, ...)` tensor.
fn permute(frames: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let items: Vec<_> = order.iter().map(|&i| frames.batch_item(i).unwrap()).collect();
    Tensor::stack_batch(&items).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn pyramid_reconstructs(h in 8usize..40, w in 8usize..40, n in 1usize..=4, seed: u64) {
        let x = image(h, w, seed);
        let back = lp_reconstruct(&lp_decompose(&x, n).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn pyramid_is_linear(h in 8usize..24, w in 8usize..24, a in -2.0f64..2.0, seed: u64) {
        let x = image(h, w, seed);
        let y = image(h, w, seed ^ 1);
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let lhs = lp_decompose(&combo, 3).unwrap();
        let rhs = lp_decompose(&x, 3).unwrap().combine(a, &lp_decompose(&y, 3).unwrap(), 1.0).unwrap();
        prop_assert!(lhs.base.max_abs_diff(&rhs.base) <= 1e-12);
        for (l, r) in lhs.details.iter().zip(&rhs.details) {
            prop_assert!(l.max_abs_diff(r) <= 1e-12);
        }
    }

    #[test]
    fn gaussian_levels_match_pyramid_base(h in 8usize..30, w in 8usize..30, n in 1usize..=4, seed: u64) {
        let x = image(h, w, seed);
        let g = gaussian_pyramid(&x, n).unwrap();
        prop_assert_eq!(g.levels.last().unwrap(), &lp_decompose(&x, n).unwrap().base);
    }

    #[test]
    fn resize_keeps_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, c in -3.0f64..3.0) {
        let x = Tensor::full(&[1, 2, h, w], c);
        prop_assert_eq!(bilinear_resize(&x, oh, ow).unwrap(), Tensor::full(&[1, 2, oh, ow], c));
    }

    #[test]
    fn softmax_weights_are_a_partition_of_unity(k in 1usize..6, seed: u64) {
        let x = uniform(&[k, 3, 4, 5], -30.0, 30.0, seed);
        let y = softmax_batch(&x).unwrap();
        for p in 0..60 {
            let s: f64 = (0..k).map(|i| y.data()[i * 60 + p]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spatial_loss_ignores_level_offsets(h in 4usize..20, w in 4usize..20, c in -1.0f64..1.0, seed: u64) {
        let g = image(h, w, seed);
        let mut tape = Tape::new();
        let o = tape.constant(g.map(|v| v + c));
        let l = spatial_term(&mut tape, o, &g, SpatialLossConfig::default()).unwrap();
        prop_assert!(tape.scalar(l).unwrap().abs() < 1e-20);
    }

    #[test]
    fn metrics_are_symmetric(seed: u64) {
        let x = image(16, 16, seed);
        let y = image(16, 16, seed ^ 7);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn fused_output_is_frame_order_invariant(k in 2usize..5, seed: u64) {
        let (net, store) = FcNet::init::<f32>(ModelConfig::with_depth(2), seed).unwrap();
        let frames = common::uniform_f32(&[k, 3, 24, 20], 0.0, 1.0, seed);
        let mut order: Vec<usize> = (0..k).rev().collect();
        order.rotate_left(seed as usize % k);
        let run = |f: &Tensor<f32>| {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &store, f).unwrap();
            tape.value(out.output).clone()
        };
        prop_assert_eq!(run(&frames), run(&permute(&frames, &order)));
    }

    #[test]
    fn fusion_stays_inside_the_frames_hull(k in 1usize..5, seed: u64) {
        let cfg = ModelConfig { variant: Variant::FusionOnly, ..ModelConfig::with_depth(1) };
        let (net, store) = FcNet::init::<f32>(cfg, seed).unwrap();
        let frames = common::uniform_f32(&[k, 3, 16, 16], 0.0, 1.0, seed ^ 3);
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &store, &frames).unwrap();
        let fused = tape.value(out.fused[0]);
        let plane = 3 * 16 * 16;
        for p in 0..plane {
            let vals = (0..k).map(|i| frames.data()[i * plane + p]);
            let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(v), b.max(v)));
            let f = fused.data()[p];
            prop_assert!(f >= lo - 1e-6 && f <= hi + 1e-6);
        }
    }
}
