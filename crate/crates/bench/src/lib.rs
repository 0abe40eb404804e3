//! Deterministic inputs shared by the kernel benchmarks.

use fcnet::data::CANONICAL_EVS;
use fcnet::fixtures::{radiance, render_exposure};
use fcnet::Tensor;

/// A `(k, 3, side, side)` stack of synthetic exposures of one scene.
pub fn exposure_stack(k: usize, side: usize) -> Tensor<f32> {
    let scene = radiance(side, side, 1);
    let frames: Vec<_> = CANONICAL_EVS.iter().cycle().take(k).map(|&ev| render_exposure(&scene, ev)).collect();
    Tensor::stack_batch(&frames).expect("frames share extents")
}

/// Fixed pseudo-random values in `[-scale, scale]`, cheap and reproducible.
pub fn pattern(shape: &[usize], scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        scale * (h as f32 / (1u64 << 24) as f32 * 2.0 - 1.0)
    })
}
