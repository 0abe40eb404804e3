//! Synthetic bracketed scenes for tests, examples and benchmarks.
//!
//! Each scene is a smooth random radiance map. Exposures apply a gain of
//! `2^ev`, clipping and a display gamma; the ground truth is a tone-mapped
//! rendition with a mild colour shift, so no single exposure equals it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_png, CANONICAL_EVS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GAMMA: f32 = 1.0 / 2.2;

/// Scene radiance, roughly in `[0.05, 3]`.
pub fn radiance(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<[f32; 6]> = (0..6)
        .map(|_| {
            [
                rng.random::<f32>(),
                rng.random::<f32>(),
                0.08 + 0.25 * rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
            ]
        })
        .collect();
    let freq = [1.0 + 6.0 * rng.random::<f32>(), 1.0 + 6.0 * rng.random::<f32>()];
    let base = 0.05 + 0.3 * rng.random::<f32>();
    Tensor::from_fn4([1, 3, h, w], |_, c, y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let mut v = base * (1.0 + fx);
        for b in &blobs {
            let d2 = (fy - b[0]).powi(2) + (fx - b[1]).powi(2);
            v += 2.0 * b[3 + c] * (-d2 / (b[2] * b[2])).exp();
        }
        let texture = 0.15 * (freq[0] * 6.3 * fy).sin() * (freq[1] * 6.3 * fx).cos();
        (v * (1.0 + texture)).clamp(0.05, 3.0)
    })
}

pub fn render_exposure(radiance: &Tensor<f32>, ev: f32) -> Tensor<f32> {
    let gain = 0.6 * 2f32.powf(ev);
    radiance.map(|r| (r * gain).clamp(0.0, 1.0).powf(GAMMA))
}

pub fn render_ground_truth(radiance: &Tensor<f32>) -> Tensor<f32> {
    let tint = [1.04f32, 1.0, 0.94];
    let (_, _, h, w) = radiance.dims4().expect("4-d radiance");
    let plane = h * w;
    let data = radiance.data();
    Tensor::from_fn(radiance.shape(), |i| {
        let r = data[i] * 1.5;
        (tint[i / plane] * (r / (1.0 + r)).powf(0.8)).clamp(0.0, 1.0)
    })
}

/// Writes `scenes` scenes of `h x w` pixels with all five canonical
/// exposures plus a `manifest.jsonl` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, scenes: usize, h: usize, w: usize, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in 0..scenes {
        let id = format!("scene{s:03}");
        let scene_dir = dir.join(&id);
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let r = radiance(h, w, seed.wrapping_mul(1000).wrapping_add(s as u64));
        let mut exposures = serde_json::Map::new();
        for ev in CANONICAL_EVS {
            let name = format!("ev{ev:+.1}.png");
            save_png(scene_dir.join(&name), &render_exposure(&r, ev))?;
            exposures.insert(format!("{ev}"), format!("{id}/{name}").into());
        }
        save_png(scene_dir.join("gt.png"), &render_ground_truth(&r))?;
        let line = serde_json::json!({ "scene_id": id, "exposures": exposures, "gt": format!("{id}/gt.png") });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
