//! Scene manifests, evaluation task presets, training subsequence sampling
//! and 8-bit PNG I/O.
//!
//! A manifest holds one JSON object per line:
//!
//! ```text
//! {"scene_id": "a0001", "exposures": {"-1.5": "a0001/m15.png", "0": "a0001/0.png"}, "gt": "a0001/gt.png"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Blank lines are
//! ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};
use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The five exposure tags a scene may be rendered at, ascending.
pub const CANONICAL_EVS: [f32; 5] = [-1.5, -1.0, 0.0, 1.0, 1.5];

/// Longest training image side unless configured otherwise.
pub const DEFAULT_MAX_SIDE: usize = 512;

/// Most frames a training subsequence may hold.
pub const MAX_SEQUENCE_LEN: usize = 10;

/// Parses an EV key such as `"-1.5"`, `"+1"` or `"0"` into a canonical tag.
pub fn parse_ev(s: &str) -> Option<f32> {
    let v: f32 = s.trim().parse().ok()?;
    CANONICAL_EVS.iter().copied().find(|&c| c == v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    /// `(ev, path)` pairs in ascending EV order.
    pub exposures: Vec<(f32, PathBuf)>,
    pub gt: PathBuf,
    /// `(height, width)` shared by every image of the scene.
    pub extents: (usize, usize),
}

impl SceneRecord {
    pub fn evs(&self) -> Vec<f32> {
        self.exposures.iter().map(|(ev, _)| *ev).collect()
    }

    pub fn path_for(&self, ev: f32) -> Option<&Path> {
        self.exposures.iter().find(|(e, _)| *e == ev).map(|(_, p)| p.as_path())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    scene_id: String,
    exposures: BTreeMap<String, String>,
    gt: Option<String>,
}

/// Loads and validates every record: EV tags must be canonical, every file
/// must exist, and all images of a scene must share extents.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut records: Vec<SceneRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::Manifest { line: idx + 1, message: e.to_string() })?;
        let record = validate_record(raw, root)?;
        if records.iter().any(|r| r.id == record.id) {
            return Err(Error::Scene { scene: record.id, message: "duplicate scene id".into() });
        }
        records.push(record);
    }
    Ok(records)
}

fn validate_record(raw: RawRecord, root: &Path) -> Result<SceneRecord> {
    let scene = raw.scene_id;
    let fail = |message: String| Error::Scene { scene: scene.clone(), message };
    let gt = raw.gt.ok_or_else(|| fail("missing ground-truth path".into()))?;
    if raw.exposures.is_empty() {
        return Err(fail("no exposures listed".into()));
    }
    let mut exposures = Vec::with_capacity(raw.exposures.len());
    for (key, rel) in raw.exposures {
        let ev = parse_ev(&key).ok_or_else(|| fail(format!("unknown EV tag `{key}`")))?;
        if exposures.iter().any(|(e, _)| *e == ev) {
            return Err(fail(format!("EV {ev} listed twice")));
        }
        exposures.push((ev, root.join(rel)));
    }
    exposures.sort_by(|a, b| a.0.total_cmp(&b.0));
    let gt = root.join(gt);
    let (gw, gh) = image_extents(&gt).map_err(|e| fail(e.to_string()))?;
    for (ev, p) in &exposures {
        let (w, h) = image_extents(p).map_err(|e| fail(e.to_string()))?;
        if (w, h) != (gw, gh) {
            return Err(fail(format!("EV {ev} image is {w}x{h} but ground truth is {gw}x{gh}")));
        }
    }
    Ok(SceneRecord { id: scene, exposures, gt, extents: (gh as usize, gw as usize) })
}

fn image_extents(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::Image { path: path.into(), message: "file not found".into() });
    }
    image::image_dimensions(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Evaluation task and the exposures it feeds the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskPreset {
    /// Each available exposure on its own.
    Sec,
    UnderEf,
    OverEf,
    Mef,
}

impl TaskPreset {
    pub const ALL: [TaskPreset; 4] = [TaskPreset::Sec, TaskPreset::UnderEf, TaskPreset::OverEf, TaskPreset::Mef];

    /// Fixed EV subset in ascending order; `None` for single-exposure runs.
    pub fn evs(self) -> Option<&'static [f32]> {
        match self {
            TaskPreset::Sec => None,
            TaskPreset::UnderEf => Some(&[-1.5, -1.0, 0.0]),
            TaskPreset::OverEf => Some(&[0.0, 1.0, 1.5]),
            TaskPreset::Mef => Some(&CANONICAL_EVS),
        }
    }

    /// Exposure sequences to run for `scene`.
    pub fn sequences(self, scene: &SceneRecord) -> Result<Vec<Vec<f32>>> {
        match self.evs() {
            None => Ok(scene.evs().into_iter().map(|ev| vec![ev]).collect()),
            Some(evs) => {
                if let Some(missing) = evs.iter().find(|ev| scene.path_for(**ev).is_none()) {
                    return Err(Error::Scene {
                        scene: scene.id.clone(),
                        message: format!("task {self} needs EV {missing}, which the scene lacks"),
                    });
                }
                Ok(vec![evs.to_vec()])
            }
        }
    }
}

impl fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskPreset::Sec => "sec",
            TaskPreset::UnderEf => "under-ef",
            TaskPreset::OverEf => "over-ef",
            TaskPreset::Mef => "mef",
        })
    }
}

impl FromStr for TaskPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskPreset::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected sec, under-ef, over-ef or mef)")))
    }
}

/// Draws a training subsequence: a length uniform in
/// `1..=min(10, 2 * available)`, then that many EVs drawn uniformly with
/// replacement.
pub fn sample_subsequence<R: Rng + ?Sized>(scene: &SceneRecord, rng: &mut R) -> Vec<f32> {
    sample_evs(&scene.evs(), rng)
}

/// [`sample_subsequence`] over an explicit list of available EVs.
pub fn sample_evs<R: Rng + ?Sized>(evs: &[f32], rng: &mut R) -> Vec<f32> {
    assert!(!evs.is_empty(), "sampling needs at least one exposure");
    let max_len = MAX_SEQUENCE_LEN.min(2 * evs.len());
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| evs[rng.random_range(0..evs.len())]).collect()
}

/// Reads an 8-bit RGB image as a `(1, 3, h, w)` tensor in `[0, 1]`,
/// optionally shrinking it so the longer side is at most `max_side`.
pub fn load_image(path: impl AsRef<Path>, max_side: Option<usize>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bad = |message: String| Error::Image { path: path.into(), message };
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(bad("file is empty".into()));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| bad(e.to_string()))?
        .into_rgb8();
    let img = match max_side {
        Some(cap) => shrink_to(img, cap),
        None => img,
    };
    Ok(rgb_to_tensor(&img))
}

fn shrink_to(img: RgbImage, cap: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let longest = w.max(h);
    if cap == 0 || longest <= cap {
        return img;
    }
    let scale = cap as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    image::imageops::resize(&img, nw, nh, FilterType::Triangle)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn4([1, 3, h, w], |_, c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
}

/// Quantizes the first batch item of a `(n, 3, h, w)` tensor to 8 bits:
/// clamp to `[0, 1]`, scale by 255, round half up.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = t.data();
    let mut raw = vec![0u8; plane * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = data[ch * plane + y * w + x];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                raw[(y * w + x) * 3 + ch] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to extents"))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// PNG bytes of a tensor quantized with [`tensor_to_rgb`].
pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

/// Saves a tensor as an 8-bit PNG, atomically.
pub fn save_png(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_png(t)?)
}

/// Decoded images of one scene.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub id: String,
    pub frames: Vec<(f32, Tensor<f32>)>,
    pub gt: Tensor<f32>,
}

impl LoadedScene {
    pub fn load(record: &SceneRecord, max_side: Option<usize>) -> Result<Self> {
        let frames =
            record.exposures.iter().map(|(ev, p)| Ok((*ev, load_image(p, max_side)?))).collect::<Result<Vec<_>>>()?;
        Ok(LoadedScene { id: record.id.clone(), frames, gt: load_image(&record.gt, max_side)? })
    }

    pub fn evs(&self) -> Vec<f32> {
        self.frames.iter().map(|(ev, _)| *ev).collect()
    }

    /// Stacks the frames tagged `evs`, in that order, into `(K, 3, h, w)`.
    pub fn stack(&self, evs: &[f32]) -> Result<Tensor<f32>> {
        let items = evs
            .iter()
            .map(|ev| {
                self.frames
                    .iter()
                    .find(|(e, _)| e == ev)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Scene { scene: self.id.clone(), message: format!("no frame at EV {ev}") })
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&items)
    }
}
