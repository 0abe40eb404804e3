//! Per-scene evaluation of a trained model on a task preset.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::data::{LoadedScene, SceneRecord, TaskPreset};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::{ExposureSequence, FcNet};
use crate::tensor::Tensor;

/// Environment variable overriding the evaluation worker count.
pub const WORKERS_ENV: &str = "FCNET_WORKERS";

/// Summary row id in reports.
pub const MEAN_ROW: &str = "mean";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scene_id: String,
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

impl EvalReport {
    /// Per-scene rows followed by the mean row, one JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .chain(std::iter::once(&self.mean))
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }
}

/// What produces the image compared against ground truth.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model {
        net: &'a FcNet,
        params: &'a ParamStore<f32>,
    },
    /// Returns the ground truth itself; checks the metric plumbing.
    Identity,
}

impl Predictor<'_> {
    fn predict(&self, frames: Tensor<f32>, gt: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Predictor::Identity => Ok(gt.clone()),
            Predictor::Model { net, params } => {
                let seq = ExposureSequence::from_stacked(frames)?;
                Ok(net.predict(params, &seq)?.output)
            }
        }
    }
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Metrics of one scene; single-exposure tasks average over every
/// available exposure run on its own.
pub fn evaluate_scene(
    predictor: Predictor<'_>,
    record: &SceneRecord,
    task: TaskPreset,
    max_side: Option<usize>,
) -> Result<MetricsRow> {
    let sequences = task.sequences(record)?;
    let scene = LoadedScene::load(record, max_side)?;
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for evs in &sequences {
        let out = predictor
            .predict(scene.stack(evs)?, &scene.gt)
            .map_err(|e| Error::Scene { scene: record.id.clone(), message: e.to_string() })?;
        p_sum += psnr(&out, &scene.gt)?;
        s_sum += ssim(&out, &scene.gt)?;
    }
    let n = sequences.len() as f64;
    Ok(MetricsRow { scene_id: record.id.clone(), task: task.to_string(), psnr: p_sum / n, ssim: s_sum / n })
}

/// Evaluates every scene on `workers` threads; rows keep manifest order.
pub fn evaluate(
    predictor: Predictor<'_>,
    records: &[SceneRecord],
    task: TaskPreset,
    max_side: Option<usize>,
    workers: usize,
) -> Result<EvalReport> {
    let slots: Vec<Mutex<Option<Result<MetricsRow>>>> = records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, records.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = records.get(i) else { break };
                let row = evaluate_scene(predictor, record, task, max_side);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(row);
            });
        }
    });
    let rows = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every scene visited"))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let mean = MetricsRow {
        scene_id: MEAN_ROW.into(),
        task: task.to_string(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    Ok(EvalReport { rows, mean })
}

/// PSNR of the best single input frame against ground truth, the score a
/// method that merely picks one exposure would reach.
pub fn best_input_psnr(scene: &LoadedScene) -> Result<f64> {
    scene.frames.iter().map(|(_, f)| psnr(f, &scene.gt)).try_fold(f64::NEG_INFINITY, |best, p| Ok(best.max(p?)))
}

/// Writes `report` as JSON lines to `path` atomically.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    crate::data::write_atomic(path, report.to_jsonl().as_bytes())
}
