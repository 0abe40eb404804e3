//! Training loop: per-scene subsequence sampling, loss, Adam and
//! checkpointing, all driven by one seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::TrainConfig;
use crate::data::{load_manifest, sample_evs, LoadedScene};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights, SpatialLossConfig};
use crate::model::{FcNet, ModelConfig};
use crate::optim::AdamState;
use crate::pyramid::gaussian_pyramid;

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    pub scene_id: String,
    pub frames: usize,
    pub lr: f64,
    pub l_r: f64,
    pub l_pr: f64,
    pub l_ps: f64,
    pub total: f64,
}

/// The sampler stream is kept apart from the initialization stream so the
/// two never share random words.
fn sampler_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub struct Trainer {
    pub net: FcNet,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    scenes: Vec<LoadedScene>,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig, scenes: Vec<LoadedScene>) -> Result<Self> {
        config.validate()?;
        let (net, params) = FcNet::init(model, config.seed)?;
        let adam = AdamState::new(&params, config.lr);
        let trainer = Trainer { net, params, adam, rng: sampler_rng(config.seed), epoch: 0, step: 0, scenes, config };
        trainer.check_scenes()?;
        Ok(trainer)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, scenes: Vec<LoadedScene>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::<f32>::new();
        let net = FcNet::register(ckpt.model.clone(), &mut store)?;
        if store.len() != ckpt.params.len()
            || store.iter().zip(ckpt.params.iter()).any(|((_, a), (_, b))| a.name() != b.name())
        {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        let adam = match ckpt.optimizer {
            Some(a) => a,
            None => AdamState::new(&ckpt.params, config.lr),
        };
        let trainer = Trainer {
            net,
            params: ckpt.params,
            adam,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            scenes,
            config,
        };
        trainer.check_scenes()?;
        Ok(trainer)
    }

    fn check_scenes(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::invalid("no training scenes"));
        }
        for s in &self.scenes {
            let (h, w) = s.gt.hw();
            self.net
                .config
                .check_extents(h, w)
                .map_err(|e| Error::Scene { scene: s.id.clone(), message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn scenes(&self) -> &[LoadedScene] {
        &self.scenes
    }

    fn loss_graph(&self, tape: &mut Tape<f32>, index: usize, evs: &[f32]) -> Result<LossBreakdown> {
        let scene = &self.scenes[index];
        let frames = scene.stack(evs)?;
        let target = gaussian_pyramid(&scene.gt, self.net.config.depth)?;
        let out = self.net.forward(tape, &self.params, &frames)?;
        total_loss(
            tape,
            &out.levels_finest_first(),
            &target,
            self.config.loss_terms,
            LossWeights { lambda: self.config.lambda },
            SpatialLossConfig { region_size: self.config.region_size },
        )
    }

    /// Training loss of the current parameters on `evs` of scene `index`, without an update.
    pub fn evaluate_loss(&self, index: usize, evs: &[f32]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_graph(&mut tape, index, evs)?;
        Ok(f64::from(tape.scalar(loss.total)?))
    }

    /// One optimizer step on `evs` of scene `index`.
    pub fn train_step(&mut self, index: usize, evs: &[f32]) -> Result<StepLog> {
        let mut tape = Tape::new();
        let loss = self.loss_graph(&mut tape, index, evs)?;
        let total = f64::from(tape.scalar(loss.total)?);
        if !total.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {}", self.step + 1)));
        }
        self.params.zero_grad();
        tape.backward(loss.total, &mut self.params)?;
        self.adam.lr = self.config.schedule().lr_at_epoch(self.epoch as usize + 1);
        self.adam.step(&mut self.params)?;
        self.step += 1;
        Ok(StepLog {
            epoch: self.epoch + 1,
            step: self.step,
            scene_id: self.scenes[index].id.clone(),
            frames: evs.len(),
            lr: self.adam.lr,
            l_r: loss.r,
            l_pr: loss.pr,
            l_ps: loss.ps,
            total,
        })
    }

    /// One pass over every scene in a freshly shuffled order, calling
    /// `on_step` after each update.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut logs = Vec::with_capacity(order.len());
        for idx in order {
            let evs = sample_evs(&self.scenes[idx].evs(), &mut self.rng);
            let log = self.train_step(idx, &evs)?;
            on_step(&log)?;
            logs.push(log);
        }
        self.epoch += 1;
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }
}

/// Name of the checkpoint always holding the most recent state.
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_LOG: &str = "loss_log.jsonl";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub first_loss: f64,
    pub last_epoch_mean_loss: f64,
}

/// Trains on every scene of `manifest` for the configured epochs, writing
/// `epoch_NNNN.ckpt`, [`LAST_CHECKPOINT`] and a JSON-lines [`LOSS_LOG`]
/// into `out_dir`.
pub fn train(manifest: &Path, model: ModelConfig, config: TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let records = load_manifest(manifest)?;
    let scenes = records.iter().map(|r| LoadedScene::load(r, config.max_side())).collect::<Result<Vec<_>>>()?;
    let trainer = Trainer::new(model, config, scenes)?;
    run(trainer, out_dir)
}

/// Runs `trainer` until its configured epoch count, logging and saving
/// into `out_dir`.
pub fn run(mut trainer: Trainer, out_dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let file = File::options()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut first_loss = f64::NAN;
    let mut last_mean = f64::NAN;
    let last = out_dir.join(LAST_CHECKPOINT);
    let epochs = trainer.config.epochs as u64;
    while trainer.epoch < epochs {
        let logs = trainer.run_epoch(|entry| {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
        })?;
        if first_loss.is_nan() {
            first_loss = logs[0].total;
        }
        last_mean = logs.iter().map(|l| l.total).sum::<f64>() / logs.len() as f64;
        let every = trainer.config.checkpoint_every as u64;
        let is_last = trainer.epoch == epochs;
        if is_last || (every > 0 && trainer.epoch.is_multiple_of(every)) {
            let ckpt = trainer.checkpoint();
            ckpt.save(out_dir.join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
            ckpt.save(&last)?;
        }
    }
    Ok(TrainSummary { steps: trainer.step, final_checkpoint: last, first_loss, last_epoch_mean_loss: last_mean })
}
