//! The full coarse-to-fine network: pyramid decomposition, one
//! fusion/correction pair per level, and learned base-detail composition
//! between levels.
//!
//! Per-level vectors in this module are ordered coarsest level first
//! (level `n` down to level 1) unless stated otherwise.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::correction::{build_correction_schedule, CorrectionBlock, CorrectionBlockConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionBlockConfig};
use crate::nn::{self, Conv2d};
use crate::pyramid::{compose_base, level_extents, lp_decompose, LearnedUpsampler};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    FusionOnly,
    /// Corrects every frame separately and averages the results.
    CorrectionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOrder {
    FuseThenCorrect,
    /// At the coarsest level only, correct each frame before fusing.
    CorrectThenFuseCoarsest,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

string_enum!(Variant {
    Variant::Full => "full",
    Variant::FusionOnly => "fusion_only",
    Variant::CorrectionOnly => "correction_only",
});

string_enum!(BlockOrder {
    BlockOrder::FuseThenCorrect => "fuse_then_correct",
    BlockOrder::CorrectThenFuseCoarsest => "correct_then_fuse_level_n_only",
});

/// Named block-size schedules for a four-level model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizePreset {
    SmallSmall,
    SmallLarge,
    LargeLarge,
    LargeSmall,
}

string_enum!(SizePreset {
    SizePreset::SmallSmall => "small-small",
    SizePreset::SmallLarge => "small-large",
    SizePreset::LargeLarge => "large-large",
    SizePreset::LargeSmall => "large-small",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pyramid depth `n`.
    pub depth: usize,
    /// Intermediate-layer count of each fusion block, coarsest first.
    pub fusion_m: Vec<usize>,
    /// Correction block of each level, coarsest first.
    pub correction: Vec<CorrectionBlockConfig>,
    pub variant: Variant,
    pub order: BlockOrder,
    /// Settings shared by every fusion block; `m` is taken from `fusion_m`.
    pub fusion: FusionBlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_depth(4)
    }
}

impl ModelConfig {
    /// Default model truncated to `n` levels.
    pub fn with_depth(n: usize) -> Self {
        let m = [4, 3, 2, 1];
        ModelConfig {
            depth: n,
            fusion_m: (0..n).map(|i| m.get(i).copied().unwrap_or(1)).collect(),
            correction: build_correction_schedule(n),
            variant: Variant::Full,
            order: BlockOrder::FuseThenCorrect,
            fusion: FusionBlockConfig::default(),
        }
    }

    pub fn preset(p: SizePreset) -> Self {
        use CorrectionBlockConfig as C;
        let (m, corr) = match p {
            SizePreset::SmallSmall => (vec![1; 4], vec![C::SMALL; 4]),
            SizePreset::SmallLarge => (vec![1, 2, 3, 4], vec![C::SMALL, C::SMALL, C::MEDIUM, C::LARGE]),
            SizePreset::LargeLarge => (vec![4; 4], vec![C::LARGE; 4]),
            SizePreset::LargeSmall => return Self::default(),
        };
        ModelConfig { fusion_m: m, correction: corr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.fusion_m.len() != self.depth || self.correction.len() != self.depth {
            return Err(Error::Config(format!(
                "depth {} but {} fusion sizes and {} correction blocks",
                self.depth,
                self.fusion_m.len(),
                self.correction.len()
            )));
        }
        if self.order == BlockOrder::CorrectThenFuseCoarsest && self.variant != Variant::Full {
            return Err(Error::Config("block order swap requires the full variant".into()));
        }
        self.fusion.validate()?;
        self.correction.iter().try_for_each(CorrectionBlockConfig::validate)
    }

    pub fn has_fusion(&self) -> bool {
        self.variant != Variant::CorrectionOnly
    }

    pub fn has_correction(&self) -> bool {
        self.variant != Variant::FusionOnly
    }

    fn fusion_config(&self, level_idx: usize) -> FusionBlockConfig {
        FusionBlockConfig { m: self.fusion_m[level_idx], ..self.fusion.clone() }
    }

    /// Pyramid level number (1 = finest) of a coarsest-first index.
    pub fn level_number(&self, level_idx: usize) -> usize {
        self.depth - level_idx
    }

    /// Extents of every level, coarsest first.
    pub fn level_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut e = level_extents(h, w, self.depth);
        e.reverse();
        e
    }

    /// Rejects inputs too small for the pyramid or any correction block.
    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let min = 1usize << (self.depth - 1);
        if h < min || w < min {
            return Err(Error::shape(format!(
                "{h}x{w} input is too small for a {}-level pyramid (needs {min}x{min})",
                self.depth
            )));
        }
        if self.has_correction() {
            for (idx, (lh, lw)) in self.level_extents(h, w).into_iter().enumerate() {
                let need = self.correction[idx].min_extent();
                if lh < need || lw < need {
                    return Err(Error::shape(format!(
                        "{h}x{w} input gives {lh}x{lw} at level {}, below the {need}x{need} its correction block needs",
                        self.level_number(idx)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether the correction at `level_idx` runs on every frame.
    fn corrects_frames(&self, level_idx: usize) -> bool {
        self.variant == Variant::CorrectionOnly || (self.order == BlockOrder::CorrectThenFuseCoarsest && level_idx == 0)
    }
}

/// Number of learnable scalars of a model built from `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let mut total = (config.depth - 1) * LearnedUpsampler::param_count();
    for idx in 0..config.depth {
        if config.has_fusion() {
            total += config.fusion_config(idx).param_count();
        }
        if config.has_correction() {
            total += config.correction[idx].param_count();
        }
    }
    total
}

/// Convolution multiply-accumulates of one forward pass over `frames`
/// frames of `h x w`. Fusion blocks are counted at their low-resolution
/// extents and skipped for a single frame, matching execution.
pub fn count_flops(config: &ModelConfig, frames: usize, h: usize, w: usize) -> u64 {
    let extents = config.level_extents(h, w);
    let mut total = 0u64;
    for (idx, &(lh, lw)) in extents.iter().enumerate() {
        if config.has_fusion() && frames > 1 {
            total += config.fusion_config(idx).macs(frames, lh, lw);
        }
        if config.has_correction() {
            let copies = if config.corrects_frames(idx) { frames } else { 1 };
            total += copies as u64 * config.correction[idx].macs(lh, lw);
        }
        if let Some(&(ph, pw)) = extents.get(idx + 1) {
            total += Conv2d::macs(3, 3, 3, ph, pw);
        }
    }
    total
}

/// K frames of identical extents with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureSequence<T = f32> {
    frames: Tensor<T>,
    ev_tags: Option<Vec<f32>>,
}

impl<T: Real> ExposureSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, ev_tags: Option<Vec<f32>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("an exposure sequence needs at least one frame"));
        }
        let (_, _, h0, w0) = frames[0].dims4()?;
        for (i, f) in frames.iter().enumerate() {
            let (n, c, h, w) = f.dims4()?;
            if n != 1 || c != 3 {
                return Err(Error::shape(format!("frames must be (1, 3, h, w), got {:?}", f.shape())));
            }
            if (h, w) != (h0, w0) {
                return Err(Error::shape(format!("frame {i} has extents {h}x{w} but frame 0 has {h0}x{w0}")));
            }
            if f.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
                return Err(Error::invalid("frame values must lie in [0, 1]"));
            }
        }
        if let Some(tags) = &ev_tags {
            if tags.len() != frames.len() {
                return Err(Error::invalid(format!("{} EV tags for {} frames", tags.len(), frames.len())));
            }
        }
        let frames = Tensor::stack_batch(&frames)?;
        Ok(ExposureSequence { frames, ev_tags })
    }

    /// Wraps an already stacked `(K, 3, h, w)` tensor.
    pub fn from_stacked(frames: Tensor<T>) -> Result<Self> {
        let k = frames.dims4()?.0;
        let list = (0..k).map(|i| frames.batch_item(i)).collect::<Result<Vec<_>>>()?;
        Self::new(list, None)
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ev_tags(&self) -> Option<&[f32]> {
        self.ev_tags.as_deref()
    }

    pub fn extents(&self) -> (usize, usize) {
        self.frames.hw()
    }
}

/// Tape handles produced by [`FcNet::forward`].
pub struct ForwardOutput {
    /// Final full-resolution output `O^1`.
    pub output: Var,
    /// `O^n .. O^1`, coarsest first.
    pub levels: Vec<Var>,
    /// `F^n .. F^1`, coarsest first.
    pub fused: Vec<Var>,
}

impl ForwardOutput {
    /// `O^1 .. O^n`, finest first, the order the losses take.
    pub fn levels_finest_first(&self) -> Vec<Var> {
        self.levels.iter().rev().copied().collect()
    }
}

/// Plain-tensor results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub output: Tensor<T>,
    pub levels: Vec<Tensor<T>>,
    pub fused: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct FcNet {
    pub config: ModelConfig,
    fusion: Vec<Option<FusionBlock>>,
    correction: Vec<Option<CorrectionBlock>>,
    upsamplers: Vec<LearnedUpsampler>,
}

impl FcNet {
    /// Registers every parameter (zero-filled) in `store`. Names form a tree
    /// keyed by pyramid level, e.g. `l4.corr.enc0.conv0.weight`.
    pub fn register<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut fusion = Vec::with_capacity(config.depth);
        let mut correction = Vec::with_capacity(config.depth);
        let mut upsamplers = Vec::with_capacity(config.depth - 1);
        for idx in 0..config.depth {
            let level = config.level_number(idx);
            fusion.push(if config.has_fusion() {
                Some(FusionBlock::register(store, &format!("l{level}.fuse"), config.fusion_config(idx))?)
            } else {
                None
            });
            correction.push(if config.has_correction() {
                Some(CorrectionBlock::register(store, &format!("l{level}.corr"), config.correction[idx])?)
            } else {
                None
            });
            if level > 1 {
                upsamplers.push(LearnedUpsampler::register(store, &format!("l{level}.up"))?);
            }
        }
        Ok(FcNet { config, fusion, correction, upsamplers })
    }

    /// A fresh store holding a Kaiming-initialized model whose learned
    /// upsamplers start as plain bilinear resizing and whose residual
    /// correction blocks start as the identity.
    pub fn init<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::register(config, &mut store)?;
        nn::init_kaiming(&mut store, seed)?;
        for up in &net.upsamplers {
            up.conv.set_identity(&mut store)?;
        }
        for block in net.correction_blocks().filter(|b| b.config.global_residual) {
            block.head().set_zero(&mut store)?;
        }
        Ok((net, store))
    }

    pub fn upsamplers(&self) -> &[LearnedUpsampler] {
        &self.upsamplers
    }

    pub fn fusion_blocks(&self) -> impl Iterator<Item = &FusionBlock> {
        self.fusion.iter().flatten()
    }

    pub fn correction_blocks(&self) -> impl Iterator<Item = &CorrectionBlock> {
        self.correction.iter().flatten()
    }

    fn fuse_level<T: Real>(&self, idx: usize, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let block = self.fusion[idx].as_ref().expect("variant has fusion");
        Ok(block.forward(tape, store, seq)?.fused)
    }

    fn correct_level<T: Real>(&self, idx: usize, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.correction[idx].as_ref().expect("variant has correction").forward(tape, store, x)
    }

    /// Returns `(F^i, O^i)` for one level.
    fn level_forward<T: Real>(
        &self,
        idx: usize,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: Var,
    ) -> Result<(Var, Var)> {
        match self.config.variant {
            Variant::FusionOnly => {
                let f = self.fuse_level(idx, tape, store, seq)?;
                Ok((f, f))
            }
            Variant::CorrectionOnly => {
                let k = tape.value(seq).shape()[0];
                let corrected = self.correct_level(idx, tape, store, seq)?;
                let sum = tape.sum_batch(corrected)?;
                let mean = tape.scale(sum, T::one() / T::of(k as f64));
                Ok((mean, mean))
            }
            Variant::Full if self.config.corrects_frames(idx) => {
                let corrected = self.correct_level(idx, tape, store, seq)?;
                let f = self.fuse_level(idx, tape, store, corrected)?;
                Ok((f, f))
            }
            Variant::Full => {
                let f = self.fuse_level(idx, tape, store, seq)?;
                let o = self.correct_level(idx, tape, store, f)?;
                Ok((f, o))
            }
        }
    }

    /// Records a forward pass over `frames` (`(K, 3, h, w)`) on `tape`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frames: &Tensor<T>,
    ) -> Result<ForwardOutput> {
        let (k, c, h, w) = frames.dims4()?;
        if k == 0 || c != 3 {
            return Err(Error::shape(format!("expected (K >= 1, 3, h, w) frames, got {:?}", frames.shape())));
        }
        self.config.check_extents(h, w)?;
        let stack = lp_decompose(frames, self.config.depth)?;
        let mut seq = tape.constant(stack.base);
        let mut levels = Vec::with_capacity(self.config.depth);
        let mut fused = Vec::with_capacity(self.config.depth);
        for idx in 0..self.config.depth {
            let (f, o) = self.level_forward(idx, tape, store, seq)?;
            fused.push(f);
            levels.push(o);
            let level = self.config.level_number(idx);
            if level > 1 {
                let details = tape.constant(stack.details[level - 2].clone());
                seq = compose_base(tape, store, o, details, &self.upsamplers[idx])?;
            }
        }
        Ok(ForwardOutput { output: *levels.last().expect("depth >= 1"), levels, fused })
    }

    /// Forward pass without gradient bookkeeping for the caller.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, seq: &ExposureSequence<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, seq.frames())?;
        Ok(Prediction {
            output: tape.value(out.output).clone(),
            levels: out.levels.iter().map(|&v| tape.value(v).clone()).collect(),
            fused: out.fused.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}
