//! Line-oriented `key = value` configuration for the model and training.
//!
//! Blank lines and lines starting with `#` are ignored. Model and training
//! keys may share one file; unknown keys are rejected. A `preset` key picks
//! a block-size schedule before individual keys override it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::correction::CorrectionBlockConfig;
use crate::data::DEFAULT_MAX_SIDE;
use crate::error::{Error, Result};
use crate::losses::{LossTerms, SpatialLossConfig, DEFAULT_LAMBDA};
use crate::model::{ModelConfig, SizePreset};
use crate::optim::StepDecay;

/// Raw `key = value` pairs not yet consumed by a typed parser.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{key}` given twice", idx + 1)));
            }
        }
        Ok(ConfigMap { entries })
    }

    /// Sets or replaces one key, as a command-line override would.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.entries
            .remove(key)
            .map(|raw| raw.parse::<V>().map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}"))))
            .transpose()
    }

    fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        let Some(raw) = self.entries.remove(key) else { return Ok(None) };
        raw.split(',')
            .map(|item| item.trim().parse::<V>().map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Fails if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
}

/// A correction block written as `<levels>x<base_channels>`, e.g. `4x24`.
struct BlockSpec(CorrectionBlockConfig);

impl FromStr for BlockSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (l, c) = s.split_once('x').ok_or("expected <levels>x<channels>")?;
        let levels = l.parse().map_err(|_| format!("bad level count `{l}`"))?;
        let channels = c.parse().map_err(|_| format!("bad channel count `{c}`"))?;
        Ok(BlockSpec(CorrectionBlockConfig::new(levels, channels)))
    }
}

impl ModelConfig {
    /// Consumes the model keys of `map`.
    pub fn from_map(map: &mut ConfigMap) -> Result<Self> {
        let preset: Option<SizePreset> = map.take("preset")?;
        let depth: Option<usize> = map.take("depth")?;
        let mut cfg = match (preset, depth) {
            (Some(p), Some(d)) if d != 4 => {
                return Err(Error::Config(format!("preset {p} is four levels deep, not {d}")));
            }
            (Some(p), _) => ModelConfig::preset(p),
            (None, d) => ModelConfig::with_depth(d.unwrap_or(4)),
        };
        if let Some(m) = map.take_list("fusion_m")? {
            cfg.fusion_m = m;
        }
        if let Some(blocks) = map.take_list::<BlockSpec>("correction")? {
            cfg.correction = blocks.into_iter().map(|b| b.0).collect();
        }
        if let Some(residual) = map.take::<bool>("correction_residual")? {
            cfg.correction.iter_mut().for_each(|c| c.global_residual = residual);
        }
        if let Some(v) = map.take("variant")? {
            cfg.variant = v;
        }
        if let Some(o) = map.take("order")? {
            cfg.order = o;
        }
        let f = &mut cfg.fusion;
        if let Some(v) = map.take("fusion_channels")? {
            f.channels = v;
        }
        if let Some(v) = map.take("fusion_downsample")? {
            f.downsample_factor = v;
        }
        if let Some(v) = map.take("fusion_min_lowres")? {
            f.min_lowres = v;
        }
        if let Some(v) = map.take("guided_radius")? {
            f.guided_radius = v;
        }
        if let Some(v) = map.take("guided_eps")? {
            f.guided_eps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::parse(text)?;
        let cfg = Self::from_map(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }

    /// Every model field in `key = value` form; parses back to `self`.
    pub fn to_text(&self) -> String {
        let join = |items: Vec<String>| items.join(",");
        let residual = self.correction.iter().all(|c| c.global_residual);
        let mut s = String::new();
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "fusion_m = {}", join(self.fusion_m.iter().map(|m| m.to_string()).collect()));
        let _ = writeln!(
            s,
            "correction = {}",
            join(self.correction.iter().map(|c| format!("{}x{}", c.levels, c.base_channels)).collect())
        );
        let _ = writeln!(s, "correction_residual = {residual}");
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(s, "fusion_channels = {}", self.fusion.channels);
        let _ = writeln!(s, "fusion_downsample = {}", self.fusion.downsample_factor);
        let _ = writeln!(s, "fusion_min_lowres = {}", self.fusion.min_lowres);
        let _ = writeln!(s, "guided_radius = {}", self.fusion.guided_radius);
        let _ = writeln!(s, "guided_eps = {:?}", self.fusion.guided_eps);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub loss_terms: LossTerms,
    pub region_size: usize,
    pub seed: u64,
    /// Longest image side after loading; 0 keeps full resolution.
    pub max_side: usize,
    /// Write a checkpoint every this many epochs; the last epoch is always
    /// written. 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.8,
            lr_decay_every: 50,
            epochs: 150,
            batch_size: 1,
            lambda: DEFAULT_LAMBDA,
            loss_terms: LossTerms::All,
            region_size: SpatialLossConfig::default().region_size,
            seed: 0,
            max_side: DEFAULT_MAX_SIDE,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn from_map(map: &mut ConfigMap) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        macro_rules! field {
            ($($name:ident),+) => {$(
                if let Some(v) = map.take(stringify!($name))? {
                    cfg.$name = v;
                }
            )+};
        }
        field!(
            lr,
            lr_decay,
            lr_decay_every,
            epochs,
            batch_size,
            lambda,
            loss_terms,
            region_size,
            seed,
            max_side,
            checkpoint_every
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::parse(text)?;
        let cfg = Self::from_map(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size != 1 {
            return bad("only batch_size = 1 is supported");
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be positive and lr_decay_every at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.region_size == 0 {
            return bad("region_size must be at least 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { initial: self.lr, factor: self.lr_decay, every: self.lr_decay_every }
    }

    pub fn max_side(&self) -> Option<usize> {
        (self.max_side > 0).then_some(self.max_side)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {:?}\nlr_decay = {:?}\nlr_decay_every = {}\nepochs = {}\nbatch_size = {}\nlambda = {:?}\n\
             loss_terms = {}\nregion_size = {}\nseed = {}\nmax_side = {}\ncheckpoint_every = {}\n",
            self.lr,
            self.lr_decay,
            self.lr_decay_every,
            self.epochs,
            self.batch_size,
            self.lambda,
            self.loss_terms,
            self.region_size,
            self.seed,
            self.max_side,
            self.checkpoint_every
        )
    }
}

/// Parses a combined file into model and training settings, applying
/// `overrides` (key, value) after the file's own keys.
pub fn parse_combined(text: &str, overrides: &[(&str, String)]) -> Result<(ModelConfig, TrainConfig)> {
    let mut map = ConfigMap::parse(text)?;
    for (k, v) in overrides {
        map.set(k, v);
    }
    let model = ModelConfig::from_map(&mut map)?;
    let train = TrainConfig::from_map(&mut map)?;
    map.finish()?;
    Ok((model, train))
}
