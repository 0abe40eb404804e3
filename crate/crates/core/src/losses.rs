//! Training objectives: full-resolution L1, Gaussian-pyramid L1 on the
//! intermediate outputs, and a region-contrast consistency term.
//!
//! Every loss is a sum over elements, not a mean, and per-level inputs are
//! ordered finest first (`O^1 .. O^n`).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::PyramidTarget;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LAMBDA: f64 = 4000.0;

/// Region grid used by the spatial consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialLossConfig {
    /// Side of a square region in pixels; border regions may be smaller.
    pub region_size: usize,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        SpatialLossConfig { region_size: 4 }
    }
}

impl SpatialLossConfig {
    /// Region grid extents for an `h x w` level.
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.region_size), w.div_ceil(self.region_size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: DEFAULT_LAMBDA }
    }
}

/// Weights of the pyramid reconstruction term for levels `2..=n`.
pub fn pyramid_level_weights(n: usize) -> Vec<f64> {
    (2..=n).map(|i| f64::powi(2.0, i as i32 - 2)).collect()
}

/// Weights of the spatial term for levels `1..=n`.
pub fn spatial_level_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|i| f64::powi(4.0, (n - i) as i32)).collect()
}

/// Which terms enter the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossTerms {
    Reconstruction,
    WithPyramid,
    /// Spatial term on the finest level only, with unit weight.
    WithFinestSpatial,
    #[default]
    All,
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerms::Reconstruction => "r",
            LossTerms::WithPyramid => "r+pr",
            LossTerms::WithFinestSpatial => "r+pr+s",
            LossTerms::All => "r+pr+ps",
        })
    }
}

impl FromStr for LossTerms {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(LossTerms::Reconstruction),
            "r+pr" => Ok(LossTerms::WithPyramid),
            "r+pr+s" => Ok(LossTerms::WithFinestSpatial),
            "r+pr+ps" => Ok(LossTerms::All),
            other => Err(Error::Config(format!("unknown loss terms `{other}`"))),
        }
    }
}

fn check_level<T: Real>(tape: &Tape<T>, o: Var, g: &Tensor<T>, what: &str) -> Result<()> {
    let got = tape.value(o).shape();
    if got != g.shape() {
        return Err(Error::shape(format!("{what}: output {got:?} vs target {:?}", g.shape())));
    }
    Ok(())
}

fn l1<T: Real>(tape: &mut Tape<T>, o: Var, g: &Tensor<T>) -> Result<Var> {
    let g = tape.constant(g.clone());
    let d = tape.sub(o, g)?;
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

/// `sum |O^1 - G|`.
pub fn loss_r<T: Real>(tape: &mut Tape<T>, o1: Var, gt: &Tensor<T>) -> Result<Var> {
    check_level(tape, o1, gt, "reconstruction loss")?;
    l1(tape, o1, gt)
}

fn check_levels<T: Real>(outputs: &[Var], target: &PyramidTarget<T>) -> Result<()> {
    if outputs.len() != target.levels.len() || outputs.is_empty() {
        return Err(Error::shape(format!(
            "{} output levels against a {}-level target",
            outputs.len(),
            target.levels.len()
        )));
    }
    Ok(())
}

/// Weighted L1 between `O^i` and `G^i` for `i = 2..=n`. `outputs` holds all
/// `n` levels; the finest is ignored. Zero when `n = 1`.
pub fn loss_pr<T: Real>(tape: &mut Tape<T>, outputs: &[Var], target: &PyramidTarget<T>) -> Result<Var> {
    check_levels(outputs, target)?;
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for (i, weight) in pyramid_level_weights(outputs.len()).into_iter().enumerate() {
        let level = i + 1;
        check_level(tape, outputs[level], &target.levels[level], "pyramid loss")?;
        let term = l1(tape, outputs[level], &target.levels[level])?;
        let term = tape.scale(term, T::of(weight));
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Unweighted spatial term of one level:
/// `(1/M) sum_j sum_{h in N(j)} (|O_h - O_j| - |G_h - G_j|)^2` over
/// 4-connected region pairs.
pub fn spatial_term<T: Real>(tape: &mut Tape<T>, o: Var, g: &Tensor<T>, cfg: SpatialLossConfig) -> Result<Var> {
    check_level(tape, o, g, "spatial loss")?;
    let (n, _, h, w) = g.dims4()?;
    if cfg.region_size == 0 || h == 0 || w == 0 || n != 1 {
        return Err(Error::invalid(format!(
            "empty region grid for a {h}x{w} level with region size {}",
            cfg.region_size
        )));
    }
    let (rh, rw) = cfg.grid(h, w);
    let regions_o = {
        let m = tape.channel_mean(o)?;
        tape.avg_pool(m, cfg.region_size)?
    };
    let regions_g = {
        let gv = tape.constant(g.clone());
        let m = tape.channel_mean(gv)?;
        tape.avg_pool(m, cfg.region_size)?
    };
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    // (dy, dx) offsets of the right and lower neighbours; each unordered pair
    // stands for two ordered ones.
    for (dy, dx) in [(0, 1), (1, 0)] {
        if rh <= dy || rw <= dx {
            continue;
        }
        let (ch, cw) = (rh - dy, rw - dx);
        let mut contrast = |r: Var| -> Result<Var> {
            let a = tape.crop(r, 0, 0, ch, cw)?;
            let b = tape.crop(r, dy, dx, ch, cw)?;
            let d = tape.sub(b, a)?;
            Ok(tape.abs(d))
        };
        let co = contrast(regions_o)?;
        let cg = contrast(regions_g)?;
        let diff = tape.sub(co, cg)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, T::of(2.0 / (rh * rw) as f64)))
}

/// Sum over levels of `4^{n-i}` times the spatial term of level `i`.
pub fn loss_ps<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    target: &PyramidTarget<T>,
    cfg: SpatialLossConfig,
) -> Result<Var> {
    check_levels(outputs, target)?;
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for (i, weight) in spatial_level_weights(outputs.len()).into_iter().enumerate() {
        let term = spatial_term(tape, outputs[i], &target.levels[i], cfg)?;
        let term = tape.scale(term, T::of(weight));
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Objective node plus the value of each unweighted term.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub r: f64,
    pub pr: f64,
    /// Spatial term before multiplying by lambda; the finest-level-only
    /// variant when that preset is active.
    pub ps: f64,
}

/// `L_r + L_pr + lambda * L_ps`, restricted to `terms`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    target: &PyramidTarget<T>,
    terms: LossTerms,
    weights: LossWeights,
    spatial: SpatialLossConfig,
) -> Result<LossBreakdown> {
    check_levels(outputs, target)?;
    let r = loss_r(tape, outputs[0], &target.levels[0])?;
    let mut total = r;
    let mut out = LossBreakdown { total, r: tape.scalar(r)?.f64(), pr: 0.0, ps: 0.0 };
    if terms != LossTerms::Reconstruction {
        let pr = loss_pr(tape, outputs, target)?;
        out.pr = tape.scalar(pr)?.f64();
        total = tape.add(total, pr)?;
    }
    let ps = match terms {
        LossTerms::WithFinestSpatial => Some(spatial_term(tape, outputs[0], &target.levels[0], spatial)?),
        LossTerms::All => Some(loss_ps(tape, outputs, target, spatial)?),
        _ => None,
    };
    if let Some(ps) = ps {
        out.ps = tape.scalar(ps)?.f64();
        let weighted = tape.scale(ps, T::of(weights.lambda));
        total = tape.add(total, weighted)?;
    }
    out.total = total;
    Ok(out)
}
