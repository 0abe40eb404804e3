//! The fusion block: weight maps are predicted at low resolution by a
//! stack of dilated convolutions, brought back to full resolution with a
//! guided filter, normalized across frames and used to blend the base
//! sequence.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::ops::ConvParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlockConfig {
    /// Number of dilated intermediate layers; layer `l` uses dilation `2l`.
    pub m: usize,
    pub channels: usize,
    /// Low-resolution extents are `ceil(side / downsample_factor)` ...
    pub downsample_factor: usize,
    /// ... but never below `min(side, min_lowres)`.
    pub min_lowres: usize,
    pub guided_radius: usize,
    pub guided_eps: f64,
}

impl Default for FusionBlockConfig {
    fn default() -> Self {
        FusionBlockConfig {
            m: 4,
            channels: 24,
            downsample_factor: 8,
            min_lowres: 8,
            guided_radius: 2,
            guided_eps: 1e-4,
        }
    }
}

impl FusionBlockConfig {
    pub fn with_m(m: usize) -> Self {
        FusionBlockConfig { m, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.downsample_factor == 0 || self.min_lowres == 0 {
            return Err(Error::invalid(format!("degenerate fusion config {self:?}")));
        }
        if self.guided_radius == 0 || !(self.guided_eps > 0.0) {
            return Err(Error::invalid("guided filter needs radius >= 1 and eps > 0"));
        }
        Ok(())
    }

    /// Extents at which weights are predicted for a `h x w` level.
    pub fn lowres_extents(&self, h: usize, w: usize) -> (usize, usize) {
        let f = self.downsample_factor;
        let side = |s: usize| s.div_ceil(f).max(s.min(self.min_lowres));
        (side(h), side(w))
    }

    /// `(in, out, kernel, dilation)` of every layer, input to output.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let c = self.channels;
        let mut layers = vec![(3, c, 3, 1)];
        layers.extend((1..=self.m).map(|l| (c, c, 3, 2 * l)));
        layers.push((c, c, 3, 1));
        layers.push((c, 3, 1, 1));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o, k, _)| Conv2d::param_count(i, o, k)).sum()
    }

    /// MACs for `frames` frames on a `h x w` level, evaluated at low resolution.
    pub fn macs(&self, frames: usize, h: usize, w: usize) -> u64 {
        let (lh, lw) = self.lowres_extents(h, w);
        let per_frame: u64 = self.layers().iter().map(|&(i, o, k, _)| Conv2d::macs(i, o, k, lh, lw)).sum();
        per_frame * frames as u64
    }

    /// Per-axis receptive field of the weight predictor.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers().iter().map(|&(_, _, k, d)| d * (k - 1)).sum::<usize>()
    }
}

/// Fast guided filter used as a joint upsampler.
///
/// `lowres` holds the maps to upsample `(K, C, h, w)`; `guide` holds the
/// full-resolution frames `(K, 3, H, W)`. The guide is the channel mean of
/// each frame. Linear coefficients are fitted at low resolution against
/// the bilinearly downsampled guide over clipped windows of radius `r`,
/// averaged over the windows covering each pixel, bilinearly upsampled and
/// applied to the full-resolution guide.
pub fn guided_upsample<T: Real>(tape: &mut Tape<T>, lowres: Var, guide: Var, r: usize, eps: f64) -> Result<Var> {
    if r == 0 || !(eps > 0.0) {
        return Err(Error::invalid(format!("guided filter needs r >= 1 and eps > 0 (r={r}, eps={eps})")));
    }
    let (k, c, lh, lw) = tape.value(lowres).dims4()?;
    let (gk, _, h, w) = tape.value(guide).dims4()?;
    if gk != k {
        return Err(Error::shape(format!("{k} maps but {gk} guide frames")));
    }
    let guide_full = tape.channel_mean(guide)?;
    let guide_low = tape.resize(guide_full, lh, lw)?;

    let mean_i = tape.box_mean(guide_low, r)?;
    let sq = tape.square(guide_low);
    let mean_ii = tape.box_mean(sq, r)?;
    let mean_i_sq = tape.square(mean_i);
    let var_i = tape.sub(mean_ii, mean_i_sq)?;

    let guide_c = tape.expand_channels(guide_low, c)?;
    let mean_i_c = tape.expand_channels(mean_i, c)?;
    let var_c = tape.expand_channels(var_i, c)?;
    let mean_p = tape.box_mean(lowres, r)?;
    let ip = tape.mul(guide_c, lowres)?;
    let mean_ip = tape.box_mean(ip, r)?;
    let mi_mp = tape.mul(mean_i_c, mean_p)?;
    let cov = tape.sub(mean_ip, mi_mp)?;
    let denom = tape.add_scalar(var_c, T::of(eps));
    let a = tape.div(cov, denom)?;
    let a_mi = tape.mul(a, mean_i_c)?;
    let b = tape.sub(mean_p, a_mi)?;

    let mean_a = tape.box_mean(a, r)?;
    let mean_b = tape.box_mean(b, r)?;
    let a_full = tape.resize(mean_a, h, w)?;
    let b_full = tape.resize(mean_b, h, w)?;
    let guide_full_c = tape.expand_channels(guide_full, c)?;
    let scaled = tape.mul(a_full, guide_full_c)?;
    tape.add(scaled, b_full)
}

/// `sum_k weights_k * frames_k`, reducing the batch axis to one frame.
pub fn fuse<T: Real>(tape: &mut Tape<T>, frames: Var, weights: Var) -> Result<Var> {
    let kf = tape.value(frames).shape()[0];
    let kw = tape.value(weights).shape()[0];
    if kf != kw {
        return Err(Error::shape(format!("{kw} weight maps for {kf} frames")));
    }
    let prod = tape.mul(weights, frames)?;
    tape.sum_batch(prod)
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub config: FusionBlockConfig,
    pub convs: Vec<Conv2d>,
}

pub struct FusionOutput {
    pub fused: Var,
    /// Normalized full-resolution weights; `None` for a single frame, whose
    /// weight is identically one.
    pub weights: Option<Var>,
}

impl FusionBlock {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: FusionBlockConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .layers()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k, d))| {
                let p = if k == 1 { ConvParams::new(1, 0, 1) } else { ConvParams::same3(d) };
                Conv2d::register(store, &format!("{prefix}.conv{i}"), cin, cout, k, p)
            })
            .collect::<Result<_>>()?;
        Ok(FusionBlock { config, convs })
    }

    /// Weight logits for every frame of `frames_lowres`, with shared parameters.
    pub fn predict_weights_lowres<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frames_lowres: Var,
    ) -> Result<Var> {
        let (k, c, _, _) = tape.value(frames_lowres).dims4()?;
        if k == 0 {
            return Err(Error::invalid("empty exposure sequence"));
        }
        if c != 3 {
            return Err(Error::shape(format!("fusion block expects 3 channels, got {c}")));
        }
        let (last, hidden) = self.convs.split_last().expect("at least three layers");
        let mut x = frames_lowres;
        for conv in hidden {
            x = conv.forward_act(tape, store, x)?;
        }
        last.forward(tape, store, x)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<FusionOutput> {
        let (k, _, h, w) = tape.value(frames).dims4()?;
        if k == 0 {
            return Err(Error::invalid("empty exposure sequence"));
        }
        if k == 1 {
            // Softmax over a single frame is exactly one.
            return Ok(FusionOutput { fused: frames, weights: None });
        }
        let (lh, lw) = self.config.lowres_extents(h, w);
        let low = tape.resize(frames, lh, lw)?;
        let logits = self.predict_weights_lowres(tape, store, low)?;
        let up = guided_upsample(tape, logits, frames, self.config.guided_radius, self.config.guided_eps)?;
        let weights = tape.softmax_batch(up)?;
        let fused = fuse(tape, frames, weights)?;
        Ok(FusionOutput { fused, weights: Some(weights) })
    }
}

/// Full-resolution weights for plain tensors (no gradient tracking).
pub fn weight_maps<T: Real>(block: &FusionBlock, store: &ParamStore<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(frames.clone());
    let out = block.forward(&mut tape, store, f)?;
    Ok(match out.weights {
        Some(w) => tape.value(w).clone(),
        None => Tensor::full(frames.shape(), T::one()),
    })
}
