//! UNet-like correction blocks.
//!
//! Each encoder stage runs two 3x3 convolutions; stages are separated by
//! 2x2 average pooling and channels double per stage. Decoder stages
//! resize to the recorded encoder extents, apply a 3x3 convolution,
//! concatenate the matching encoder features and run two more 3x3
//! convolutions. A final linear 3x3 convolution maps back to RGB and,
//! with `global_residual`, the block input is added to the result.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::ops::ConvParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectionBlockConfig {
    /// Number of resolution stages in the encoder.
    pub levels: usize,
    /// Channels of the first encoder stage.
    pub base_channels: usize,
    pub global_residual: bool,
}

impl CorrectionBlockConfig {
    pub const fn new(levels: usize, base_channels: usize) -> Self {
        CorrectionBlockConfig { levels, base_channels, global_residual: true }
    }

    pub const LARGE: Self = Self::new(4, 24);
    pub const MEDIUM: Self = Self::new(4, 16);
    pub const SMALL: Self = Self::new(3, 16);

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::invalid(format!("degenerate correction config {self:?}")));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Smallest extent the block accepts.
    pub fn min_extent(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// `(in, out, kernel, stage)` of every convolution in execution order.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut layers = Vec::new();
        let mut cin = 3;
        for s in 0..self.levels {
            let c = self.channels(s);
            layers.push((cin, c, 3, s));
            layers.push((c, c, 3, s));
            cin = c;
        }
        for s in (0..self.levels - 1).rev() {
            let c = self.channels(s);
            layers.push((self.channels(s + 1), c, 3, s));
            layers.push((2 * c, c, 3, s));
            layers.push((c, c, 3, s));
        }
        layers.push((self.base_channels, 3, 3, 0));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o, k, _)| Conv2d::param_count(i, o, k)).sum()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let extents = crate::pyramid::level_extents(h, w, self.levels);
        self.layers().iter().map(|&(i, o, k, s)| Conv2d::macs(i, o, k, extents[s].0, extents[s].1)).sum()
    }
}

/// Per-level block sizes of the full model, coarsest level first. Depths
/// beyond four continue with the smallest block.
pub fn build_correction_schedule(n: usize) -> Vec<CorrectionBlockConfig> {
    use CorrectionBlockConfig as C;
    let known = [C::LARGE, C::MEDIUM, C::SMALL, C::SMALL];
    (0..n).map(|i| known.get(i).copied().unwrap_or(C::SMALL)).collect()
}

#[derive(Clone, Debug)]
pub struct CorrectionBlock {
    pub config: CorrectionBlockConfig,
    encoder: Vec<[Conv2d; 2]>,
    decoder: Vec<[Conv2d; 3]>,
    head: Conv2d,
}

impl CorrectionBlock {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: CorrectionBlockConfig) -> Result<Self> {
        config.validate()?;
        let same = ConvParams::same3(1);
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = 3;
        for s in 0..config.levels {
            let c = config.channels(s);
            encoder.push([
                Conv2d::register(store, &format!("{prefix}.enc{s}.conv0"), cin, c, 3, same)?,
                Conv2d::register(store, &format!("{prefix}.enc{s}.conv1"), c, c, 3, same)?,
            ]);
            cin = c;
        }
        let mut decoder = Vec::with_capacity(config.levels - 1);
        for s in 0..config.levels - 1 {
            let c = config.channels(s);
            decoder.push([
                Conv2d::register(store, &format!("{prefix}.dec{s}.up"), config.channels(s + 1), c, 3, same)?,
                Conv2d::register(store, &format!("{prefix}.dec{s}.conv0"), 2 * c, c, 3, same)?,
                Conv2d::register(store, &format!("{prefix}.dec{s}.conv1"), c, c, 3, same)?,
            ]);
        }
        let head = Conv2d::register(store, &format!("{prefix}.out"), config.base_channels, 3, 3, same)?;
        Ok(CorrectionBlock { config, encoder, decoder, head })
    }

    /// Final linear convolution back to RGB.
    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.encoder.iter().flatten().chain(self.decoder.iter().flatten()).chain(std::iter::once(&self.head))
    }

    /// Corrects every frame of `x` (`(N, 3, h, w)`) independently.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("correction block expects 3 channels, got {c}")));
        }
        let min = self.config.min_extent();
        if h < min || w < min {
            return Err(Error::shape(format!(
                "{h}x{w} input too small for a {}-stage correction block (needs {min}x{min})",
                self.config.levels
            )));
        }
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut cur = x;
        for (s, [c0, c1]) in self.encoder.iter().enumerate() {
            if s > 0 {
                cur = tape.avg_pool(cur, 2)?;
            }
            cur = c0.forward_act(tape, store, cur)?;
            cur = c1.forward_act(tape, store, cur)?;
            skips.push(cur);
        }
        for (s, [up, c0, c1]) in self.decoder.iter().enumerate().rev() {
            let (sh, sw) = tape.value(skips[s]).hw();
            let resized = tape.resize(cur, sh, sw)?;
            let upsampled = up.forward_act(tape, store, resized)?;
            let joined = tape.concat_channels(upsampled, skips[s])?;
            cur = c0.forward_act(tape, store, joined)?;
            cur = c1.forward_act(tape, store, cur)?;
        }
        let out = self.head.forward(tape, store, cur)?;
        if self.config.global_residual {
            tape.add(out, x)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_kaiming;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_prefixes() {
        use CorrectionBlockConfig as C;
        assert_eq!(build_correction_schedule(4), vec![C::LARGE, C::MEDIUM, C::SMALL, C::SMALL]);
        assert_eq!(build_correction_schedule(1), vec![C::LARGE]);
        assert_eq!(build_correction_schedule(4)[0], C::new(4, 24));
        assert_eq!(build_correction_schedule(4)[1], C::new(4, 16));
    }

    #[test]
    fn extents_preserved_for_all_configs() {
        use CorrectionBlockConfig as C;
        for cfg in [C::LARGE, C::MEDIUM, C::SMALL, C::new(2, 4)] {
            let mut store = ParamStore::<f32>::new();
            let block = CorrectionBlock::register(&mut store, "c", cfg).unwrap();
            init_kaiming(&mut store, 9).unwrap();
            for (h, w) in [(8, 8), (13, 11), (21, 8)] {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::full(&[2, 3, h, w], 0.5));
                let y = block.forward(&mut tape, &store, x).unwrap();
                assert_eq!(tape.value(y).shape(), &[2, 3, h, w]);
            }
        }
    }

    #[test]
    fn zero_parameters_with_residual_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let block = CorrectionBlock::register(&mut store, "c", CorrectionBlockConfig::SMALL).unwrap();
        let x = Tensor::from_fn(&[1, 3, 10, 12], |i| (i as f32 * 0.013).fract());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn too_small_input_rejected() {
        let mut store = ParamStore::<f32>::new();
        let block = CorrectionBlock::register(&mut store, "c", CorrectionBlockConfig::LARGE).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 7, 16]));
        assert!(block.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn channels_double_per_stage() {
        let mut store = ParamStore::<f32>::new();
        let block = CorrectionBlock::register(&mut store, "c", CorrectionBlockConfig::LARGE).unwrap();
        let enc_out: Vec<usize> = block.encoder.iter().map(|[_, c1]| c1.out_channels).collect();
        assert_eq!(enc_out, vec![24, 48, 96, 192]);
        let w = store.get(store.id("c.enc3.conv0.weight").unwrap()).value();
        assert_eq!(w.shape(), &[192, 96, 3, 3]);
        assert_eq!(store.num_scalars(), CorrectionBlockConfig::LARGE.param_count());
    }
}
