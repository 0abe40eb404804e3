//! Convolution layers backed by parameters in a [`ParamStore`].

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::ops::ConvParams;
use crate::optim::kaiming_init;
use crate::tensor::{Real, Tensor};

/// Negative-branch slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub params: ConvParams,
}

impl Conv2d {
    /// Registers `<name>.weight` and `<name>.bias`, both zero-filled.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        params: ConvParams,
    ) -> Result<Self> {
        let weight =
            store.register(format!("{name}.weight"), Tensor::zeros(&[out_channels, in_channels, kernel, kernel]))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel, params })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.params)
    }

    /// Convolution followed by LeakyReLU.
    pub fn forward_act<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.leaky_relu(y, T::of(LEAKY_SLOPE)))
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        in_channels * out_channels * kernel * kernel + out_channels
    }

    /// Multiply-accumulates for one output plane set of `oh x ow`.
    pub fn macs(in_channels: usize, out_channels: usize, kernel: usize, oh: usize, ow: usize) -> u64 {
        (in_channels * out_channels * kernel * kernel) as u64 * (oh * ow) as u64
    }

    /// Sets the weight to the channel-wise identity (single centre tap) and
    /// the bias to zero. Requires equal channel counts and an odd kernel.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = self.kernel / 2;
        let w = Tensor::from_fn4([self.out_channels, self.in_channels, self.kernel, self.kernel], |o, i, y, x| {
            if o == i && y == c && x == c {
                T::one()
            } else {
                T::zero()
            }
        });
        store.get_mut(self.weight).set_value(w)?;
        store.get_mut(self.bias).set_value(Tensor::zeros(&[self.out_channels]))
    }

    pub fn set_zero<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let shape = store.get(self.weight).value().shape().to_vec();
        store.get_mut(self.weight).set_value(Tensor::zeros(&shape))?;
        store.get_mut(self.bias).set_value(Tensor::zeros(&[self.out_channels]))
    }
}

/// Kaiming-normal weights for every `*.weight` tensor, zero biases.
///
/// Each tensor draws from its own stream derived from `seed` and its
/// registration index, so the result does not depend on tensor sizes.
pub fn init_kaiming<T: Real>(store: &mut ParamStore<T>, seed: u64) -> Result<()> {
    for (i, p) in store.iter_mut().enumerate() {
        let shape = p.value().shape().to_vec();
        if p.name().ends_with(".weight") && shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            let stream = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            p.set_value(kaiming_init(&shape, fan_in, stream)?)?;
        } else {
            p.set_value(Tensor::zeros(&shape))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_param_count() {
        assert_eq!(Conv2d::param_count(3, 24, 3), 672);
        assert_eq!(Conv2d::macs(1, 1, 3, 8, 8), 576);
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::register(&mut store, "c", 3, 3, 3, ConvParams::same3(1)).unwrap();
        init_kaiming(&mut store, 3).unwrap();
        conv.set_identity(&mut store).unwrap();
        let x = Tensor::from_fn(&[1, 3, 5, 4], |i| i as f32 * 0.01);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}
