//! Parameter initialization and first-order optimization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Samples `N(0, 2 / fan_in)` into a tensor of `shape`.
pub fn kaiming_init<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("kaiming_init: fan_in must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Ok(Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng))))
}

/// Adam moments and hyper-parameters. Moments are kept in the parameter
/// store's registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments with the default `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update using the store's current gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors but the store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let corr1 = T::of(1.0 - self.beta1.powi(t));
        let corr2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((param, m), v) in store.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let (value, grad) = param.value_and_grad_mut();
            value.expect_same_shape(m)?;
            for (((theta, &g), mi), vi) in
                value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `initial * factor^floor((epoch - 1) / every)` for 1-based epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.every.max(1);
        self.initial * self.factor.powi(drops as i32)
    }
}
