//! Helpers shared by the integration tests: seeded noise and a central
//! finite-difference gradient checker.

#![allow(dead_code)]

pub mod grad_cases;
pub mod oracles;

use fcnet::autodiff::{ParamStore, Tape, Var};
use fcnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn uniform_f32(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub samples: usize,
    /// Extra entries to try when a sample sits next to a kink.
    pub resamples: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, rel_tol: 1e-3, samples: 24, resamples: 8, seed: 1 }
    }
}

impl GradCheck {
    pub fn with_tol(rel_tol: f64) -> Self {
        GradCheck { rel_tol, ..Self::default() }
    }
}

#[derive(Debug, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub kinks_skipped: usize,
    pub worst_rel: f64,
}

/// Outcome of comparing one analytic entry with finite differences.
enum Entry {
    Pass(f64),
    Kink,
    Fail(String),
}

impl GradCheck {
    /// `fd(h)` returns the central difference with step `h`.
    fn judge(&self, analytic: f64, f0: f64, fd: impl Fn(f64) -> f64) -> Entry {
        // Rounding noise of a central difference scales like eps * |f| / h.
        let noise = |h: f64| 64.0 * f64::EPSILON * f0.abs().max(1.0) / h;
        let rel = |a: f64, n: f64, h: f64| {
            let err = (a - n).abs() - noise(h);
            if err <= 0.0 {
                0.0
            } else {
                err / a.abs().max(n.abs()).max(1e-12)
            }
        };
        let numeric = fd(self.step);
        let r = rel(analytic, numeric, self.step);
        if r <= self.rel_tol {
            return Entry::Pass(r);
        }
        // A smooth point gives the same slope at a finer step; a kink
        // inside the stencil does not.
        let fine = fd(self.step / 10.0);
        if rel(numeric, fine, self.step / 10.0) > self.rel_tol {
            return Entry::Kink;
        }
        Entry::Fail(format!("analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {r:.3e})"))
    }

    fn pick(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if len <= self.samples {
            (0..len).collect()
        } else {
            (0..self.samples + self.resamples).map(|_| rng.random_range(0..len)).collect()
        }
    }

    /// Checks d f / d inputs, where `f` records a scalar on a tape.
    pub fn inputs<F>(&self, inputs: &[Tensor<f64>], f: F) -> std::result::Result<CheckStats, String>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
            let out = f(&mut tape, &vars).expect("forward");
            tape.scalar(out).expect("scalar output")
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        let f0 = tape.scalar(out).map_err(|e| e.to_string())?;
        let grads = tape.gradients(out).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut stats = CheckStats::default();
        for (i, v) in vars.iter().enumerate() {
            let zero = Tensor::zeros(inputs[i].shape());
            let g = grads.get(*v).unwrap_or(&zero);
            let mut wanted = self.samples.min(inputs[i].len());
            for idx in self.pick(inputs[i].len(), &mut rng) {
                if wanted == 0 {
                    break;
                }
                let fd = |h: f64| {
                    let mut vals = inputs.to_vec();
                    vals[i].data_mut()[idx] += h;
                    let up = eval(&vals);
                    vals[i].data_mut()[idx] -= 2.0 * h;
                    (up - eval(&vals)) / (2.0 * h)
                };
                match self.judge(g.data()[idx], f0, fd) {
                    Entry::Pass(r) => {
                        stats.checked += 1;
                        stats.worst_rel = stats.worst_rel.max(r);
                        wanted -= 1;
                    }
                    Entry::Kink => stats.kinks_skipped += 1,
                    Entry::Fail(msg) => return Err(format!("input {i}[{idx}]: {msg}")),
                }
            }
        }
        Ok(stats)
    }

    /// Checks d f / d every parameter tensor of `store`.
    pub fn params<F>(&self, store: &ParamStore<f64>, f: F) -> std::result::Result<CheckStats, String>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let eval = |s: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let out = f(&mut tape, s).expect("forward");
            tape.scalar(out).expect("scalar output")
        };
        let mut analytic = store.clone();
        analytic.zero_grad();
        let mut tape = Tape::new();
        let out = f(&mut tape, &analytic).map_err(|e| e.to_string())?;
        let f0 = tape.scalar(out).map_err(|e| e.to_string())?;
        tape.backward(out, &mut analytic).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut stats = CheckStats::default();
        for (id, p) in analytic.iter() {
            let len = p.value().len();
            let mut wanted = self.samples.min(len);
            for idx in self.pick(len, &mut rng) {
                if wanted == 0 {
                    break;
                }
                let fd = |h: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).value_mut().data_mut()[idx] += h;
                    let up = eval(&s);
                    s.get_mut(id).value_mut().data_mut()[idx] -= 2.0 * h;
                    (up - eval(&s)) / (2.0 * h)
                };
                match self.judge(p.grad().data()[idx], f0, fd) {
                    Entry::Pass(r) => {
                        stats.checked += 1;
                        stats.worst_rel = stats.worst_rel.max(r);
                        wanted -= 1;
                    }
                    Entry::Kink => stats.kinks_skipped += 1,
                    Entry::Fail(msg) => return Err(format!("{}[{idx}]: {msg}", p.name())),
                }
            }
        }
        Ok(stats)
    }
}

/// `sum(x * r)` for a fixed random `r`, turning any tensor into a scalar
/// with an informative gradient.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.value(x).shape(), -1.0, 1.0, seed);
    let r = tape.constant(r);
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}
