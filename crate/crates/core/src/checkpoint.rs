//! Binary checkpoints: model configuration, parameters, Adam moments,
//! sampler RNG position and progress counters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FCNETCKP" | u32 version
//! str model config (key = value text)
//! u64 epoch | u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u32 tensor count, then per tensor: str name | u32 ndim | u64 dims.. | f32 values..
//! u8 has_optimizer, then f64 lr, beta1, beta2, eps | u64 step | moments as tensors
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FCNETCKP";
const VERSION: u32 = 1;

/// Resumable position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|v| self.0.extend_from_slice(&v.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("`{name}` claims {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = len
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape {shape:?} overflows")))?;
        let raw = self.bytes(bytes)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.model.to_text());
        w.u64(self.epoch);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.tensor(p.name(), p.value());
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(adam) => {
                w.0.push(1);
                for v in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                    w.f64(v);
                }
                w.u64(adam.step);
                for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
                    w.tensor("m", m);
                    w.tensor("v", v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.bytes(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let model = ModelConfig::parse(&r.str()?)?;
        let (epoch, step) = (r.u64()?, r.u64()?);
        let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: r.u128()? };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params.register(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let mut first_moment = Vec::with_capacity(count);
                let mut second_moment = Vec::with_capacity(count);
                for (_, p) in params.iter() {
                    let (m, v) = (r.tensor()?.1, r.tensor()?.1);
                    if m.shape() != p.value().shape() || v.shape() != p.value().shape() {
                        return Err(Error::Checkpoint(format!("moment shape mismatch for `{}`", p.name())));
                    }
                    first_moment.push(m);
                    second_moment.push(v);
                }
                Some(AdamState { lr, beta1, beta2, eps, step, first_moment, second_moment })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { model, epoch, step, rng, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless it was written for `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.model != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for a different model:\n{}",
                ckpt.model.to_text()
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FcNet;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::with_depth(2);
        let (_, params) = FcNet::init::<f32>(cfg.clone(), 5).unwrap();
        let mut adam = AdamState::new(&params, 1e-4);
        adam.step = 3;
        adam.first_moment[0].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        Checkpoint { model: cfg, epoch: 2, step: 40, rng: RngState::capture(&rng), params, optimizer: Some(adam) }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_resumes_where_it_stopped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 5] = rng.random();
        let mut resumed = RngState::capture(&rng).restore();
        let a: [u32; 7] = rng.random();
        let b: [u32; 7] = resumed.random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert!(Checkpoint::load_for(&p, &ck.model).is_ok());
        assert!(matches!(Checkpoint::load_for(&p, &ModelConfig::with_depth(3)), Err(Error::Checkpoint(_))));
    }
}
