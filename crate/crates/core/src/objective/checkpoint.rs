use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::optim::{OptimConfig, Sgd};
use super::train::{EpochSummary, TrainState};
use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::prompt::{ContextPrompt, MetaNet, PromptParams};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CPLK";
const VERSION: u32 = 1;

/// Learnable parameters, optimizer and loop state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: PromptParams<S>,
    pub optimizer: Sgd<S>,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for x in t.data() {
            self.0.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            detail: "invalid utf-8 name".into(),
        })
    }
    fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 4)
            .ok_or_else(|| self.err(format!("tensor shape {shape:?} exceeds file")))?;
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Tensor::new(shape, data)
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.state.epoch as u64);
        w.u64(self.state.batch as u64);
        w.0.extend_from_slice(&self.state.rng.get_seed());
        w.u64(self.state.rng.get_stream());
        w.0.extend_from_slice(&self.state.rng.get_word_pos().to_le_bytes());
        let params = self.params.params();
        w.u32(params.len() as u32);
        for p in params {
            w.str(&p.name);
            w.u8(p.frozen as u8);
            w.tensor(&p.value);
        }
        let o = &self.optimizer;
        w.f64(o.config.lr);
        w.f64(o.config.momentum);
        w.u8(o.config.cosine_decay as u8);
        w.u64(o.step);
        w.u64(o.horizon);
        w.u32(o.velocity.len() as u32);
        for (name, t) in &o.velocity {
            w.str(name);
            w.tensor(t);
        }
        w.u32(self.state.history.len() as u32);
        for h in &self.state.history {
            w.u64(h.epoch as u64);
            w.f64(h.ce);
            w.f64(h.cl);
            w.f64(h.l1);
            w.f64(h.train_acc);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let epoch = r.u64()? as usize;
        let batch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let n = r.u32()?;
        let mut named: Vec<Parameter<S>> = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let frozen = r.u8()? != 0;
            let value = r.tensor()?;
            named.push(Parameter {
                name,
                value,
                frozen,
            });
        }
        let at = r.pos as u64;
        let mut take = |name: &str| {
            named
                .iter()
                .position(|p| p.name == name)
                .map(|i| named.remove(i))
        };
        let context = take("context").ok_or_else(|| Error::Format {
            offset: at,
            detail: "missing context parameter".into(),
        })?;
        let meta = match (take("meta.w1"), take("meta.b1"), take("meta.w2"), take("meta.b2")) {
            (Some(w1), Some(b1), Some(w2), Some(b2)) => Some(MetaNet { w1, b1, w2, b2 }),
            (None, None, None, None) => None,
            _ => {
                return Err(Error::Format {
                    offset: at,
                    detail: "incomplete meta-net parameters".into(),
                })
            }
        };
        if let Some(extra) = named.first() {
            return Err(Error::Format {
                offset: at,
                detail: format!("unknown parameter {}", extra.name),
            });
        }

        let config = OptimConfig {
            lr: r.f64()?,
            momentum: r.f64()?,
            cosine_decay: r.u8()? != 0,
        };
        let step = r.u64()?;
        let horizon = r.u64()?;
        let nv = r.u32()?;
        let mut velocity = Vec::new();
        for _ in 0..nv {
            let name = r.str()?;
            velocity.push((name, r.tensor()?));
        }
        let nh = r.u32()?;
        let mut history = Vec::new();
        for _ in 0..nh {
            history.push(EpochSummary {
                epoch: r.u64()? as usize,
                ce: r.f64()?,
                cl: r.f64()?,
                l1: r.f64()?,
                train_acc: r.f64()?,
            });
        }
        if r.pos != buf.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(Self {
            params: PromptParams {
                context: ContextPrompt { rows: context },
                meta,
            },
            optimizer: Sgd {
                config,
                velocity,
                step,
                horizon,
            },
            state: TrainState {
                epoch,
                batch,
                rng,
                history,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
