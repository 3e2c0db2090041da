use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::TokenSequence;
use crate::autodiff::{FrozenWeight, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Token embedding width.
    pub d_e: usize,
    /// Joint embedding width.
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Amplitude of the sinusoidal position table.
    pub position_scale: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 64,
            d_v: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 32,
            seed: 0,
            position_scale: 0.01,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_e == 0 || self.d_v == 0 || self.layers == 0 || self.heads == 0 {
            return bad("encoder widths, layers and heads must be positive".into());
        }
        if self.d_e % self.heads != 0 {
            return bad(format!("d_e {} not divisible by heads {}", self.d_e, self.heads));
        }
        if self.d_e % 2 != 0 {
            return bad(format!("d_e {} must be even for sinusoidal positions", self.d_e));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len {} too small", self.max_seq_len));
        }
        if !(self.init_std > 0.0) || !self.position_scale.is_finite() || self.position_scale < 0.0 {
            return bad("init_std must be positive, position_scale non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block<S> {
    ln1_g: FrozenWeight<S>,
    ln1_b: FrozenWeight<S>,
    wq: FrozenWeight<S>,
    wk: FrozenWeight<S>,
    wv: FrozenWeight<S>,
    wo: FrozenWeight<S>,
    ln2_g: FrozenWeight<S>,
    ln2_b: FrozenWeight<S>,
    w1: FrozenWeight<S>,
    b1: FrozenWeight<S>,
    w2: FrozenWeight<S>,
    b2: FrozenWeight<S>,
}

/// Pre-norm transformer text encoder whose weights never change after init.
#[derive(Debug, Clone)]
pub struct FrozenEncoder<S> {
    config: EncoderConfig,
    vocab_size: usize,
    embedding: FrozenWeight<S>,
    positions: Arc<Tensor<S>>,
    blocks: Vec<Block<S>>,
    final_g: FrozenWeight<S>,
    final_b: FrozenWeight<S>,
    proj: FrozenWeight<S>,
}

/// Pooled joint-space embeddings plus last-layer token states.
#[derive(Clone, Copy)]
pub struct EncoderOutput<'t, S: Scalar> {
    /// `[sequences x d_v]`
    pub pooled: Var<'t, S>,
    /// `[sequences * seq_len x d_e]`, after the final layer norm.
    pub token_states: Var<'t, S>,
}

fn sinusoid<S: Scalar>(len: usize, d: usize, scale: f64) -> Tensor<S> {
    let mut data = vec![S::zero(); len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = S::lit(angle.sin() * scale);
            data[pos * d + i + 1] = S::lit(angle.cos() * scale);
        }
    }
    Tensor::new(vec![len, d], data).expect("sinusoid shape")
}

impl<S: Scalar> FrozenEncoder<S> {
    /// Seeded Gaussian weights; layer-norm scales are one and all biases zero.
    pub fn init(config: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Parameter("vocabulary size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let (de, dv) = (config.d_e, config.d_v);
        let mut gauss = |shape: &[usize]| {
            FrozenWeight::new(Tensor::<f32>::randn(shape, std, &mut rng).cast::<S>())
        };
        let embedding = gauss(&[vocab_size, de]);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                wq: gauss(&[de, de]),
                wk: gauss(&[de, de]),
                wv: gauss(&[de, de]),
                wo: gauss(&[de, de]),
                w1: gauss(&[de, 4 * de]),
                w2: gauss(&[4 * de, de]),
                ln1_g: FrozenWeight::new(Tensor::ones(&[de])),
                ln1_b: FrozenWeight::new(Tensor::zeros(&[de])),
                ln2_g: FrozenWeight::new(Tensor::ones(&[de])),
                ln2_b: FrozenWeight::new(Tensor::zeros(&[de])),
                b1: FrozenWeight::new(Tensor::zeros(&[4 * de])),
                b2: FrozenWeight::new(Tensor::zeros(&[de])),
            });
        }
        let proj = gauss(&[de, dv]);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            embedding,
            positions: Arc::new(sinusoid(config.max_seq_len, de, config.position_scale)),
            blocks,
            final_g: FrozenWeight::new(Tensor::ones(&[de])),
            final_b: FrozenWeight::new(Tensor::zeros(&[de])),
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d_e(&self) -> usize {
        self.config.d_e
    }

    pub fn d_v(&self) -> usize {
        self.config.d_v
    }

    pub fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    /// Same weights in another precision.
    pub fn cast<T: Scalar>(&self) -> FrozenEncoder<T> {
        FrozenEncoder {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            embedding: self.embedding.cast(),
            positions: Arc::new(self.positions.cast()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            final_g: self.final_g.cast(),
            final_b: self.final_b.cast(),
            proj: self.proj.cast(),
        }
    }

    /// Every frozen tensor with a stable name.
    pub fn weights(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.tensor())];
        for (i, b) in self.blocks.iter().enumerate() {
            let named = [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ];
            for (n, w) in named {
                out.push((format!("block{i}.{n}"), w.tensor()));
            }
        }
        out.push(("final_g".into(), self.final_g.tensor()));
        out.push(("final_b".into(), self.final_b.tensor()));
        out.push(("proj".into(), self.proj.tensor()));
        out
    }

    /// Order-sensitive hash over all weights.
    pub fn checksum(&self) -> u64 {
        self.weights()
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(5) ^ t.checksum())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "{} tokens exceed max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Embedding rows plus positions `0..ids.len()`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<S>> {
        self.check_ids(ids)?;
        let d = self.config.d_e;
        let table = self.embedding.tensor();
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let row = table.row(id as usize);
            let p = self.positions.row(pos);
            data.extend(row.iter().zip(p).map(|(&a, &b)| a + b));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Differentiable lookup; gradients reach the table only when
    /// `track_grad` is set, and the table is never updated either way.
    pub fn embed_tokens_var<'t>(
        &self,
        tape: &'t Tape<S>,
        ids: &[u32],
        track_grad: bool,
    ) -> Result<Var<'t, S>> {
        self.check_ids(ids)?;
        let index: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let rows = self.embedding.bind(tape, track_grad).gather_rows(&index)?;
        let pos = tape.input_rc(self.positions.clone(), false);
        let pos = pos.gather_rows(&(0..ids.len()).collect::<Vec<_>>())?;
        rows.add(&pos)
    }

    /// Encodes packed sequences.
    ///
    /// `rows` is `[eots.len() * seq_len x d_e]`; keys after each sequence's
    /// EOT position are masked out, and the pooled output is the projected
    /// final state at that position.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<S>,
        rows: Var<'t, S>,
        seq_len: usize,
        eots: &[usize],
    ) -> Result<EncoderOutput<'t, S>> {
        let d = self.config.d_e;
        let shape = rows.shape();
        let n_seq = eots.len();
        if shape.len() != 2 || shape[1] != d || shape[0] != n_seq * seq_len || n_seq == 0 {
            return Err(Error::dim(
                "encode",
                format!("rows {shape:?} for {n_seq} sequences of length {seq_len}, d_e {d}"),
            ));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some((s, &e)) = eots.iter().enumerate().find(|(_, &e)| e >= seq_len) {
            return Err(Error::Contract(format!(
                "eot index {e} of sequence {s} outside length {seq_len}"
            )));
        }
        let mask: Arc<[bool]> = eots
            .iter()
            .flat_map(|&e| (0..seq_len).map(move |j| j <= e))
            .collect();
        let heads = self.config.heads;
        let mut x = rows;
        for b in &self.blocks {
            let a = x.layer_norm(&b.ln1_g.bind(tape, false), &b.ln1_b.bind(tape, false))?;
            let q = a.matmul(&b.wq.bind(tape, false))?;
            let k = a.matmul(&b.wk.bind(tape, false))?;
            let v = a.matmul(&b.wv.bind(tape, false))?;
            let o = q.attention(&k, &v, seq_len, heads, mask.clone())?;
            x = x.add(&o.matmul(&b.wo.bind(tape, false))?)?;
            let a = x.layer_norm(&b.ln2_g.bind(tape, false), &b.ln2_b.bind(tape, false))?;
            let h = a
                .matmul(&b.w1.bind(tape, false))?
                .add(&b.b1.bind(tape, false))?
                .gelu()?
                .matmul(&b.w2.bind(tape, false))?
                .add(&b.b2.bind(tape, false))?;
            x = x.add(&h)?;
        }
        let states = x.layer_norm(
            &self.final_g.bind(tape, false),
            &self.final_b.bind(tape, false),
        )?;
        let pick: Vec<usize> = eots
            .iter()
            .enumerate()
            .map(|(s, &e)| s * seq_len + e)
            .collect();
        let pooled = states
            .gather_rows(&pick)?
            .matmul(&self.proj.bind(tape, false))?;
        Ok(EncoderOutput {
            pooled,
            token_states: states,
        })
    }

    /// Single already-embedded sequence; rows after `eot_index` are padding.
    pub fn encode_rows<'t>(
        &self,
        tape: &'t Tape<S>,
        rows: Var<'t, S>,
        eot_index: usize,
    ) -> Result<EncoderOutput<'t, S>> {
        let n = rows.shape().first().copied().unwrap_or(0);
        if eot_index >= n {
            return Err(Error::Contract(format!(
                "eot index {eot_index} outside {n} rows"
            )));
        }
        let out = self.encode(tape, rows, n, &[eot_index])?;
        Ok(EncoderOutput {
            pooled: out.pooled.reshape(&[self.config.d_v])?,
            token_states: out.token_states,
        })
    }

    /// Last-layer states of a bare tokenized text, `[len x d_e]`.
    pub fn token_states(&self, seq: &TokenSequence) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let rows = tape.constant(self.embed_tokens(seq.ids())?);
        let out = self.encode_rows(&tape, rows, seq.eot_index())?;
        Ok((*out.token_states.value()).clone())
    }

    /// Pooled embedding of a bare tokenized text.
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let rows = tape.constant(self.embed_tokens(seq.ids())?);
        let out = self.encode_rows(&tape, rows, seq.eot_index())?;
        Ok((*out.pooled.value()).clone())
    }
}
