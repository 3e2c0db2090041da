use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::BoundPrompt;
use super::task::TaskRelevantPrompt;
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{FrozenEncoder, PAD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Embedded task-relevant prompts, padded to a common width.
#[derive(Debug, Clone)]
pub struct PromptBank<S> {
    prompts: Vec<TaskRelevantPrompt>,
    /// `[prompts * width x d_e]`
    rows: Arc<Tensor<S>>,
    width: usize,
    eots: Vec<usize>,
}

impl<S: Scalar> PromptBank<S> {
    pub fn new(encoder: &FrozenEncoder<S>, prompts: Vec<TaskRelevantPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("prompt bank needs at least one prompt".into()));
        }
        let width = prompts.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
        let mut data = Vec::with_capacity(prompts.len() * width * encoder.d_e());
        let mut eots = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let mut ids = p.tokens.ids().to_vec();
            ids.resize(width, PAD);
            data.extend(encoder.embed_tokens(&ids)?.into_data());
            eots.push(p.tokens.eot_index());
        }
        let rows = Tensor::new(vec![prompts.len() * width, encoder.d_e()], data)?;
        Ok(Self {
            prompts,
            rows: Arc::new(rows),
            width,
            eots,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[TaskRelevantPrompt] {
        &self.prompts
    }

    pub fn prompt(&self, j: usize) -> &TaskRelevantPrompt {
        &self.prompts[j]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Embedded rows of prompt `j` up to and including its EOT.
    pub fn embedded(&self, j: usize) -> Tensor<S> {
        let d = self.rows.dims2().1;
        let n = self.eots[j] + 1;
        let start = j * self.width * d;
        Tensor::new(vec![n, d], self.rows.data()[start..start + n * d].to_vec())
            .expect("bank slice")
    }

    pub fn cast<T: Scalar>(&self) -> PromptBank<T> {
        PromptBank {
            prompts: self.prompts.clone(),
            rows: Arc::new(self.rows.cast()),
            width: self.width,
            eots: self.eots.clone(),
        }
    }
}

/// `t_c = [p + pi, h_c]` as plain rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt<S> {
    pub rows: Tensor<S>,
    pub eot_index: usize,
}

/// Concatenates context rows (shifted by `shift` when given) with the
/// embedded text rows `h` whose EOT sits at `h_eot`.
pub fn assemble<S: Scalar>(
    context: &Tensor<S>,
    shift: Option<&Tensor<S>>,
    h: &Tensor<S>,
    h_eot: usize,
    max_seq_len: usize,
) -> Result<AssembledPrompt<S>> {
    let (l, d) = context.dims2();
    let (n, dh) = h.dims2();
    if d != dh || shift.is_some_and(|s| s.len() != d) {
        return Err(Error::dim("assemble", "inconsistent embedding widths"));
    }
    if h_eot >= n {
        return Err(Error::Contract(format!("eot {h_eot} outside {n} prompt rows")));
    }
    if l + n > max_seq_len {
        return Err(Error::Length(format!(
            "{l} context rows + {n} prompt rows exceed {max_seq_len}"
        )));
    }
    let mut data = Vec::with_capacity((l + n) * d);
    for i in 0..l {
        let row = context.row(i);
        match shift {
            Some(s) => data.extend(row.iter().zip(s.data()).map(|(&a, &b)| a + b)),
            None => data.extend_from_slice(row),
        }
    }
    data.extend_from_slice(h.data());
    Ok(AssembledPrompt {
        rows: Tensor::new(vec![l + n, d], data)?,
        eot_index: l + h_eot,
    })
}

/// Encodes one assembled prompt, returning `G(t_c)`.
pub fn encode_prompt<'t, S: Scalar>(
    encoder: &FrozenEncoder<S>,
    tape: &'t Tape<S>,
    rows: Var<'t, S>,
    eot_index: usize,
) -> Result<Var<'t, S>> {
    Ok(encoder.encode_rows(tape, rows, eot_index)?.pooled)
}

/// Joint-space embeddings for `(instance, prompt)` pairs, `[pairs x d_v]`.
///
/// With a meta-net every pair is encoded with its instance's shift; without
/// one each distinct prompt is encoded once and rows are shared.
pub fn encode_pairs<'t, S: Scalar>(
    encoder: &FrozenEncoder<S>,
    bank: &PromptBank<S>,
    bound: &BoundPrompt<'t, S>,
    features: Var<'t, S>,
    pairs: &[(usize, usize)],
) -> Result<Var<'t, S>> {
    let tape = features.tape();
    let n_inst = features.shape().first().copied().unwrap_or(0);
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n_inst || *j >= bank.len()) {
        return Err(Error::Contract(format!(
            "pair ({i}, {j}) outside {n_inst} instances x {} prompts",
            bank.len()
        )));
    }
    let l = bound.context.shape()[0];
    let seq_len = l + bank.width;
    if seq_len > encoder.max_seq_len() {
        let longest = (0..bank.len()).max_by_key(|&j| bank.eots[j]).unwrap_or(0);
        return Err(Error::Length(format!(
            "prompt {:?} with {l} context rows exceeds max_seq_len {}",
            bank.prompt(longest).text,
            encoder.max_seq_len()
        )));
    }
    let shift = bound.meta_shift(features)?;
    // Sequences to encode: one per pair with a shift, else one per prompt.
    let (seqs, back): (Vec<(usize, usize)>, Option<Vec<usize>>) = match shift {
        Some(_) => (pairs.to_vec(), None),
        None => {
            let mut slot = BTreeMap::new();
            for &(_, j) in pairs {
                let next = slot.len();
                slot.entry(j).or_insert(next);
            }
            let mut uniq = vec![(0, 0); slot.len()];
            for (&j, &s) in &slot {
                uniq[s] = (0, j);
            }
            let back = pairs.iter().map(|(_, j)| slot[j]).collect();
            (uniq, Some(back))
        }
    };
    let h = tape.input_rc(bank.rows.clone(), false);
    let source = Var::concat_rows(&[bound.context, h])?;
    let mut index = Vec::with_capacity(seqs.len() * seq_len);
    for &(_, j) in &seqs {
        index.extend(0..l);
        index.extend((0..bank.width).map(|r| l + j * bank.width + r));
    }
    let mut rows = source.gather_rows(&index)?;
    if let Some(pi) = shift {
        let d_e = encoder.d_e();
        let zero = tape.constant(Tensor::zeros(&[1, d_e]));
        let ext = Var::concat_rows(&[pi, zero])?;
        let mut shift_index = Vec::with_capacity(index.len());
        for &(i, _) in &seqs {
            shift_index.extend(std::iter::repeat_n(i, l));
            shift_index.extend(std::iter::repeat_n(n_inst, bank.width));
        }
        rows = rows.add(&ext.gather_rows(&shift_index)?)?;
    }
    let eots: Vec<usize> = seqs.iter().map(|&(_, j)| l + bank.eots[j]).collect();
    let pooled = encoder.encode(tape, rows, seq_len, &eots)?.pooled;
    match back {
        Some(back) => pooled.gather_rows(&back),
        None => Ok(pooled),
    }
}
