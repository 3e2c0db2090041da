//! Hard-negative selection by greedy token matching over frozen encoder states.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::prompt::TaskRelevantPrompt;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    #[default]
    Bertscore,
    Random,
    /// No negatives: cross-entropy only.
    Off,
}

/// Unit-normalized content-token states of one prompt, `[tokens x d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    rows: Vec<Vec<f64>>,
}

impl TokenStates {
    /// Normalizes each row; zero rows stay zero and match nothing.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("prompt has no content tokens".into()));
        }
        let rows = rows
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.iter().map(|x| x / n).collect()
                } else {
                    r
                }
            })
            .collect();
        Ok(Self { rows })
    }

    /// Last-layer states of the prompt text with BOT/EOT dropped.
    pub fn of_prompt<S: Scalar>(
        encoder: &FrozenEncoder<S>,
        prompt: &TaskRelevantPrompt,
    ) -> Result<Self> {
        let range = prompt.tokens.content_range();
        if range.is_empty() {
            return Err(Error::Input(format!(
                "prompt {:?} has zero non-special tokens",
                prompt.text
            )));
        }
        let states: Tensor<S> = encoder.token_states(&prompt.tokens)?;
        Self::new(
            range
                .map(|r| states.row(r).iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy-matching F1: recall averages each token of `a`'s best cosine in
/// `b`, precision the reverse. Zero when `P + R <= 0`.
pub fn bertscore_states(a: &TokenStates, b: &TokenStates) -> f64 {
    let mut best_b = vec![f64::NEG_INFINITY; b.rows.len()];
    let mut recall = 0.0;
    for ra in &a.rows {
        let mut best = f64::NEG_INFINITY;
        for (j, rb) in b.rows.iter().enumerate() {
            let c = dot(ra, rb);
            best = best.max(c);
            best_b[j] = best_b[j].max(c);
        }
        recall += best;
    }
    let recall = recall / a.rows.len() as f64;
    let precision = best_b.iter().sum::<f64>() / b.rows.len() as f64;
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn bertscore<S: Scalar>(
    encoder: &FrozenEncoder<S>,
    a: &TaskRelevantPrompt,
    b: &TaskRelevantPrompt,
) -> Result<f64> {
    Ok(bertscore_states(
        &TokenStates::of_prompt(encoder, a)?,
        &TokenStates::of_prompt(encoder, b)?,
    ))
}

/// Pairwise scores over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    ids: Vec<u64>,
    labels: Vec<u32>,
}

impl SimilarityMatrix {
    pub fn build(states: &[&TokenStates], ids: Vec<u64>, labels: Vec<u32>) -> Result<Self> {
        let b = states.len();
        if ids.len() != b || labels.len() != b {
            return Err(Error::dim("similarity", "ids/labels/states lengths differ"));
        }
        let mut values = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                values[i * b + j] = bertscore_states(states[i], states[j]);
            }
        }
        Ok(Self { values, ids, labels })
    }

    /// Wraps precomputed scores, e.g. gathered from a dataset-level table.
    pub fn from_values(values: Vec<f64>, ids: Vec<u64>, labels: Vec<u32>) -> Result<Self> {
        let b = ids.len();
        if labels.len() != b || values.len() != b * b {
            return Err(Error::dim("similarity", "values are not ids x ids"));
        }
        Ok(Self { values, ids, labels })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Header row and column hold instance ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id");
        for id in &self.ids {
            let _ = write!(s, ",{id}");
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            let _ = write!(s, "{id}");
            for j in 0..self.size() {
                let _ = write!(s, ",{:.6}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativePair {
    pub query: usize,
    pub negative: usize,
    /// Similarity score; `None` for random draws.
    pub score: Option<f64>,
}

/// Most similar differently-labelled instance; ties go to the lowest index.
pub fn select_negative(q: usize, matrix: &SimilarityMatrix) -> Option<NegativePair> {
    let labels = matrix.labels();
    let mut best: Option<(usize, f64)> = None;
    for k in 0..matrix.size() {
        if k == q || labels[k] == labels[q] {
            continue;
        }
        let s = matrix.get(q, k);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, s)| NegativePair {
        query: q,
        negative: k,
        score: Some(s),
    })
}

/// Uniform draw among differently-labelled instances.
pub fn random_negative<R: Rng + ?Sized>(
    q: usize,
    labels: &[u32],
    rng: &mut R,
) -> Option<NegativePair> {
    let cand: Vec<usize> = (0..labels.len())
        .filter(|&k| k != q && labels[k] != labels[q])
        .collect();
    if cand.is_empty() {
        return None;
    }
    Some(NegativePair {
        query: q,
        negative: cand[rng.random_range(0..cand.len())],
        score: None,
    })
}

/// Token states for every prompt of a bank, with optional full-table scores.
#[derive(Debug, Clone)]
pub struct PromptSimilarity {
    states: Vec<TokenStates>,
    table: Option<Vec<f64>>,
}

impl PromptSimilarity {
    pub fn new<S: Scalar>(encoder: &FrozenEncoder<S>, prompts: &[TaskRelevantPrompt]) -> Result<Self> {
        let states = prompts
            .iter()
            .map(|p| TokenStates::of_prompt(encoder, p))
            .collect::<Result<_>>()?;
        Ok(Self {
            states,
            table: None,
        })
    }

    /// Scores every prompt pair once up front.
    pub fn precompute(&mut self) {
        let p = self.states.len();
        let mut table = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                table[i * p + j] = bertscore_states(&self.states[i], &self.states[j]);
            }
        }
        self.table = Some(table);
    }

    pub fn score(&self, a: usize, b: usize) -> f64 {
        match &self.table {
            Some(t) => t[a * self.states.len() + b],
            None => bertscore_states(&self.states[a], &self.states[b]),
        }
    }

    /// Batch matrix where instance `i` is represented by prompt `prompt_ids[i]`.
    pub fn batch_matrix(
        &self,
        prompt_ids: &[usize],
        ids: Vec<u64>,
        labels: Vec<u32>,
    ) -> Result<SimilarityMatrix> {
        if self.table.is_none() {
            let states: Vec<&TokenStates> = prompt_ids.iter().map(|&p| &self.states[p]).collect();
            return SimilarityMatrix::build(&states, ids, labels);
        }
        let b = prompt_ids.len();
        let mut values = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                values[i * b + j] = self.score(prompt_ids[i], prompt_ids[j]);
            }
        }
        SimilarityMatrix::from_values(values, ids, labels)
    }
}
