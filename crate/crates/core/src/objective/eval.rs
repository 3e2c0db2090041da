use super::losses::candidate_cosines;
use super::train::{ClassSpace, TaskData};
use crate::autodiff::{Tape, Tensor};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::prompt::{encode_pairs, PromptBank, PromptParams};
use crate::scalar::Scalar;

/// Instances scored per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Row index into the evaluated feature set.
    pub index: usize,
    pub predicted: u32,
    pub target: u32,
    /// Cosine of the predicted candidate.
    pub score: f64,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.target
    }
}

/// Argmax over each instance's candidates; ties resolve to the first.
pub fn predict<S: Scalar>(
    encoder: &FrozenEncoder<S>,
    bank: &PromptBank<S>,
    params: &PromptParams<S>,
    data: TaskData<'_, S>,
) -> Result<Vec<Prediction>> {
    if matches!(data.space, ClassSpace::InBatch) {
        return Err(Error::Contract(
            "evaluation needs an explicit candidate set".into(),
        ));
    }
    let n = data.features.len();
    let labels = data.features.labels();
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let cands = data.candidates(chunk)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let features = tape.constant(data.features.gather(chunk));
        let pairs: Vec<(usize, usize)> = (0..chunk.len())
            .flat_map(|r| {
                let p = &cands.prompts[r * cands.k..(r + 1) * cands.k];
                p.iter().map(move |&j| (r, j))
            })
            .collect();
        let emb = encode_pairs(encoder, bank, &bound, features, &pairs)?;
        let cos: std::sync::Arc<Tensor<S>> = candidate_cosines(features, emb)?.value();
        for (r, &i) in chunk.iter().enumerate() {
            let row = cos.row(r);
            let best = (0..cands.k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            out.push(Prediction {
                index: i,
                predicted: cands.labels[r * cands.k + best],
                target: labels[i],
                score: row[best].to_f64_lossy(),
            });
        }
    }
    Ok(out)
}

pub fn accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|p| p.correct()).count() as f64 / predictions.len() as f64
}
