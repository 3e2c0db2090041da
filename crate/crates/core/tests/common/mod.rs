#![allow(dead_code)]

use cpl_core::autodiff::{Tape, Tensor};
use cpl_core::encoder::{EncoderConfig, FeatureSet, FrozenEncoder, Vocabulary};
use cpl_core::objective::{ClassSpace, TaskData, TrainConfig, TrainContext};
use cpl_core::prompt::{
    build_task_prompts, encode_pairs, ContextPrompt, PromptBank, PromptParams, PromptSpec,
    TaskRelevantPrompt,
};
use cpl_core::sampler::PromptSimilarity;
use cpl_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NAMES: [&str; 6] = [
    "red cat",
    "blue cat",
    "red dog",
    "blue dog",
    "green bird",
    "green fish",
];

pub const D_E: usize = 16;
pub const D_V: usize = 8;

pub fn encoder_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_e: D_E,
        d_v: D_V,
        layers: 2,
        heads: 2,
        max_seq_len: 12,
        seed,
        ..EncoderConfig::default()
    }
}

pub fn vocab() -> Vocabulary {
    Vocabulary::build(&NAMES).unwrap()
}

pub fn prompts(vocab: &Vocabulary) -> Vec<TaskRelevantPrompt> {
    let specs: Vec<(u32, PromptSpec)> = NAMES
        .iter()
        .enumerate()
        .map(|(c, n)| (c as u32, PromptSpec::ClassName(n.to_string())))
        .collect();
    build_task_prompts(&specs, vocab, 8).unwrap()
}

/// Small separable problem: one encoder-derived direction per class plus noise.
pub struct Toy<S: Scalar> {
    pub encoder: FrozenEncoder<S>,
    pub bank: PromptBank<S>,
    pub similarity: PromptSimilarity,
    pub features: FeatureSet<S>,
    pub gt: Vec<usize>,
    pub space: ClassSpace,
    pub config: TrainConfig,
}

impl<S: Scalar> Toy<S> {
    pub fn new(seed: u64, per_class: usize, noise: f64, config: TrainConfig) -> Self {
        let vocab = vocab();
        let encoder = FrozenEncoder::<S>::init(&encoder_config(seed), vocab.len()).unwrap();
        let prompts = prompts(&vocab);
        let similarity = PromptSimilarity::new(&encoder, &prompts).unwrap();
        let bank = PromptBank::new(&encoder, prompts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let protos = prototypes(&encoder, &bank, &mut rng);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for c in 0..NAMES.len() {
            for _ in 0..per_class {
                let eps = Tensor::<f64>::randn(&[D_V], noise, &mut rng);
                labels.push(c as u32);
                data.extend(
                    protos[c]
                        .iter()
                        .zip(eps.data())
                        .map(|(&p, &e)| S::lit(p + e)),
                );
            }
        }
        let n = labels.len();
        let features = FeatureSet::new((0..n as u64).collect(), labels.clone(), D_V, data).unwrap();
        Self {
            encoder,
            bank,
            similarity,
            features,
            gt: labels.iter().map(|&l| l as usize).collect(),
            space: ClassSpace::Fixed((0..NAMES.len()).map(|c| (c as u32, c)).collect()),
            config,
        }
    }

    pub fn ctx(&self) -> TrainContext<'_, S> {
        TrainContext {
            encoder: &self.encoder,
            bank: &self.bank,
            similarity: &self.similarity,
            data: TaskData {
                features: &self.features,
                gt_prompt: &self.gt,
                space: &self.space,
            },
            config: &self.config,
        }
    }
}

/// Class directions reachable by prompt tuning: the encoder's embeddings of
/// every class under a hidden context, unit-normalized.
fn prototypes<S: Scalar>(
    encoder: &FrozenEncoder<S>,
    bank: &PromptBank<S>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let hidden = PromptParams {
        context: ContextPrompt::init(2, D_E, 0.05, rng).unwrap(),
        meta: None,
    };
    let tape = Tape::new();
    let bound = hidden.bind(&tape);
    let dummy = tape.constant(Tensor::ones(&[1, D_V]));
    let pairs: Vec<(usize, usize)> = (0..bank.len()).map(|j| (0, j)).collect();
    let out = encode_pairs(encoder, bank, &bound, dummy, &pairs).unwrap().value();
    (0..bank.len())
        .map(|j| {
            let r: Vec<f64> = out.row(j).iter().map(|x| x.to_f64_lossy()).collect();
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        context_len: 2,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}
