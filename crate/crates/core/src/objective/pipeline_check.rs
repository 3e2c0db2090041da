//! Finite-difference checks of the full training graph: prompt rows,
//! meta-net and gate, all through the frozen encoder, in 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{choose_negatives, contrastive, forward, solve_gates, ClassSpace, TaskData, TrainConfig, TrainContext};
use crate::autodiff::gradcheck::{check, GradReport};
use crate::autodiff::{Tape, Tensor, Var};
use crate::counterfactual::{inner_objective, InnerProblem};
use crate::encoder::{EncoderConfig, FeatureSet, FrozenEncoder, Vocabulary};
use crate::error::Result;
use crate::prompt::{build_task_prompts, BoundPrompt, ContextPrompt, MetaNet, PromptBank, PromptParams, PromptSpec};
use crate::sampler::PromptSimilarity;

/// Which gradient an end-to-end check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Total loss w.r.t. the context rows `p`.
    Context,
    /// Total loss w.r.t. all four meta-net tensors.
    MetaNet,
    /// Inner objective w.r.t. the gate logits.
    Gate,
}

pub const TARGETS: [Target; 3] = [Target::Context, Target::MetaNet, Target::Gate];

/// Step used by the end-to-end checks; inputs are small, so it is finer than
/// the per-op default.
pub const PIPELINE_STEP: f64 = 1e-5;

const NAMES: [&str; 4] = ["red cat", "blue cat", "red dog", "green bird"];

struct Fixture {
    encoder: FrozenEncoder<f64>,
    bank: PromptBank<f64>,
    similarity: PromptSimilarity,
    features: FeatureSet<f64>,
    gt: Vec<usize>,
    space: ClassSpace,
    config: TrainConfig,
    params: PromptParams<f64>,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::build(&NAMES)?;
        let enc_config = EncoderConfig {
            d_e: 16,
            d_v: 8,
            layers: 2,
            heads: 2,
            max_seq_len: 12,
            seed,
            ..EncoderConfig::default()
        };
        let encoder = FrozenEncoder::<f64>::init(&enc_config, vocab.len())?;
        let specs: Vec<(u32, PromptSpec)> = NAMES
            .iter()
            .enumerate()
            .map(|(c, n)| (c as u32, PromptSpec::ClassName(n.to_string())))
            .collect();
        let prompts = build_task_prompts(&specs, &vocab, 8)?;
        let similarity = PromptSimilarity::new(&encoder, &prompts)?;
        let bank = PromptBank::new(&encoder, prompts)?;
        let labels = vec![0, 1, 2, 3, 0, 1];
        let n = labels.len();
        let data = Tensor::<f64>::randn(&[n, 8], 1.0, &mut rng).into_data();
        let features = FeatureSet::new((0..n as u64).collect(), labels.clone(), 8, data)?;
        let gt = labels.iter().map(|&l| l as usize).collect();
        let config = TrainConfig {
            tau: 0.05,
            context_len: 2,
            seed,
            ..TrainConfig::default()
        };
        let mut meta = MetaNet::init(8, 16, &mut rng);
        // nonzero second layer so every meta-net tensor carries gradient
        meta.w2.value = Tensor::randn(&[1, 16], 0.05, &mut rng);
        meta.b2.value = Tensor::randn(&[16], 0.05, &mut rng);
        meta.b1.value = Tensor::full(&[1], 0.1);
        let params = PromptParams {
            context: ContextPrompt::init(2, 16, 0.02, &mut rng)?,
            meta: Some(meta),
        };
        Ok(Self {
            encoder,
            bank,
            similarity,
            features,
            gt,
            space: ClassSpace::Fixed((0..4).map(|c| (c as u32, c)).collect()),
            config,
            params,
        })
    }

    fn ctx(&self) -> TrainContext<'_, f64> {
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

/// One randomized end-to-end gradient comparison.
pub fn end_to_end_check(target: Target, seed: u64) -> Result<GradReport> {
    let fx = Fixture::new(seed)?;
    let ctx = fx.ctx();
    let batch: Vec<usize> = (0..fx.features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // negatives and gate come from the unperturbed parameters and stay fixed
    let tape = Tape::new();
    let bound = fx.params.bind(&tape);
    let fwd = forward(&ctx, &bound, &tape, &batch)?;
    let negatives = choose_negatives(&ctx, &batch, &fwd.candidates, &mut rng)?;
    let gate = solve_gates(&ctx, &fwd, &negatives)?;
    let u = gate.snapshot();
    let meta = fx.params.meta.as_ref().expect("fixture has a meta-net");
    let meta_values = [&meta.w1.value, &meta.b1.value, &meta.w2.value, &meta.b2.value];
    let context = fx.params.context.rows.value.clone();

    match target {
        Target::Context | Target::MetaNet => {
            let inputs: Vec<Tensor<f64>> = match target {
                Target::Context => vec![context.clone()],
                _ => meta_values.iter().map(|t| (*t).clone()).collect(),
            };
            check(&inputs, PIPELINE_STEP, |tape, vars: &[Var<'_, f64>]| {
                let bound = match target {
                    Target::Context => BoundPrompt {
                        context: vars[0],
                        meta: Some(meta_values.map(|t| tape.constant(t.clone()))),
                    },
                    _ => BoundPrompt {
                        context: tape.constant(context.clone()),
                        meta: Some([vars[0], vars[1], vars[2], vars[3]]),
                    },
                };
                let fwd = forward(&ctx, &bound, tape, &batch)?;
                let cl = contrastive(&fwd, &negatives, tape.constant(u.clone()), ctx.config.tau)?;
                fwd.ce.add(&cl.scale(ctx.config.lambda)?)
            })
        }
        Target::Gate => {
            let v = fwd.features.value();
            let pick = |rows: &[usize]| {
                let d = v.dims2().1;
                let data = rows.iter().flat_map(|&r| v.row(r).to_vec()).collect();
                Tensor::new(vec![rows.len(), d], data)
            };
            let vq = pick(&negatives.query)?;
            let vn = pick(&negatives.negative)?;
            let e = fwd.embeddings.value();
            let k = fwd.candidates.k;
            let d = e.dims2().1;
            let emb_data = negatives
                .query
                .iter()
                .flat_map(|&q| e.data()[q * k * d..(q + 1) * k * d].to_vec())
                .collect();
            let emb = Tensor::new(vec![negatives.query.len() * k, d], emb_data)?;
            let problem = InnerProblem {
                v: &vq,
                v_neg: &vn,
                embeddings: &emb,
                neg_pos: &negatives.neg_pos,
                tau: ctx.config.tau,
            };
            let beta = ctx.config.gate.beta;
            let rho = gate.rho().clone();
            check(&[rho], PIPELINE_STEP, |_, vars| Ok(inner_objective(vars[0], &problem, beta)?.0))
        }
    }
}
