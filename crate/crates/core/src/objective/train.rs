use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{candidate_cosines, ce_from_cosines, cl_loss, LossBreakdown};
use super::optim::{OptimConfig, Sgd};
use crate::autodiff::{Tape, Tensor, Var};
use crate::counterfactual::{inner_maximize, mix, Gate, GateConfig, GateRecord, InnerProblem};
use crate::encoder::{FeatureSet, FrozenEncoder};
use crate::error::{Error, Result};
use crate::prompt::{encode_pairs, BoundPrompt, ContextPrompt, MetaNet, PromptBank, PromptParams};
use crate::sampler::{random_negative, select_negative, PromptSimilarity, SamplerMode};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Softmax temperature shared by classification and contrastive terms.
    pub tau: f64,
    pub gate: GateConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub sampler: SamplerMode,
    /// Score every prompt pair once instead of per batch.
    pub precompute_similarity: bool,
    /// Let the outer loss also move the gate before it is recorded.
    pub joint_u_grad: bool,
    pub context_len: usize,
    pub context_std: f64,
    pub use_meta_net: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.01,
            gate: GateConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 32,
            epochs: 30,
            sampler: SamplerMode::Bertscore,
            precompute_similarity: false,
            joint_u_grad: false,
            context_len: 4,
            context_std: 0.02,
            use_meta_net: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("tau {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!("batch size {} below 2", self.batch_size)));
        }
        if self.context_len == 0 || !(self.context_std > 0.0) {
            return Err(Error::Parameter("context length and std must be positive".into()));
        }
        self.gate.validate()?;
        self.optim.validate()
    }

    /// True when the step builds counterfactuals at all.
    pub fn uses_counterfactuals(&self) -> bool {
        self.sampler != SamplerMode::Off
    }
}

/// Seeded initial prompt parameters.
pub fn init_params<S: Scalar>(config: &TrainConfig, encoder: &FrozenEncoder<S>) -> Result<PromptParams<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let context = ContextPrompt::init(config.context_len, encoder.d_e(), config.context_std, &mut rng)?;
    let meta = config
        .use_meta_net
        .then(|| MetaNet::init(encoder.d_v(), encoder.d_e(), &mut rng));
    Ok(PromptParams { context, meta })
}

/// Which prompts an instance is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassSpace {
    /// Every instance sees the same `(label, prompt)` candidates.
    Fixed(Vec<(u32, usize)>),
    /// Candidates are the distinct ground-truth prompts of the batch.
    InBatch,
    /// Per-instance candidate lists, all of equal length.
    PerInstance(Vec<Vec<(u32, usize)>>),
}

/// Candidates of one batch, `k` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCandidates {
    pub k: usize,
    pub labels: Vec<u32>,
    pub prompts: Vec<usize>,
    pub targets: Vec<usize>,
}

impl BatchCandidates {
    pub fn position(&self, row: usize, label: u32) -> Option<usize> {
        self.labels[row * self.k..(row + 1) * self.k]
            .iter()
            .position(|&l| l == label)
    }
}

/// Features plus the prompt bookkeeping the loss needs.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a, S> {
    pub features: &'a FeatureSet<S>,
    /// Ground-truth prompt of each instance.
    pub gt_prompt: &'a [usize],
    pub space: &'a ClassSpace,
}

impl<S: Scalar> TaskData<'_, S> {
    pub fn candidates(&self, batch: &[usize]) -> Result<BatchCandidates> {
        let labels = self.features.labels();
        let rows: Vec<Vec<(u32, usize)>> = match self.space {
            ClassSpace::Fixed(c) => vec![c.clone(); batch.len()],
            ClassSpace::InBatch => {
                let mut uniq: Vec<(u32, usize)> = Vec::new();
                for &i in batch {
                    if !uniq.iter().any(|(l, _)| *l == labels[i]) {
                        uniq.push((labels[i], self.gt_prompt[i]));
                    }
                }
                vec![uniq; batch.len()]
            }
            ClassSpace::PerInstance(per) => batch.iter().map(|&i| per[i].clone()).collect(),
        };
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Input("candidate lists must be non-empty and equal length".into()));
        }
        let mut out = BatchCandidates {
            k,
            labels: Vec::with_capacity(k * batch.len()),
            prompts: Vec::with_capacity(k * batch.len()),
            targets: Vec::with_capacity(batch.len()),
        };
        for (row, &i) in rows.iter().zip(batch) {
            let t = row.iter().position(|(l, _)| *l == labels[i]).ok_or_else(|| {
                Error::Input(format!(
                    "label {} of record {} missing from its candidates",
                    labels[i],
                    self.features.ids()[i]
                ))
            })?;
            out.targets.push(t);
            out.labels.extend(row.iter().map(|(l, _)| *l));
            out.prompts.extend(row.iter().map(|(_, p)| *p));
        }
        Ok(out)
    }
}

/// Read-only inputs shared by every step.
#[derive(Clone, Copy)]
pub struct TrainContext<'a, S> {
    pub encoder: &'a FrozenEncoder<S>,
    pub bank: &'a PromptBank<S>,
    pub similarity: &'a PromptSimilarity,
    pub data: TaskData<'a, S>,
    pub config: &'a TrainConfig,
}

/// Outer forward pass of one batch.
pub struct Forward<'t, S: Scalar> {
    pub features: Var<'t, S>,
    /// `[rows * k x d_v]`
    pub embeddings: Var<'t, S>,
    /// `[rows x k]`
    pub cosines: Var<'t, S>,
    pub ce: Var<'t, S>,
    pub candidates: BatchCandidates,
}

pub fn forward<'t, S: Scalar>(
    ctx: &TrainContext<'_, S>,
    bound: &BoundPrompt<'t, S>,
    tape: &'t Tape<S>,
    batch: &[usize],
) -> Result<Forward<'t, S>> {
    let candidates = ctx.data.candidates(batch)?;
    let features = tape.constant(ctx.data.features.gather(batch));
    let pairs: Vec<(usize, usize)> = (0..batch.len())
        .flat_map(|r| {
            let p = &candidates.prompts[r * candidates.k..(r + 1) * candidates.k];
            p.iter().map(move |&j| (r, j))
        })
        .collect();
    let embeddings = encode_pairs(ctx.encoder, ctx.bank, bound, features, &pairs)?;
    let cosines = candidate_cosines(features, embeddings)?;
    let ce = ce_from_cosines(cosines, &candidates.targets, S::lit(ctx.config.tau))?;
    Ok(Forward {
        features,
        embeddings,
        cosines,
        ce,
        candidates,
    })
}

/// Queries with a usable negative, in batch-row order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Negatives {
    pub query: Vec<usize>,
    pub negative: Vec<usize>,
    /// Position of the negative's label among the query's candidates.
    pub neg_pos: Vec<usize>,
    pub skipped: Vec<bool>,
}

pub fn choose_negatives<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    batch: &[usize],
    candidates: &BatchCandidates,
    rng: &mut ChaCha8Rng,
) -> Result<Negatives> {
    let all_labels = ctx.data.features.labels();
    let labels: Vec<u32> = batch.iter().map(|&i| all_labels[i]).collect();
    let mut out = Negatives {
        skipped: vec![true; batch.len()],
        ..Default::default()
    };
    let picks: Vec<Option<usize>> = match ctx.config.sampler {
        SamplerMode::Off => return Ok(out),
        SamplerMode::Random => (0..batch.len())
            .map(|q| random_negative(q, &labels, rng).map(|p| p.negative))
            .collect(),
        SamplerMode::Bertscore => {
            let prompts: Vec<usize> = batch.iter().map(|&i| ctx.data.gt_prompt[i]).collect();
            let ids = batch.iter().map(|&i| ctx.data.features.ids()[i]).collect();
            let m = ctx.similarity.batch_matrix(&prompts, ids, labels.clone())?;
            (0..batch.len())
                .map(|q| select_negative(q, &m).map(|p| p.negative))
                .collect()
        }
    };
    for (q, pick) in picks.into_iter().enumerate() {
        let Some(k) = pick else { continue };
        let Some(pos) = candidates.position(q, labels[k]) else { continue };
        out.query.push(q);
        out.negative.push(k);
        out.neg_pos.push(pos);
        out.skipped[q] = false;
    }
    Ok(out)
}

/// Detached embeddings of each query's candidates, `[queries * k x d_v]`.
fn query_embeddings<S: Scalar>(fwd: &Forward<'_, S>, queries: &[usize]) -> Result<Tensor<S>> {
    let e = fwd.embeddings.value();
    let (_, d) = e.dims2();
    let k = fwd.candidates.k;
    let mut data = Vec::with_capacity(queries.len() * k * d);
    for &q in queries {
        data.extend_from_slice(&e.data()[q * k * d..(q + 1) * k * d]);
    }
    Tensor::new(vec![queries.len() * k, d], data)
}

fn rows_of<S: Scalar>(t: &Tensor<S>, rows: &[usize]) -> Tensor<S> {
    let d = t.dims2().1;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("row gather")
}

/// Runs the inner ascent for every query, returning the gate.
pub fn solve_gates<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    fwd: &Forward<'_, S>,
    negatives: &Negatives,
) -> Result<Gate<S>> {
    let v = fwd.features.value();
    let vq = rows_of(&v, &negatives.query);
    let vn = rows_of(&v, &negatives.negative);
    let emb = query_embeddings(fwd, &negatives.query)?;
    let problem = InnerProblem {
        v: &vq,
        v_neg: &vn,
        embeddings: &emb,
        neg_pos: &negatives.neg_pos,
        tau: S::lit(ctx.config.tau),
    };
    let gate = Gate::init(negatives.query.len(), v.dims2().1, ctx.config.gate.rho_init);
    inner_maximize(gate, &problem, &ctx.config.gate)
}

/// Contrastive term of the given queries with gate weights `u`.
pub fn contrastive<'t, S: Scalar>(
    fwd: &Forward<'t, S>,
    negatives: &Negatives,
    u: Var<'t, S>,
    tau: S,
) -> Result<Var<'t, S>> {
    let vq = fwd.features.gather_rows(&negatives.query)?;
    let vn = fwd.features.gather_rows(&negatives.negative)?;
    let v_prime = mix(vq, vn, u)?;
    let k = fwd.candidates.k;
    let gt: Vec<usize> = negatives
        .query
        .iter()
        .map(|&q| q * k + fwd.candidates.targets[q])
        .collect();
    let g = fwd.embeddings.gather_rows(&gt)?;
    cl_loss(vq, v_prime, g, tau)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub gates: Vec<GateRecord>,
}

fn numeric(err: Error, ids: &[u64]) -> Error {
    match err {
        Error::NonFinite { op } => Error::Numeric {
            batch: ids.to_vec(),
            detail: format!("non-finite value in {op}"),
        },
        Error::Numeric { detail, .. } => Error::Numeric {
            batch: ids.to_vec(),
            detail,
        },
        other => other,
    }
}

fn argmax_correct<S: Scalar>(cos: &Tensor<S>, targets: &[usize]) -> usize {
    let (_, k) = cos.dims2();
    targets
        .iter()
        .enumerate()
        .filter(|(r, &t)| {
            let row = &cos.data()[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count()
}

/// One step of the training algorithm on `batch`: negatives, gate ascent,
/// joint loss, one parameter update.
pub fn train_step<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    params: &mut PromptParams<S>,
    opt: &mut Sgd<S>,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let ids: Vec<u64> = batch.iter().map(|&i| ctx.data.features.ids()[i]).collect();
    step_inner(ctx, params, opt, batch, rng).map_err(|e| numeric(e, &ids))
}

fn step_inner<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    params: &mut PromptParams<S>,
    opt: &mut Sgd<S>,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let cfg = ctx.config;
    if batch.len() < 2 {
        return Err(Error::Input(format!("batch of {} instances", batch.len())));
    }
    let tau = S::lit(cfg.tau);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let fwd = forward(ctx, &bound, &tape, batch)?;
    let correct = argmax_correct(&fwd.cosines.value(), &fwd.candidates.targets);
    let negatives = if cfg.uses_counterfactuals() {
        choose_negatives(ctx, batch, &fwd.candidates, rng)?
    } else {
        Negatives {
            skipped: vec![true; batch.len()],
            ..Default::default()
        }
    };
    let mut total = fwd.ce;
    let mut cl_value = 0.0;
    let mut l1_value = 0.0;
    let mut gate_rows = None;
    let mut rho_leaf = None;
    if !negatives.query.is_empty() {
        let gate = solve_gates(ctx, &fwd, &negatives)?;
        let u = if cfg.joint_u_grad {
            let rho = tape.leaf(gate.rho().clone());
            rho_leaf = Some(rho);
            rho.sigmoid()?
        } else {
            tape.constant(gate.snapshot())
        };
        let cl = contrastive(&fwd, &negatives, u, tau)?;
        let q = negatives.query.len();
        let l1 = u.l1_norm()?.scale(S::one() / S::lit(q as f64))?;
        cl_value = cl.value().item().to_f64_lossy();
        l1_value = l1.value().item().to_f64_lossy();
        if cfg.lambda != 0.0 {
            total = total.add(&cl.scale(S::lit(cfg.lambda))?)?;
        }
        if rho_leaf.is_some() {
            total = total.add(&l1.scale(S::lit(cfg.gate.beta))?)?;
        }
        gate_rows = Some(gate);
    }
    let ce_value = fwd.ce.value().item().to_f64_lossy();
    let loss = LossBreakdown::new(ce_value, cl_value, l1_value, cfg.lambda, negatives.skipped.clone());
    if !loss.is_finite() {
        return Err(Error::Numeric {
            batch: vec![],
            detail: format!("non-finite loss {loss:?}"),
        });
    }
    let grads = tape.backward(total)?;
    let param_grads: Vec<Tensor<S>> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    if param_grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            batch: vec![],
            detail: "non-finite gradient".into(),
        });
    }
    let u_final = match (gate_rows, rho_leaf) {
        (Some(gate), Some(rho)) => {
            let mut next = gate.rho().clone();
            let g = grads.wrt(rho);
            let eta = S::lit(cfg.gate.step_size);
            for (x, &gi) in next.data_mut().iter_mut().zip(g.data()) {
                *x -= eta * gi;
            }
            Some(Gate::from_rho(next).snapshot())
        }
        (Some(gate), None) => Some(gate.snapshot()),
        _ => None,
    };
    opt.update(&mut params.params_mut(), &param_grads)?;
    let mut gates = Vec::new();
    if let Some(u) = u_final {
        let fid = ctx.data.features.ids();
        for (r, (&q, &k)) in negatives.query.iter().zip(&negatives.negative).enumerate() {
            gates.push(GateRecord {
                query_id: fid[batch[q]],
                negative_id: fid[batch[k]],
                u: u.row(r).iter().map(|x| x.to_f64_lossy() as f32).collect(),
            });
        }
    }
    Ok(StepOutput {
        loss,
        correct,
        gates,
    })
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub ce: f64,
    pub cl: f64,
    pub l1: f64,
    pub train_acc: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Next batch within the current epoch; always 0 at epoch boundaries.
    pub batch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochSummary>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self {
            epoch: 0,
            batch: 0,
            rng,
            history: Vec::new(),
        }
    }
}

/// Shuffled batches of one epoch; a trailing singleton joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size.max(1));
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

/// What `fit` reports after each epoch.
pub struct EpochEnd<'a, S> {
    pub summary: &'a EpochSummary,
    pub gates: &'a [GateRecord],
    pub params: &'a PromptParams<S>,
    pub optimizer: &'a Sgd<S>,
    pub state: &'a TrainState,
}

/// Runs the remaining epochs of `config.epochs`, calling `on_epoch` after each.
pub fn fit<S: Scalar>(
    ctx: &TrainContext<'_, S>,
    params: &mut PromptParams<S>,
    opt: &mut Sgd<S>,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(EpochEnd<'_, S>) -> Result<()>,
) -> Result<()> {
    ctx.config.validate()?;
    let n = ctx.data.features.len();
    if n < 2 {
        return Err(Error::Input(format!("{n} training instances")));
    }
    while state.epoch < ctx.config.epochs {
        let batches = epoch_batches(n, ctx.config.batch_size, &mut state.rng);
        let (mut ce, mut cl, mut l1, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut gates = Vec::new();
        for batch in &batches {
            let out = train_step(ctx, params, opt, batch, &mut state.rng)?;
            let w = batch.len() as f64;
            ce += out.loss.ce * w;
            cl += out.loss.cl * w;
            l1 += out.loss.l1 * w;
            correct += out.correct;
            gates.extend(out.gates);
        }
        state.epoch += 1;
        state.batch = 0;
        let summary = EpochSummary {
            epoch: state.epoch,
            ce: ce / n as f64,
            cl: cl / n as f64,
            l1: l1 / n as f64,
            train_acc: correct as f64 / n as f64,
        };
        state.history.push(summary.clone());
        on_epoch(EpochEnd {
            summary: &summary,
            gates: &gates,
            params,
            optimizer: opt,
            state,
        })?;
    }
    Ok(())
}
