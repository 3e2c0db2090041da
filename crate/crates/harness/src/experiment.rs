//! End-to-end runs: data, split, fit, evaluate, persist.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cpl_core::counterfactual::GateRecord;
use cpl_core::encoder::{EncoderConfig, FeatureSet, FrozenEncoder, Vocabulary};
use cpl_core::objective::{
    fit, init_params, predict, steps_per_epoch, Checkpoint, ClassSpace, EpochSummary, Sgd,
    TaskData, TrainContext, TrainState,
};
use cpl_core::prompt::{build_task_prompts, PromptBank, PromptParams, TaskKind};
use cpl_core::sampler::{PromptSimilarity, SimilarityMatrix};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::dataset::Dataset;
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{gate_summary, metrics_from_rows, MetricsReport, PredictionRow};
use crate::split::{make_split, FewShotSplit};
use crate::synthetic::gen_synthetic;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GATES_FILE: &str = "gates.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.json";

/// Which test instances to score, and against which classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// Seen-class test instances against seen-class prompts.
    Seen,
    /// Unseen-class test instances against unseen-class prompts.
    Unseen,
    /// Every test instance against every prompt.
    All,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Seen => "seen",
            EvalSplit::Unseen => "unseen",
            EvalSplit::All => "all",
        }
    }

    /// Splits reported at the end of a run.
    pub fn defaults(task: TaskKind) -> &'static [EvalSplit] {
        match task {
            TaskKind::Retrieval => &[EvalSplit::All],
            _ => &[EvalSplit::Seen, EvalSplit::Unseen],
        }
    }
}

/// Everything derived from a config before any training.
pub struct Prepared {
    pub config: RunConfig,
    pub run_id: String,
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub encoder: FrozenEncoder<f32>,
    pub bank: PromptBank<f32>,
    pub similarity: PromptSimilarity,
    pub split: FewShotSplit,
    pub train: FeatureSet<f32>,
    pub train_prompt: Vec<usize>,
    pub space: ClassSpace,
    /// Class id to bank row.
    pub prompt_index: BTreeMap<u32, usize>,
}

fn resolve_encoder(config: &RunConfig, dataset: &Dataset) -> Result<EncoderConfig> {
    let from_data = dataset.meta.encoder.clone();
    let enc = match (&config.encoder, from_data) {
        (Some(a), Some(b)) if *a != b => {
            return Err(HarnessError::Config("encoder differs from the one recorded with the data".into()))
        }
        (Some(a), _) => a.clone(),
        (None, Some(b)) => b,
        (None, None) => return Err(HarnessError::Config("no encoder config for this archive".into())),
    };
    if enc.d_v != dataset.archive.dim as usize {
        return Err(HarnessError::Data(format!(
            "archive dim {} does not match encoder d_v {}",
            dataset.archive.dim, enc.d_v
        )));
    }
    Ok(enc)
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic(spec) => Ok(gen_synthetic(spec)?.dataset),
        DataSource::Archive(a) => {
            let d = Dataset::load(&a.features, a.prompts.as_deref(), a.meta.as_deref())?;
            if d.meta.task != config.task {
                return Err(HarnessError::Config(format!(
                    "data is for {:?}, config asks for {:?}",
                    d.meta.task, config.task
                )));
            }
            Ok(d)
        }
    }
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let run_id = config.hash()[..12].to_string();
    let ctx = |what: &str| HarnessError::core(format!("run {run_id}: {what}"));
    let dataset = load_dataset(config)?;
    let enc_config = resolve_encoder(config, &dataset)?;

    let specs = dataset.prompt_specs(config.task)?;
    let texts = specs
        .iter()
        .map(|(_, s)| s.text())
        .collect::<cpl_core::Result<Vec<_>>>()
        .map_err(ctx("prompts"))?;
    let vocab = Vocabulary::build(&texts).map_err(ctx("vocabulary"))?;
    let encoder = FrozenEncoder::<f32>::init(&enc_config, vocab.len()).map_err(ctx("encoder"))?;
    let max_tokens = enc_config.max_seq_len.saturating_sub(config.context_len);
    let prompts = build_task_prompts(&specs, &vocab, max_tokens).map_err(ctx("prompts"))?;
    let bank = PromptBank::new(&encoder, prompts).map_err(ctx("prompt bank"))?;
    let mut similarity = PromptSimilarity::new(&encoder, bank.prompts()).map_err(ctx("similarity"))?;
    if config.precompute_similarity {
        similarity.precompute();
    }
    let prompt_index: BTreeMap<u32, usize> = dataset.classes().into_iter().enumerate().map(|(j, c)| (c, j)).collect();

    let split = make_split(&dataset, config.selection(), config.seen_fraction, config.seed)?;
    let train = dataset.features.subset(&split.train_rows);
    let train_prompt = train.labels().iter().map(|l| prompt_index[l]).collect();
    let space = match config.task {
        TaskKind::Retrieval => ClassSpace::InBatch,
        _ => ClassSpace::Fixed(split.seen.iter().map(|c| (*c, prompt_index[c])).collect()),
    };
    Ok(Prepared {
        config: config.clone(),
        run_id,
        dataset,
        vocab,
        encoder,
        bank,
        similarity,
        split,
        train,
        train_prompt,
        space,
        prompt_index,
    })
}

impl Prepared {
    pub fn context<'a>(&'a self, train: &'a cpl_core::objective::TrainConfig) -> TrainContext<'a, f32> {
        TrainContext {
            encoder: &self.encoder,
            bank: &self.bank,
            similarity: &self.similarity,
            data: TaskData {
                features: &self.train,
                gt_prompt: &self.train_prompt,
                space: &self.space,
            },
            config: train,
        }
    }

    pub fn fresh_state(&self) -> Result<(PromptParams<f32>, Sgd<f32>, TrainState)> {
        let train = self.config.train_config();
        let params = init_params(&train, &self.encoder).map_err(HarnessError::core("init"))?;
        let horizon = (train.epochs * steps_per_epoch(self.train.len(), train.batch_size)) as u64;
        let opt = Sgd::new(train.optim.clone(), &params.params(), horizon).map_err(HarnessError::core("optimizer"))?;
        Ok((params, opt, TrainState::new(train.seed)))
    }

    /// Test rows of `split` and the classes they compete over.
    fn eval_target(&self, split: EvalSplit) -> (Vec<usize>, Vec<u32>) {
        let labels = self.dataset.features.labels();
        let classes: Vec<u32> = match split {
            EvalSplit::Seen => self.split.seen.clone(),
            EvalSplit::Unseen => self.split.unseen.clone(),
            EvalSplit::All => self.prompt_index.keys().copied().collect(),
        };
        let rows = self
            .split
            .test_rows
            .iter()
            .copied()
            .filter(|&i| classes.binary_search(&labels[i]).is_ok())
            .collect();
        (rows, classes)
    }

    pub fn evaluate(&self, params: &PromptParams<f32>, split: EvalSplit) -> Result<Vec<PredictionRow>> {
        let (rows, classes) = self.eval_target(split);
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let features = self.dataset.features.subset(&rows);
        let gt: Vec<usize> = features.labels().iter().map(|l| self.prompt_index[l]).collect();
        let space = ClassSpace::Fixed(classes.iter().map(|c| (*c, self.prompt_index[c])).collect());
        let data = TaskData {
            features: &features,
            gt_prompt: &gt,
            space: &space,
        };
        let preds = predict(&self.encoder, &self.bank, params, data)
            .map_err(HarnessError::core(format!("run {}: evaluate {}", self.run_id, split.name())))?;
        Ok(preds
            .iter()
            .map(|p| PredictionRow::from_prediction(split.name(), features.ids()[p.index], p))
            .collect())
    }

    /// BERTScore matrix over the training instances' prompts.
    pub fn similarity_matrix(&self) -> Result<SimilarityMatrix> {
        self.similarity
            .batch_matrix(&self.train_prompt, self.train.ids().to_vec(), self.train.labels().to_vec())
            .map_err(HarnessError::core("similarity matrix"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` in the run directory.
    pub resume: bool,
    /// Stop once this many epochs are complete, leaving a resumable run.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Completed(MetricsReport),
    Stopped { epoch: usize },
}

impl Outcome {
    pub fn report(self) -> Option<MetricsReport> {
        match self {
            Outcome::Completed(r) => Some(r),
            Outcome::Stopped { .. } => None,
        }
    }
}

/// One line of `metrics.jsonl`; accuracies are null on epochs without evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    #[serde(flatten)]
    pub summary: EpochSummary,
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    /// Retrieval runs report a single split over all captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_acc: Option<f64>,
    pub lr: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("jsonl"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    writeln!(f, "{}", serde_json::to_string(item).expect("jsonl")).map_err(|e| io_err(path, e))
}

pub fn read_gates(path: &Path) -> Result<Vec<GateRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn save_checkpoint(dir: &Path, ck: &Checkpoint<f32>) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    ck.save(&tmp).map_err(HarnessError::core("checkpoint"))?;
    let dst = dir.join(CHECKPOINT_FILE);
    std::fs::rename(&tmp, &dst).map_err(|e| io_err(&dst, e))
}

/// Trains per `config` in `dir` and writes every artifact.
pub fn run_experiment(config: &RunConfig, dir: &Path, options: &RunOptions) -> Result<Outcome> {
    let started = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    if options.resume {
        let existing = RunConfig::from_file(&config_path, &[])?;
        if existing != *config {
            return Err(HarnessError::Config(format!(
                "{} differs from the config being resumed",
                config_path.display()
            )));
        }
    }
    let prep = prepare(config)?;
    config.write(&config_path)?;
    prep.vocab.write(dir.join(VOCAB_FILE)).map_err(HarnessError::core("vocabulary"))?;
    let split_path = dir.join(SPLIT_FILE);
    std::fs::write(&split_path, serde_json::to_string_pretty(&prep.split).expect("split json") + "\n")
        .map_err(|e| io_err(&split_path, e))?;

    let metrics_path = dir.join(METRICS_FILE);
    let ck_path = dir.join(CHECKPOINT_FILE);
    let (mut params, mut opt, mut state) = if options.resume && ck_path.exists() {
        let ck = Checkpoint::<f32>::load(&ck_path).map_err(HarnessError::core("checkpoint"))?;
        // keep earlier lines verbatim; re-serializing parsed floats need not round-trip
        let mut kept = String::new();
        if metrics_path.exists() {
            let text = std::fs::read_to_string(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
            for line in text.lines() {
                if serde_json::from_str::<EpochLog>(line).is_ok_and(|l| l.summary.epoch <= ck.state.epoch) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        std::fs::write(&metrics_path, kept).map_err(|e| io_err(&metrics_path, e))?;
        (ck.params, ck.optimizer, ck.state)
    } else {
        let _ = std::fs::remove_file(&metrics_path);
        let _ = std::fs::remove_file(dir.join(GATES_FILE));
        let _ = std::fs::remove_file(&ck_path);
        prep.fresh_state()?
    };

    let mut train = config.train_config();
    if let Some(stop) = options.stop_after {
        train.epochs = train.epochs.min(stop);
    }
    let ctx = prep.context(&train);
    let gates_path = dir.join(GATES_FILE);
    fit(&ctx, &mut params, &mut opt, &mut state, |end| {
        let mut log = EpochLog {
            summary: end.summary.clone(),
            seen_acc: None,
            unseen_acc: None,
            all_acc: None,
            lr: end.optimizer.current_lr(),
        };
        if config.eval_every > 0 && end.summary.epoch % config.eval_every == 0 {
            for &s in EvalSplit::defaults(config.task) {
                let rows = prep.evaluate(end.params, s).map_err(to_core)?;
                let acc = metrics_from_rows(&rows).first().map(|m| m.accuracy);
                match s {
                    EvalSplit::Seen => log.seen_acc = acc,
                    EvalSplit::Unseen => log.unseen_acc = acc,
                    EvalSplit::All => log.all_acc = acc,
                }
            }
        }
        append_jsonl(&metrics_path, &log).map_err(to_core)?;
        write_jsonl(&gates_path, end.gates).map_err(to_core)?;
        save_checkpoint(
            dir,
            &Checkpoint {
                params: end.params.clone(),
                optimizer: end.optimizer.clone(),
                state: end.state.clone(),
            },
        )
        .map_err(to_core)
    })
    .map_err(|e| match e {
        cpl_core::Error::Io { path, detail } if path == HARNESS_MARK => HarnessError::Data(detail),
        e => HarnessError::Core {
            context: format!("run {}", prep.run_id),
            source: e,
        },
    })?;

    if state.epoch < config.epochs {
        return Ok(Outcome::Stopped { epoch: state.epoch });
    }
    if !ck_path.exists() {
        save_checkpoint(dir, &Checkpoint { params: params.clone(), optimizer: opt, state: state.clone() })?;
    }
    let report = finish(&prep, &params, &state, dir, started)?;
    Ok(Outcome::Completed(report))
}

const HARNESS_MARK: &str = "<harness>";

/// Carries a harness failure through the core callback signature.
fn to_core(e: HarnessError) -> cpl_core::Error {
    cpl_core::Error::Io {
        path: HARNESS_MARK.into(),
        detail: e.to_string(),
    }
}

fn finish(
    prep: &Prepared,
    params: &PromptParams<f32>,
    state: &TrainState,
    dir: &Path,
    started: Instant,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for &s in EvalSplit::defaults(prep.config.task) {
        rows.extend(prep.evaluate(params, s)?);
    }
    crate::metrics::write_predictions(&dir.join(PREDICTIONS_FILE), &rows)?;
    let gates_path = dir.join(GATES_FILE);
    let gates = if gates_path.exists() { read_gates(&gates_path)? } else { Vec::new() };
    let report = MetricsReport {
        run_id: prep.run_id.clone(),
        task: prep.config.task,
        config_hash: prep.config.hash(),
        epochs: state.epoch,
        final_epoch: state.history.last().cloned(),
        splits: metrics_from_rows(&rows),
        gates: gate_summary(&gates, prep.dataset.meta.spurious_dims),
        wall_time_secs: started.elapsed().as_secs_f64(),
        hash: String::new(),
    }
    .seal();
    report.write(&dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Re-scores a finished run from its directory.
pub fn evaluate_run(dir: &Path, splits: &[EvalSplit]) -> Result<MetricsReport> {
    let started = Instant::now();
    let config = RunConfig::from_file(&dir.join(CONFIG_FILE), &[])?;
    let prep = prepare(&config)?;
    let ck = Checkpoint::<f32>::load(dir.join(CHECKPOINT_FILE)).map_err(HarnessError::core("checkpoint"))?;
    let mut rows = Vec::new();
    for &s in splits {
        rows.extend(prep.evaluate(&ck.params, s)?);
    }
    let gates_path = dir.join(GATES_FILE);
    let gates = if gates_path.exists() { read_gates(&gates_path)? } else { Vec::new() };
    Ok(MetricsReport {
        run_id: prep.run_id.clone(),
        task: config.task,
        config_hash: config.hash(),
        epochs: ck.state.epoch,
        final_epoch: ck.state.history.last().cloned(),
        splits: metrics_from_rows(&rows),
        gates: gate_summary(&gates, prep.dataset.meta.spurious_dims),
        wall_time_secs: started.elapsed().as_secs_f64(),
        hash: String::new(),
    }
    .seal())
}

/// Runs `config` once per value of `key`, each in `dir/<key>=<value>`.
pub fn run_sweep(
    config_path: &Path,
    base_overrides: &[String],
    key: &str,
    values: &[String],
    dir: &Path,
) -> Result<Vec<(PathBuf, MetricsReport)>> {
    let mut out = Vec::new();
    for v in values {
        let mut overrides = base_overrides.to_vec();
        overrides.push(format!("{key}={v}"));
        let config = RunConfig::from_file(config_path, &overrides)?;
        let sub = dir.join(format!("{key}={v}"));
        let report = run_experiment(&config, &sub, &RunOptions::default())?
            .report()
            .expect("sweep runs complete");
        out.push((sub, report));
    }
    Ok(out)
}
