use std::path::{Path, PathBuf};

use cpl_core::counterfactual::GateConfig;
use cpl_core::encoder::EncoderConfig;
use cpl_core::objective::{OptimConfig, TrainConfig};
use cpl_core::prompt::TaskKind;
use cpl_core::sampler::SamplerMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::classification;
use crate::error::{io_err, HarnessError, Result};
use crate::split::Selection;
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in-process from the spec.
    Synthetic(SyntheticSpec),
    /// Archive on disk; sidecar paths default to `<features>.prompts.jsonl`
    /// and `<features>.meta.json`.
    Archive(ArchiveSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveSource {
    pub features: PathBuf,
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    #[serde(default)]
    pub meta: Option<PathBuf>,
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub data: DataSource,
    /// Required for archives without an encoder in their meta sidecar.
    pub encoder: Option<EncoderConfig>,
    pub lambda: f64,
    pub tau: f64,
    pub inner_steps: usize,
    pub beta: f64,
    pub eta_u: f64,
    pub rho_init: f64,
    pub backtrack: bool,
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub shots: usize,
    /// Takes precedence over `shots` when set.
    pub subset_fraction: Option<f64>,
    pub seen_fraction: f64,
    pub sampler: SamplerMode,
    pub precompute_similarity: bool,
    pub joint_u_grad: bool,
    pub context_len: usize,
    pub context_std: f64,
    pub use_meta_net: bool,
    pub seed: u64,
    /// Evaluate the test split every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            task: classification(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            encoder: None,
            lambda: train.lambda,
            tau: train.tau,
            inner_steps: train.gate.steps,
            beta: train.gate.beta,
            eta_u: train.gate.step_size,
            rho_init: train.gate.rho_init,
            backtrack: train.gate.backtrack,
            lr: train.optim.lr,
            momentum: train.optim.momentum,
            cosine_decay: train.optim.cosine_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            shots: 16,
            subset_fraction: None,
            seen_fraction: 0.5,
            sampler: train.sampler,
            precompute_similarity: train.precompute_similarity,
            joint_u_grad: train.joint_u_grad,
            context_len: train.context_len,
            context_std: train.context_std,
            use_meta_net: train.use_meta_net,
            seed: train.seed,
            eval_every: 0,
        }
    }
}

impl RunConfig {
    /// Parses JSON text, applying `key=value` overrides first.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config json: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self =
            serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative archive paths resolve against its directory.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Archive(a) = &mut config.data {
            for p in [Some(&mut a.features), a.prompts.as_mut(), a.meta.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| io_err(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config json")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config json")))
    }

    pub fn selection(&self) -> Selection {
        match self.subset_fraction {
            Some(f) => Selection::Subset(f),
            None => Selection::Shots(self.shots),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            tau: self.tau,
            gate: GateConfig {
                steps: self.inner_steps,
                step_size: self.eta_u,
                beta: self.beta,
                rho_init: self.rho_init,
                backtrack: self.backtrack,
            },
            optim: OptimConfig {
                lr: self.lr,
                momentum: self.momentum,
                cosine_decay: self.cosine_decay,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            sampler: self.sampler,
            precompute_similarity: self.precompute_similarity,
            joint_u_grad: self.joint_u_grad,
            context_len: self.context_len,
            context_std: self.context_std,
            use_meta_net: self.use_meta_net,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(f) = self.subset_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(HarnessError::Config(format!("subset_fraction {f} outside (0, 1]")));
            }
        } else if self.shots == 0 {
            return Err(HarnessError::Config("shots must be positive".into()));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "seen_fraction {} outside (0, 1]",
                self.seen_fraction
            )));
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if self.task != TaskKind::Classification {
                    return Err(HarnessError::Config("synthetic data supports classification only".into()));
                }
                if self.encoder.as_ref().is_some_and(|e| *e != spec.encoder) {
                    return Err(HarnessError::Config(
                        "encoder differs from the synthetic spec's encoder".into(),
                    ));
                }
            }
            DataSource::Archive(_) => {}
        }
        if let Some(e) = &self.encoder {
            e.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Sets a dotted `key=value` path; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key}: {part} is not inside an object")))?;
        if n + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(HarnessError::Config(format!("empty override key in {spec:?}")))
}
