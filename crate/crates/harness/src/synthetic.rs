//! Synthetic benchmark with a planted spurious shortcut.
//!
//! Class prototypes come from the frozen encoder itself (a hidden context
//! prepended to each "<adjective> <noun>" name), so a learned context can
//! recover them. The last `spurious_dims` coordinates carry a class signature
//! in seen-class training data only; everywhere else they are pure noise.

use cpl_core::autodiff::{Parameter, Tape, Tensor};
use cpl_core::encoder::{EncoderConfig, FrozenEncoder, Vocabulary};
use cpl_core::prompt::{
    build_task_prompts, encode_pairs, ContextPrompt, PromptBank, PromptParams, PromptRecord,
    PromptSpec, TaskKind,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Record};
use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{HarnessError, Result};

pub const ADJECTIVES: [&str; 8] = ["red", "blue", "green", "small", "large", "dark", "bright", "old"];
pub const NOUNS: [&str; 8] = ["cat", "dog", "bird", "fish", "car", "boat", "tree", "flower"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_v: usize,
    pub prototype_scale: f64,
    /// Feature noise standard deviation.
    pub sigma: f64,
    /// Trailing coordinates carrying the seen-class signature.
    pub spurious_dims: usize,
    /// Signature amplitude in seen-class training data.
    pub kappa: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden_context_len: usize,
    pub hidden_context_std: f64,
    /// How many of the built-in adjectives and nouns form class names.
    pub adjectives: usize,
    pub nouns: usize,
    /// Frozen encoder shared by generation and training; `d_v` must agree.
    pub encoder: EncoderConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 8,
            d_v: 32,
            prototype_scale: 1.0,
            sigma: 0.1,
            spurious_dims: 8,
            kappa: 2.0,
            seed: 0,
            train_per_class: 16,
            test_per_class: 50,
            hidden_context_len: 4,
            hidden_context_std: 0.05,
            adjectives: 4,
            nouns: 4,
            encoder: EncoderConfig {
                d_v: 32,
                ..EncoderConfig::default()
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(format!("synthetic spec: {m}")));
        if self.n_seen == 0 || self.n_unseen == 0 {
            return bad("need at least one seen and one unseen class".into());
        }
        if self.spurious_dims >= self.d_v {
            return bad(format!(
                "spurious dims {} must be below d_v {}",
                self.spurious_dims, self.d_v
            ));
        }
        if self.encoder.d_v != self.d_v {
            return bad(format!(
                "encoder.d_v {} differs from d_v {}",
                self.encoder.d_v, self.d_v
            ));
        }
        if self.adjectives > ADJECTIVES.len() || self.nouns > NOUNS.len() {
            return bad(format!(
                "at most {} adjectives and {} nouns",
                ADJECTIVES.len(),
                NOUNS.len()
            ));
        }
        if self.adjectives * self.nouns < self.n_seen + self.n_unseen {
            return bad(format!(
                "{}x{} names cannot cover {} classes",
                self.adjectives,
                self.nouns,
                self.n_seen + self.n_unseen
            ));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("kappa", self.kappa),
            ("hidden_context_std", self.hidden_context_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v}"));
            }
        }
        if !(self.prototype_scale > 0.0) || !self.prototype_scale.is_finite() {
            return bad(format!("prototype_scale {}", self.prototype_scale));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.hidden_context_len == 0 {
            return bad("per-class counts and hidden context length must be positive".into());
        }
        self.encoder
            .validate()
            .map_err(|e| HarnessError::Config(format!("synthetic spec encoder: {e}")))
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }
}

/// Generated benchmark plus the quantities tests inspect.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Unit-scale class prototypes, `[classes x d_v]`, spurious dims zero.
    pub prototypes: Vec<Vec<f32>>,
    pub class_names: Vec<String>,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    Tensor::<f32>::randn(&[n], std, rng).into_data()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let classes = spec.n_classes();
    let (d, s) = (spec.d_v, spec.spurious_dims);

    let mut pairs: Vec<String> = ADJECTIVES[..spec.adjectives]
        .iter()
        .flat_map(|a| NOUNS[..spec.nouns].iter().map(move |n| format!("{a} {n}")))
        .collect();
    pairs.shuffle(&mut rng);
    let class_names: Vec<String> = pairs.into_iter().take(classes).collect();

    let vocab = Vocabulary::build(&class_names).map_err(HarnessError::core("synthetic vocabulary"))?;
    let encoder = FrozenEncoder::<f32>::init(&spec.encoder, vocab.len())
        .map_err(HarnessError::core("synthetic encoder"))?;
    let specs: Vec<(u32, PromptSpec)> = class_names
        .iter()
        .enumerate()
        .map(|(c, n)| (c as u32, PromptSpec::ClassName(n.clone())))
        .collect();
    let max_tokens = spec
        .encoder
        .max_seq_len
        .checked_sub(spec.hidden_context_len)
        .filter(|&m| m >= 2)
        .ok_or_else(|| HarnessError::Config("hidden context leaves no room for class names".into()))?;
    let prompts = build_task_prompts(&specs, &vocab, max_tokens).map_err(HarnessError::core("synthetic prompts"))?;
    let bank = PromptBank::new(&encoder, prompts).map_err(HarnessError::core("synthetic prompts"))?;

    let hidden = PromptParams {
        context: ContextPrompt {
            rows: Parameter::frozen(
                "context",
                Tensor::randn(&[spec.hidden_context_len, spec.encoder.d_e], spec.hidden_context_std, &mut rng),
            ),
        },
        meta: None,
    };
    let g = {
        let tape = Tape::new();
        let bound = hidden.bind(&tape);
        let dummy = tape.constant(Tensor::ones(&[1, d]));
        let pairs: Vec<(usize, usize)> = (0..classes).map(|c| (0, c)).collect();
        let out = encode_pairs(&encoder, &bank, &bound, dummy, &pairs).map_err(HarnessError::core("synthetic prototypes"))?;
        out.value().to_f64_vec()
    };

    let mut mean = vec![0.0f64; d];
    for c in 0..classes {
        for j in 0..d {
            mean[j] += g[c * d + j] / classes as f64;
        }
    }
    let mut prototypes = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut row: Vec<f64> = (0..d).map(|j| if j < d - s { g[c * d + j] - mean[j] } else { 0.0 }).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(HarnessError::Data(format!("class {c} prototype vanished after centering")));
        }
        row.iter_mut().for_each(|x| *x *= spec.prototype_scale / norm);
        prototypes.push(row.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
    }

    let sample = |c: usize, train: bool, rng: &mut ChaCha8Rng, records: &mut Vec<Record>| {
        let noise = normal(rng, d, spec.sigma);
        let mut v: Vec<f32> = prototypes[c].iter().zip(&noise).map(|(p, n)| p + n).collect();
        if train {
            let extra = normal(rng, s, spec.sigma);
            for k in 0..s {
                let sig = if k == c % s.max(1) { spec.kappa as f32 } else { 0.0 };
                v[d - s + k] = sig + extra[k];
            }
        }
        let id = records.len() as u64;
        records.push(Record {
            id,
            label: c as u32,
            feature: v,
        });
    };
    let mut records = Vec::new();
    for c in 0..spec.n_seen {
        for _ in 0..spec.train_per_class {
            sample(c, true, &mut rng, &mut records);
        }
    }
    let test_start = records.len() as u64;
    for c in 0..classes {
        for _ in 0..spec.test_per_class {
            sample(c, false, &mut rng, &mut records);
        }
    }
    let n = records.len() as u64;
    let archive = Archive::new(d as u32, records)?;

    let prompts = class_names
        .iter()
        .enumerate()
        .map(|(c, text)| PromptRecord {
            id: c as u64,
            class_id: c as u32,
            text: text.clone(),
            question_type: None,
        })
        .collect();
    let meta = DatasetMeta {
        task: TaskKind::Classification,
        encoder: Some(spec.encoder.clone()),
        seen_classes: Some((0..spec.n_seen as u32).collect()),
        test_pool: Some((test_start..n).collect()),
        spurious_dims: Some(s),
    };
    let dataset = Dataset::from_parts(archive, prompts, meta)?;
    Ok(Synthetic {
        dataset,
        prototypes,
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_seen: 2,
            n_unseen: 2,
            train_per_class: 3,
            test_per_class: 2,
            encoder: EncoderConfig {
                d_e: 16,
                d_v: 32,
                layers: 1,
                heads: 2,
                ..EncoderConfig::default()
            },
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn spurious_dims_must_fit() {
        let spec = SyntheticSpec {
            spurious_dims: 32,
            ..small()
        };
        assert!(matches!(gen_synthetic(&spec), Err(HarnessError::Config(_))));
    }

    #[test]
    fn layout_and_determinism() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a.dataset.archive.to_bytes(), b.dataset.archive.to_bytes());
        assert_eq!(a.dataset.archive.records.len(), 2 * 3 + 4 * 2);
        assert_eq!(a.dataset.meta.test_pool.as_ref().unwrap().len(), 8);
        for p in &a.prototypes {
            let norm: f32 = p.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
            assert!(p[24..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn names_are_two_words() {
        let a = gen_synthetic(&small()).unwrap();
        assert!(a.class_names.iter().all(|n| n.split(' ').count() == 2));
    }
}
