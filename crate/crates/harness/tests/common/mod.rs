#![allow(dead_code)]

use std::path::Path;

use cpl_core::encoder::EncoderConfig;
use cpl_harness::archive::{Archive, ArchiveFormat, Record};
use cpl_harness::config::{ArchiveSource, DataSource, RunConfig};
use cpl_harness::dataset::{Dataset, DatasetMeta};
use cpl_harness::synthetic::SyntheticSpec;
use cpl_core::prompt::PromptRecord;

pub fn tiny_encoder(d_v: usize) -> EncoderConfig {
    EncoderConfig {
        d_e: 16,
        d_v,
        layers: 1,
        heads: 2,
        max_seq_len: 12,
        ..EncoderConfig::default()
    }
}

/// A few-second benchmark: 4 seen + 4 unseen classes, d_v 16.
pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_seen: 4,
        n_unseen: 4,
        d_v: 16,
        spurious_dims: 4,
        train_per_class: 8,
        test_per_class: 10,
        hidden_context_len: 2,
        adjectives: 3,
        nouns: 3,
        seed,
        encoder: tiny_encoder(16),
        ..SyntheticSpec::default()
    }
}

pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        data: DataSource::Synthetic(tiny_spec(seed)),
        shots: 4,
        batch_size: 8,
        epochs: 3,
        context_len: 2,
        seed,
        ..RunConfig::default()
    }
}

pub const WORDS: [&str; 6] = ["red cat", "blue dog", "green bird", "dark fish", "old tree", "small boat"];

/// Writes `features` (one row per record, labels cycling over `classes`) with
/// class-name prompts and returns a config that reads them back.
pub fn archive_config(dir: &Path, classes: usize, rows: &[Vec<f32>], meta: DatasetMeta) -> RunConfig {
    let d_v = rows[0].len();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, f)| Record {
            id: i as u64,
            label: (i % classes) as u32,
            feature: f.clone(),
        })
        .collect();
    let prompts = (0..classes)
        .map(|c| PromptRecord {
            id: c as u64,
            class_id: c as u32,
            text: WORDS[c].to_string(),
            question_type: None,
        })
        .collect();
    let dataset = Dataset::from_parts(Archive::new(d_v as u32, records).unwrap(), prompts, meta).unwrap();
    let path = dir.join("data.cple");
    dataset.write(&path, ArchiveFormat::Binary).unwrap();
    RunConfig {
        data: DataSource::Archive(ArchiveSource {
            features: path,
            prompts: None,
            meta: None,
        }),
        encoder: Some(tiny_encoder(d_v)),
        context_len: 2,
        batch_size: 8,
        epochs: 1,
        seen_fraction: 1.0,
        ..RunConfig::default()
    }
}
