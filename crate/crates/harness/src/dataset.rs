use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cpl_core::encoder::{EncoderConfig, FeatureSet};
use cpl_core::prompt::{read_corpus, write_corpus, PromptRecord, PromptSpec, QuestionType, TaskKind};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveFormat};
use crate::error::{io_err, HarnessError, Result};

/// Sidecar describing how an archive is meant to be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(default = "classification")]
    pub task: TaskKind,
    /// Encoder the features were generated against, if any.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    /// Fixed seen partition; otherwise drawn from `seen_fraction`.
    #[serde(default)]
    pub seen_classes: Option<Vec<u32>>,
    /// Records reserved for testing; otherwise everything not trained on.
    #[serde(default)]
    pub test_pool: Option<Vec<u64>>,
    /// Trailing feature dims known to be spurious (synthetic data).
    #[serde(default)]
    pub spurious_dims: Option<usize>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            encoder: None,
            seen_classes: None,
            test_pool: None,
            spurious_dims: None,
        }
    }
}

pub(crate) fn classification() -> TaskKind {
    TaskKind::Classification
}

/// Features, one prompt per class, and the sidecar.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub archive: Archive,
    pub features: FeatureSet<f32>,
    /// Sorted by class id.
    pub prompts: Vec<PromptRecord>,
    pub meta: DatasetMeta,
}

pub fn prompts_path(archive: &Path) -> PathBuf {
    sidecar(archive, "prompts.jsonl")
}

pub fn meta_path(archive: &Path) -> PathBuf {
    sidecar(archive, "meta.json")
}

fn sidecar(archive: &Path, ext: &str) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Dataset {
    pub fn from_parts(archive: Archive, mut prompts: Vec<PromptRecord>, meta: DatasetMeta) -> Result<Self> {
        prompts.sort_by_key(|p| p.class_id);
        if let Some(w) = prompts.windows(2).find(|w| w[0].class_id == w[1].class_id) {
            return Err(HarnessError::Data(format!("class {} has two prompts", w[0].class_id)));
        }
        if prompts.is_empty() {
            return Err(HarnessError::Data("no prompts".into()));
        }
        let classes: BTreeSet<u32> = prompts.iter().map(|p| p.class_id).collect();
        if let Some(r) = archive.records.iter().find(|r| !classes.contains(&r.label)) {
            return Err(HarnessError::Data(format!(
                "record {} has label {} without a prompt",
                r.id, r.label
            )));
        }
        if let Some(seen) = &meta.seen_classes {
            if let Some(c) = seen.iter().find(|c| !classes.contains(c)) {
                return Err(HarnessError::Data(format!("seen class {c} has no prompt")));
            }
        }
        if let Some(pool) = &meta.test_pool {
            let ids: HashSet<u64> = archive.records.iter().map(|r| r.id).collect();
            if let Some(id) = pool.iter().find(|id| !ids.contains(id)) {
                return Err(HarnessError::Data(format!("test pool id {id} not in archive")));
            }
        }
        if let Some(s) = meta.spurious_dims {
            if s >= archive.dim as usize {
                return Err(HarnessError::Data(format!("spurious dims {s} exceed archive dim")));
            }
        }
        let features = archive.features(None)?;
        Ok(Self {
            archive,
            features,
            prompts,
            meta,
        })
    }

    /// Reads an archive with its prompt corpus and optional meta sidecar.
    pub fn load(archive: &Path, prompts: Option<&Path>, meta: Option<&Path>) -> Result<Self> {
        let a = Archive::read(archive)?;
        let ppath = prompts.map_or_else(|| prompts_path(archive), Path::to_path_buf);
        let file = std::fs::File::open(&ppath).map_err(|e| io_err(&ppath, e))?;
        let records = read_corpus(BufReader::new(file))
            .map_err(|e| HarnessError::Data(format!("{}: {e}", ppath.display())))?;
        let mpath = meta.map_or_else(|| meta_path(archive), Path::to_path_buf);
        let meta = if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", mpath.display())))?
        } else if meta.is_some() {
            return Err(HarnessError::Data(format!("{} not found", mpath.display())));
        } else {
            DatasetMeta::default()
        };
        Self::from_parts(a, records, meta)
    }

    /// Writes the archive and its two sidecars.
    pub fn write(&self, archive: &Path, format: ArchiveFormat) -> Result<()> {
        self.archive.write(archive, format)?;
        let ppath = prompts_path(archive);
        let file = std::fs::File::create(&ppath).map_err(|e| io_err(&ppath, e))?;
        write_corpus(std::io::BufWriter::new(file), &self.prompts)
            .map_err(|e| HarnessError::Data(format!("{}: {e}", ppath.display())))?;
        let mpath = meta_path(archive);
        let text = serde_json::to_string_pretty(&self.meta).expect("meta json");
        std::fs::write(&mpath, text + "\n").map_err(|e| io_err(&mpath, e))
    }

    pub fn classes(&self) -> Vec<u32> {
        self.prompts.iter().map(|p| p.class_id).collect()
    }

    pub fn prompt_texts(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.text.as_str()).collect()
    }

    /// Prompt spec of every class under `task`.
    pub fn prompt_specs(&self, task: TaskKind) -> Result<Vec<(u32, PromptSpec)>> {
        self.prompts
            .iter()
            .map(|p| {
                let spec = match task {
                    TaskKind::Classification => PromptSpec::ClassName(p.text.clone()),
                    TaskKind::Retrieval => PromptSpec::Caption(p.text.clone()),
                    TaskKind::Vqa => {
                        let qt = p.question_type.as_deref().ok_or_else(|| {
                            HarnessError::Data(format!("vqa prompt {} lacks question_type", p.id))
                        })?;
                        PromptSpec::Vqa {
                            question_type: qt.parse::<QuestionType>()?,
                            declarative: p.text.clone(),
                            answer: String::new(),
                        }
                    }
                };
                Ok((p.class_id, spec))
            })
            .collect()
    }

    /// Row indices of each label.
    pub fn by_label(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.features.labels().iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Record;

    fn tiny() -> Dataset {
        let archive = Archive::new(
            2,
            vec![
                Record { id: 1, label: 0, feature: vec![1.0, 0.0] },
                Record { id: 2, label: 1, feature: vec![0.0, 1.0] },
            ],
        )
        .unwrap();
        let prompts = vec![
            PromptRecord { id: 0, class_id: 1, text: "dog".into(), question_type: None },
            PromptRecord { id: 1, class_id: 0, text: "cat".into(), question_type: None },
        ];
        Dataset::from_parts(archive, prompts, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn sidecars_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cple");
        let d = tiny();
        d.write(&path, ArchiveFormat::Binary).unwrap();
        let back = Dataset::load(&path, None, None).unwrap();
        assert_eq!(back.archive, d.archive);
        assert_eq!(back.prompts, d.prompts);
        assert_eq!(back.classes(), vec![0, 1]);
    }

    #[test]
    fn labels_need_prompts() {
        let d = tiny();
        let res = Dataset::from_parts(d.archive.clone(), d.prompts[..1].to_vec(), DatasetMeta::default());
        assert!(matches!(res, Err(HarnessError::Data(_))));
    }
}
