use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};

/// How training instances are drawn from the seen classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Exactly this many per seen class.
    Shots(usize),
    /// This fraction of all seen-class training instances.
    Subset(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    /// Record ids, ascending.
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    /// Row indices into the dataset, parallel to `train` and `test`.
    #[serde(skip)]
    pub train_rows: Vec<usize>,
    #[serde(skip)]
    pub test_rows: Vec<usize>,
}

impl FewShotSplit {
    pub fn is_seen(&self, class: u32) -> bool {
        self.seen.binary_search(&class).is_ok()
    }
}

pub fn make_split(dataset: &Dataset, selection: Selection, seen_fraction: f64, seed: u64) -> Result<FewShotSplit> {
    if !(seen_fraction > 0.0 && seen_fraction <= 1.0) {
        return Err(HarnessError::Config(format!("seen_fraction {seen_fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let classes = dataset.classes();
    let mut seen = match &dataset.meta.seen_classes {
        Some(s) => s.clone(),
        None => {
            let k = ((seen_fraction * classes.len() as f64).round() as usize).clamp(1, classes.len());
            let mut shuffled = classes.clone();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(k);
            shuffled
        }
    };
    seen.sort_unstable();
    seen.dedup();
    let unseen: Vec<u32> = classes.iter().copied().filter(|c| seen.binary_search(c).is_err()).collect();

    let ids = dataset.features.ids();
    let reserved: HashSet<u64> = dataset.meta.test_pool.iter().flatten().copied().collect();
    let by_label = dataset.by_label();
    let pool = |c: u32| -> Vec<usize> {
        by_label
            .get(&c)
            .map(|rows| rows.iter().copied().filter(|&i| !reserved.contains(&ids[i])).collect())
            .unwrap_or_default()
    };

    let mut train_rows = Vec::new();
    match selection {
        Selection::Shots(0) => return Err(HarnessError::Config("shots must be positive".into())),
        Selection::Shots(shots) => {
            for &c in &seen {
                let mut rows = pool(c);
                if rows.len() < shots {
                    return Err(HarnessError::Data(format!(
                        "class {c} has {} training instances, {shots} shots requested",
                        rows.len()
                    )));
                }
                rows.shuffle(&mut rng);
                train_rows.extend_from_slice(&rows[..shots]);
            }
        }
        Selection::Subset(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(HarnessError::Config(format!("subset_fraction {f} outside (0, 1]")));
            }
            let mut rows: Vec<usize> = seen.iter().flat_map(|&c| pool(c)).collect();
            let k = ((f * rows.len() as f64).round() as usize).max(2);
            if rows.len() < k {
                return Err(HarnessError::Data(format!(
                    "{} seen-class training instances, need {k}",
                    rows.len()
                )));
            }
            rows.shuffle(&mut rng);
            train_rows.extend_from_slice(&rows[..k]);
        }
    }
    train_rows.sort_unstable();

    let chosen: HashSet<usize> = train_rows.iter().copied().collect();
    let test_rows: Vec<usize> = (0..ids.len())
        .filter(|i| {
            if reserved.is_empty() {
                !chosen.contains(i)
            } else {
                reserved.contains(&ids[*i])
            }
        })
        .collect();
    Ok(FewShotSplit {
        seen,
        unseen,
        train: train_rows.iter().map(|&i| ids[i]).collect(),
        test: test_rows.iter().map(|&i| ids[i]).collect(),
        train_rows,
        test_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::{Archive, Record};
    use crate::dataset::DatasetMeta;
    use cpl_core::prompt::PromptRecord;

    fn data(per_class: usize, classes: u32) -> Dataset {
        let mut records = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                records.push(Record {
                    id: records.len() as u64,
                    label: c,
                    feature: vec![1.0, k as f32],
                });
            }
        }
        let prompts = (0..classes)
            .map(|c| PromptRecord { id: c as u64, class_id: c, text: format!("c{c}"), question_type: None })
            .collect();
        Dataset::from_parts(Archive::new(2, records).unwrap(), prompts, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn shots_per_seen_class() {
        let d = data(20, 16);
        let s = make_split(&d, Selection::Shots(16), 0.5, 3).unwrap();
        assert_eq!(s.seen.len(), 8);
        assert_eq!(s.train.len(), 128);
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        assert_eq!(s.train.len() + s.test.len(), d.features.len());
        assert_eq!(s, make_split(&d, Selection::Shots(16), 0.5, 3).unwrap());
    }

    #[test]
    fn insufficient_names_class() {
        let d = data(3, 4);
        let err = make_split(&d, Selection::Shots(4), 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn subset_fraction() {
        let d = data(10, 2);
        let s = make_split(&d, Selection::Subset(0.3), 1.0, 0).unwrap();
        assert_eq!(s.train.len(), 6);
        assert!(s.unseen.is_empty());
    }
}
