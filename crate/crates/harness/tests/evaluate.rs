mod common;

use common::archive_config;
use cpl_core::autodiff::{Tape, Tensor};
use cpl_core::prompt::encode_pairs;
use cpl_harness::dataset::DatasetMeta;
use cpl_harness::experiment::{prepare, EvalSplit};
use cpl_harness::metrics::metrics_from_rows;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noise_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::<f32>::randn(&[d], 1.0, &mut rng).into_data()).collect()
}

#[test]
fn untrained_prompts_on_unrelated_features_score_chance() {
    let classes = 4;
    let (mut correct, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let mut config = archive_config(dir.path(), classes, &noise_rows(160, 16, 100 + seed), DatasetMeta::default());
        config.shots = 2;
        config.seed = seed;
        let prep = prepare(&config).unwrap();
        let (params, _, _) = prep.fresh_state().unwrap();
        let rows = prep.evaluate(&params, EvalSplit::Seen).unwrap();
        assert_eq!(rows.len(), 160 - classes * 2);
        correct += rows.iter().filter(|r| r.predicted == r.target).count();
        total += rows.len();
    }
    let p = 1.0 / classes as f64;
    let acc = correct as f64 / total as f64;
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}, chance {p} +- {:.4}", 3.0 * sigma);
}

#[test]
fn features_along_prompt_embeddings_are_classified_perfectly() {
    let classes = 5;
    let dir = tempfile::tempdir().unwrap();
    let mut config = archive_config(dir.path(), classes, &noise_rows(40, 16, 7), DatasetMeta::default());
    config.use_meta_net = false;
    config.shots = 1;
    let prep = prepare(&config).unwrap();
    let (params, _, _) = prep.fresh_state().unwrap();
    let emb = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let dummy = tape.constant(Tensor::ones(&[1, 16]));
        let pairs: Vec<(usize, usize)> = (0..classes as u32).map(|c| (0, prep.prompt_index[&c])).collect();
        encode_pairs(&prep.encoder, &prep.bank, &bound, dummy, &pairs).unwrap().value()
    };
    let rows: Vec<Vec<f32>> = (0..40).map(|i| emb.row(i % classes).iter().map(|x| x * 3.0).collect()).collect();

    let dir = tempfile::tempdir().unwrap();
    let config = archive_config(dir.path(), classes, &rows, DatasetMeta::default());
    let config = cpl_harness::config::RunConfig {
        use_meta_net: false,
        shots: 1,
        ..config
    };
    let prep = prepare(&config).unwrap();
    let (params, _, _) = prep.fresh_state().unwrap();
    let preds = prep.evaluate(&params, EvalSplit::Seen).unwrap();
    let m = &metrics_from_rows(&preds)[0];
    assert_eq!(m.count, 40 - classes);
    assert_eq!(m.accuracy, 1.0);
    assert!(m.per_class.values().all(|c| c.accuracy == 1.0));
}

#[test]
fn single_candidate_gives_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    let meta = DatasetMeta {
        seen_classes: Some(vec![0, 1]),
        ..DatasetMeta::default()
    };
    let mut config = archive_config(dir.path(), 3, &noise_rows(30, 16, 3), meta);
    config.shots = 2;
    let prep = prepare(&config).unwrap();
    assert_eq!(prep.split.unseen, vec![2]);
    let (params, _, _) = prep.fresh_state().unwrap();
    let rows = prep.evaluate(&params, EvalSplit::Unseen).unwrap();
    assert_eq!(rows.len(), 10);
    let m = &metrics_from_rows(&rows)[0];
    assert_eq!(m.recall_at_1, 1.0);
    assert_eq!(m.accuracy, 1.0);
}

#[test]
fn all_split_ranks_every_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = archive_config(dir.path(), 3, &noise_rows(30, 16, 4), DatasetMeta::default());
    config.shots = 2;
    let prep = prepare(&config).unwrap();
    let (params, _, _) = prep.fresh_state().unwrap();
    let rows = prep.evaluate(&params, EvalSplit::All).unwrap();
    assert_eq!(rows.len(), prep.split.test.len());
    assert!(rows.iter().all(|r| r.predicted < 3 && r.score.abs() <= 1.0 + 1e-6));
}
