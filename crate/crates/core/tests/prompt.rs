mod common;

use common::{small_config, Toy, D_E, D_V, NAMES};
use cpl_core::autodiff::gradcheck::check;
use cpl_core::autodiff::{Tape, Tensor};
use cpl_core::encoder::{Vocabulary, BOT, EOT};
use cpl_core::objective::{init_params, steps_per_epoch, train_step, Sgd, TrainConfig};
use cpl_core::prompt::{
    assemble, build_task_prompts, encode_pairs, encode_prompt, ContextPrompt, MetaNet,
    PromptParams, PromptSpec, QuestionType,
};
use cpl_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_meta(seed: u64) -> MetaNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MetaNet::init(D_V, D_E, &mut rng);
    m.w2.value = Tensor::randn(&[1, D_E], 0.1, &mut rng);
    // positive first layer keeps the single relu unit active for positive inputs
    m.w1.value = Tensor::full(&[D_V, 1], 0.1);
    m.b1.value = Tensor::full(&[1], 0.2);
    m
}

#[test]
fn context_shape_and_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = ContextPrompt::<f32>::init(4, 64, 0.02, &mut rng).unwrap();
    assert_eq!(p.rows.value.shape(), &[4, 64]);
    assert!(!p.rows.frozen);

    let big = ContextPrompt::<f64>::init(160, 64, 0.02, &mut rng).unwrap();
    let x = big.rows.value.data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.018..=0.022).contains(&sd), "sample std {sd}");

    let a = ContextPrompt::<f32>::init(4, 8, 0.02, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = ContextPrompt::<f32>::init(4, 8, 0.02, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(ContextPrompt::<f32>::init(0, 8, 0.02, &mut rng).is_err());
}

#[test]
fn task_prompt_texts() {
    let vocab = Vocabulary::build(&["barn", "a dog on grass", "the plate is empty"]).unwrap();
    let specs = vec![
        (0, PromptSpec::ClassName("barn".into())),
        (1, PromptSpec::Caption("a dog on grass".into())),
        (
            2,
            PromptSpec::Vqa {
                question_type: QuestionType::YesNo,
                declarative: "the plate is empty".into(),
                answer: String::new(),
            },
        ),
    ];
    let built = build_task_prompts(&specs, &vocab, 32).unwrap();
    assert_eq!(built[0].text, "barn");
    assert_eq!(built[1].text, "a dog on grass");
    assert_eq!(
        built[2].text,
        "The question is asking about yes or no the plate is empty"
    );
    assert!("colour".parse::<QuestionType>().is_err());
    let slot = PromptSpec::Vqa {
        question_type: QuestionType::Number,
        declarative: "there are [answer] cats".into(),
        answer: " ".into(),
    };
    assert!(matches!(slot.text(), Err(Error::Input(_))));
}

#[test]
fn assembly_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Tensor::<f64>::randn(&[4, 6], 0.02, &mut rng);
    let h = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
    let a = assemble(&p, None, &h, 2, 32).unwrap();
    assert_eq!(a.rows.shape(), &[7, 6]);
    assert_eq!(a.eot_index, 6);
    assert_eq!(&a.rows.data()[..24], p.data());
    assert_eq!(&a.rows.data()[24..], h.data());

    let zero = Tensor::<f64>::zeros(&[6]);
    let z = assemble(&p, Some(&zero), &h, 2, 32).unwrap();
    assert_eq!(z, a);
    let shift = Tensor::<f64>::full(&[6], 0.5);
    let s = assemble(&p, Some(&shift), &h, 2, 32).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            assert_eq!(s.rows.at(i, j), p.at(i, j) + 0.5);
        }
    }
    assert!(matches!(assemble(&p, None, &h, 2, 6), Err(Error::Length(_))));
}

#[test]
fn too_long_prompt_is_named() {
    let toy = Toy::<f32>::new(0, 2, 0.1, small_config(0));
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = PromptParams {
        context: ContextPrompt::init(10, D_E, 0.02, &mut rng).unwrap(),
        meta: None,
    };
    let bound = params.bind(&tape);
    let feats = tape.constant(toy.features.gather(&[0]));
    match encode_pairs(&toy.encoder, &toy.bank, &bound, feats, &[(0, 0)]) {
        Err(Error::Length(msg)) => assert!(NAMES.iter().any(|n| msg.contains(n)), "{msg}"),
        other => panic!("expected length error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn zero_second_layer_gives_zero_shift() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = PromptParams {
        context: ContextPrompt::init(2, D_E, 0.02, &mut rng).unwrap(),
        meta: Some(MetaNet::init(D_V, D_E, &mut rng)),
    };
    let bound = params.bind(&tape);
    let v = tape.constant(Tensor::randn(&[3, D_V], 1.0, &mut rng));
    let pi = bound.meta_shift(v).unwrap().unwrap().value();
    assert!(pi.data().iter().all(|&x| x == 0.0));
}

#[test]
fn different_features_give_different_shifts() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = PromptParams {
        context: ContextPrompt::init(2, D_E, 0.02, &mut rng).unwrap(),
        meta: Some(random_meta(3)),
    };
    let bound = params.bind(&tape);
    let mut v = Tensor::<f64>::full(&[2, D_V], 0.5);
    v.data_mut()[D_V] = 3.0;
    let pi = bound.meta_shift(tape.constant(v)).unwrap().unwrap().value();
    assert_ne!(pi.row(0), pi.row(1));
}

#[test]
fn pair_encoding_matches_single_assembly() {
    let toy = Toy::<f64>::new(4, 2, 0.1, small_config(4));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = PromptParams {
        context: ContextPrompt::init(2, D_E, 0.02, &mut rng).unwrap(),
        meta: Some(random_meta(4)),
    };
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let rows = [0usize, 5, 9];
    let feats = tape.constant(toy.features.gather(&rows));
    let pairs = [(0, 0), (0, 3), (1, 2), (2, 5), (2, 0)];
    let joint = encode_pairs(&toy.encoder, &toy.bank, &bound, feats, &pairs)
        .unwrap()
        .value();
    let shifts = bound.meta_shift(feats).unwrap().unwrap().value();
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let shift = Tensor::vector(shifts.row(i).to_vec());
        let h = toy.bank.embedded(j);
        let a = assemble(
            &params.context.rows.value,
            Some(&shift),
            &h,
            h.dims2().0 - 1,
            toy.encoder.max_seq_len(),
        )
        .unwrap();
        let t2 = Tape::new();
        let single = encode_prompt(&toy.encoder, &t2, t2.constant(a.rows), a.eot_index)
            .unwrap()
            .value();
        for (x, y) in joint.row(r).iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-10, "pair {r}: {x} vs {y}");
        }
    }
    let again = encode_pairs(&toy.encoder, &toy.bank, &bound, feats, &pairs)
        .unwrap()
        .value();
    assert_eq!(joint, again);
}

#[test]
fn context_entry_gradient_matches_finite_differences() {
    let toy = Toy::<f64>::new(5, 1, 0.1, small_config(5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let context = Tensor::<f64>::randn(&[2, D_E], 0.02, &mut rng);
    let h = toy.bank.embedded(1);
    let eot = h.dims2().0 - 1;
    let probe = Tensor::<f64>::randn(&[D_V], 1.0, &mut rng);
    let report = check(&[context], 1e-5, |tape, vars| {
        let rows = cpl_core::autodiff::Var::concat_rows(&[vars[0], tape.constant(h.clone())])?;
        let g = encode_prompt(&toy.encoder, tape, rows, 2 + eot)?;
        g.mul(&tape.constant(probe.clone()))?.sum()
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-3);
    assert!(report.analytic[0].data().iter().any(|&g| g != 0.0));
}

#[test]
fn token_sequence_contract() {
    let vocab = Vocabulary::build(&["x"]).unwrap();
    let seq = vocab.tokenize("x", 8).unwrap();
    assert_eq!(seq.ids(), &[BOT, vocab.id("x"), EOT]);
    assert_eq!(seq.eot_index(), 2);
}

#[test]
fn one_step_moves_prompt_not_encoder() {
    let cfg = TrainConfig {
        optim: cpl_core::objective::OptimConfig {
            lr: 0.05,
            ..Default::default()
        },
        ..small_config(6)
    };
    let toy = Toy::<f32>::new(6, 4, 0.1, cfg);
    let ctx = toy.ctx();
    let mut params = init_params(&toy.config, &toy.encoder).unwrap();
    let before = params.clone();
    let enc_before = toy.encoder.checksum();
    let horizon = steps_per_epoch(toy.features.len(), 8) as u64;
    let mut opt = Sgd::new(toy.config.optim.clone(), &params.params(), horizon).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch: Vec<usize> = (0..8).map(|i| i * 3).collect();
    train_step(&ctx, &mut params, &mut opt, &batch, &mut rng).unwrap();
    assert_eq!(toy.encoder.checksum(), enc_before);
    assert_ne!(params.context, before.context);
    let (m0, m1) = (before.meta.unwrap(), params.meta.unwrap());
    assert_ne!(m0.w2, m1.w2);
    assert_ne!(m0.b2, m1.b2);
}
