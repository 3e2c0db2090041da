use cpl_core::autodiff::gradcheck::check;
use cpl_core::autodiff::{Tape, Tensor};
use cpl_core::encoder::{EncoderConfig, FrozenEncoder, Vocabulary, BOT, EOT, PAD, UNK};
use cpl_core::objective::{init_params, OptimConfig, Sgd, TrainConfig};
use cpl_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_e: 16,
        d_v: 8,
        heads: 2,
        max_seq_len: 12,
        seed,
        ..EncoderConfig::default()
    }
}

#[test]
fn vocab_from_two_sentences() {
    let v = Vocabulary::build(&["a cat.", "a dog."]).unwrap();
    assert_eq!(v.len(), 8);
    for tok in ["a", "cat", "dog", "."] {
        assert!(v.id(tok) >= 4, "{tok} missing");
    }
    // frequency first: "a" and "." appear twice
    assert_eq!(v.token(4), Some("."));
    assert_eq!(v.token(5), Some("a"));
    let again = Vocabulary::build(&["a cat.", "a dog."]).unwrap();
    assert_eq!(v.to_file_string(), again.to_file_string());
    assert!(v.to_file_string().starts_with("<pad>\n<bot>\n<eot>\n<unk>\n"));
}

#[test]
fn vocab_file_roundtrip() {
    let v = Vocabulary::build(&["red cat", "blue dog", "red bird"]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.write(&path).unwrap();
    let back = Vocabulary::read(&path).unwrap();
    assert_eq!(back.to_file_string(), v.to_file_string());
    assert!(matches!(Vocabulary::build::<&str>(&[]), Err(Error::Input(_))));
}

#[test]
fn tokenize_sentence() {
    let v = Vocabulary::build(&["a photo of a cat"]).unwrap();
    let seq = v.tokenize("a photo of a cat", 32).unwrap();
    let expect = [BOT, v.id("a"), v.id("photo"), v.id("of"), v.id("a"), v.id("cat"), EOT];
    assert_eq!(seq.ids(), &expect);
    assert_eq!(v.tokenize("A Photo", 32).unwrap(), v.tokenize("a photo", 32).unwrap());
    assert_eq!(v.tokenize("a zebra", 32).unwrap().ids()[2], UNK);
}

#[test]
fn tokenize_truncates_keeping_eot() {
    let v = Vocabulary::build(&["one two three four five six"]).unwrap();
    let seq = v.tokenize("one two three four five six", 5).unwrap();
    assert_eq!(seq.len(), 5);
    assert_eq!(*seq.ids().last().unwrap(), EOT);
    assert!(matches!(v.tokenize("  ", 5), Err(Error::Input(_))));
}

#[test]
fn weights_follow_seed() {
    let a = FrozenEncoder::<f32>::init(&small(7), 10).unwrap();
    let b = FrozenEncoder::<f32>::init(&small(7), 10).unwrap();
    let c = FrozenEncoder::<f32>::init(&small(8), 10).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    assert!(EncoderConfig { heads: 3, ..small(0) }.validate().is_err());
}

#[test]
fn pooled_ignores_rows_after_eot() {
    let enc = FrozenEncoder::<f64>::init(&small(3), 10).unwrap();
    let ids = [BOT, 5, 6, EOT, PAD, PAD, 7];
    let base = enc.embed_tokens(&ids).unwrap();
    let mut perturbed = base.clone();
    let d = enc.d_e();
    // swap the last two padding rows and scramble one of them
    let (r4, r6) = (base.row(4).to_vec(), base.row(6).to_vec());
    perturbed.data_mut()[4 * d..5 * d].copy_from_slice(&r6);
    perturbed.data_mut()[6 * d..7 * d].copy_from_slice(&r4);
    perturbed.data_mut()[5 * d] += 3.0;
    let run = |rows: Tensor<f64>| {
        let tape = Tape::new();
        let r = tape.constant(rows);
        (*enc.encode_rows(&tape, r, 3).unwrap().pooled.value()).clone()
    };
    assert_eq!(run(base.clone()), run(perturbed));
    assert_eq!(run(base.clone()), run(base));
}

#[test]
fn injected_row_gradient_matches_finite_differences() {
    let enc = FrozenEncoder::<f64>::init(&small(11), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let text = enc.embed_tokens(&[BOT, 4, 5, EOT]).unwrap();
    let injected = Tensor::<f64>::randn(&[2, 16], 0.5, &mut rng);
    let probe = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
    let report = check(&[injected], 1e-5, |tape, vars| {
        let rows = cpl_core::autodiff::Var::concat_rows(&[vars[0], tape.constant(text.clone())])?;
        let pooled = enc.encode_rows(tape, rows, 5)?.pooled.reshape(&[1, 8])?;
        pooled.mul(&tape.constant(probe.clone()))?.sum()
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-3, "{:?}", report.relative_errors);
    assert!(report.analytic[0].l2_norm() > 0.0);
}

#[test]
fn eot_out_of_range_is_contract_error() {
    let enc = FrozenEncoder::<f32>::init(&small(0), 10).unwrap();
    let tape = Tape::new();
    let rows = tape.constant(enc.embed_tokens(&[BOT, 4, EOT]).unwrap());
    assert!(matches!(enc.encode_rows(&tape, rows, 3), Err(Error::Contract(_))));
    assert!(enc.embed_tokens(&[BOT, 10, EOT]).is_err());
}

#[test]
fn pad_lookup_is_position_shifted_row() {
    let enc = FrozenEncoder::<f64>::init(&small(2), 10).unwrap();
    let a = enc.embed_tokens(&[PAD, PAD]).unwrap();
    assert_eq!(a, enc.embed_tokens(&[PAD, PAD]).unwrap());
    // same token at different positions differs only by the position table
    assert_ne!(a.row(0), a.row(1));
}

#[test]
fn optimizer_never_sees_encoder_weights() {
    let enc = FrozenEncoder::<f32>::init(&small(5), 10).unwrap();
    let cfg = TrainConfig {
        context_len: 2,
        ..TrainConfig::default()
    };
    let params = init_params(&cfg, &enc).unwrap();
    let opt = Sgd::new(OptimConfig::default(), &params.params(), 10).unwrap();
    let names: Vec<String> = enc.weights().into_iter().map(|(n, _)| n).collect();
    assert!(!names.is_empty());
    for (name, _) in &opt.velocity {
        assert!(!names.contains(name), "{name} is an encoder weight");
    }

    // gradient may flow into the table, the table itself never moves
    let before = enc.checksum();
    let tape = Tape::new();
    let rows = enc.embed_tokens_var(&tape, &[BOT, 4, EOT], true).unwrap();
    let out = enc.encode_rows(&tape, rows, 2).unwrap().pooled.sum().unwrap();
    tape.backward(out).unwrap();
    assert_eq!(enc.checksum(), before);
}
