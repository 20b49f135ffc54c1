use natr_core::autograd::Tape;
use natr_core::data::{pad, BLANK, MASK, PAD};
use natr_core::decode::{
    decode_batch, decode_ctc, decode_vanilla, least_confident, mask_predict, merge_repeats,
    predict_lengths, remask_count,
};
use natr_core::losses::collapse;
use natr_core::metrics::{corpus_bleu, entropy, entropy_metric, repetition_rate};
use natr_core::model::{DecoderInput, ModelConfig, ModelKind, NatModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn corpus_bleu_identity_is_100() {
    let hyps = vec![words("a b c d e"), words("f g h i")];
    let refs = vec![vec![words("a b c d e")], vec![words("x y"), words("f g h i")]];
    assert!((corpus_bleu(&hyps, &refs).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn corpus_bleu_two_sentence_hand_case() {
    // Sentence 1 matches fully: 4/4, 3/3, 2/2, 1/1.
    // Sentence 2 ("a b c x" vs "a b c d"): 3/4, 2/3, 1/2, 0/1.
    let hyps = vec![words("a b c d"), words("a b c x")];
    let refs = vec![vec![words("a b c d")], vec![words("a b c d")]];
    let expect = 100.0 * f64::powf(7.0 / 8.0 * 5.0 / 6.0 * 3.0 / 4.0 * 1.0 / 2.0, 0.25);
    let got = corpus_bleu(&hyps, &refs).unwrap();
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn corpus_bleu_brevity_penalty_uses_closest_reference() {
    // Precisions are all 1; hypothesis length 7 against reference length 8.
    let hyps = vec![words("a b c d"), words("a b c")];
    let refs = vec![vec![words("a b c d")], vec![words("a b c d")]];
    let expect = 100.0 * (1.0 - 8.0f64 / 7.0).exp();
    assert!((corpus_bleu(&hyps, &refs).unwrap() - expect).abs() < 1e-9);

    // Equidistant references (3 and 5 around 4): the shorter one sets the
    // penalty, so there is none; the longer would give exp(1 - 5/4).
    let hyps = vec![words("a b c d")];
    let refs = vec![vec![words("a b c"), words("a b c d e")]];
    let b = corpus_bleu(&hyps, &refs).unwrap();
    assert!((b - 100.0).abs() < 1e-9, "{b}");
}

#[test]
fn corpus_bleu_rejects_bad_input() {
    let empty: Vec<Vec<usize>> = vec![];
    assert!(corpus_bleu(&empty, &[]).is_err());
    assert!(corpus_bleu(&[vec![1]], &[]).is_err());
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.0f64; 4]) - 4f64.ln()).abs() < 1e-12);
    assert!(entropy(&[0.0f64, -1e4, -1e4]) < 1e-12);
    let p = [0.7f64, 0.2, 0.1];
    let logits: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let expect: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
    assert!((entropy(&logits) - expect).abs() < 1e-12);
    assert_eq!(entropy_metric([&[1.0, 2.0][..], &[3.0][..]]), 2.0);
}

#[test]
fn repetition_examples() {
    assert!((repetition_rate(&[words("a a b")]) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(repetition_rate(&[words("a b a")]), 0.0);
    assert_eq!(repetition_rate::<usize>(&[vec![], vec![]]), 0.0);
    assert!((repetition_rate(&[words("a a"), words("b c")]) - 0.25).abs() < 1e-15);
}

proptest! {
    #[test]
    fn entropy_ignores_relabelling_and_shift(
        logits in prop::collection::vec(-5.0f64..5.0, 2..8),
        shift in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut perm = logits.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let h = entropy(&logits);
        prop_assert!((h - entropy(&perm)).abs() < 1e-10);
        prop_assert!((h - entropy(&shifted)).abs() < 1e-10);
        prop_assert!(h >= -1e-12 && h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn decoded_ctc_paths_never_repeat(path in prop::collection::vec(3usize..7, 0..30)) {
        // Symbol 4 is the blank; 3, 5 and 6 are tokens.
        let out = merge_repeats(collapse(&path, BLANK));
        prop_assert!(!out.contains(&BLANK));
        prop_assert!(out.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(repetition_rate(&[out]), 0.0);
    }
}

#[test]
fn remask_schedule_and_ties() {
    assert_eq!(remask_count(10, 2, 4), 8);
    assert_eq!(remask_count(10, 4, 4), 3);
    assert_eq!(remask_count(7, 2, 2), 4);
    assert_eq!(least_confident(&[0.4, 0.1, 0.1, 0.05], 3), [3, 1, 2]);
}

fn config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        model_kind: kind,
        max_len: 40,
        ..ModelConfig::default()
    }
}

fn random_sources(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=8);
            (0..len).map(|_| rng.gen_range(BLANK + 1..24)).collect()
        })
        .collect()
}

#[test]
fn ctc_decoding_emits_no_repetitions() {
    let mut hyps = vec![];
    for seed in 0..4 {
        let m = NatModel::<f32>::new(config(ModelKind::Ctc), seed).unwrap();
        let srcs = random_sources(50, seed);
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let (flat, lens, _) = pad(&refs);
        for r in decode_ctc(&m, &flat, &lens).unwrap() {
            assert_eq!(r.probs.len(), r.entropies.len());
            assert!(!r.tokens.contains(&BLANK));
            hyps.push(r.tokens);
        }
    }
    assert_eq!(repetition_rate(&hyps), 0.0);
}

#[test]
fn vanilla_decoding_honours_gold_lengths() {
    let m = NatModel::<f32>::new(config(ModelKind::Vanilla), 1).unwrap();
    let (flat, lens, _) = pad(&[&[5, 6, 7][..], &[8, 9][..]]);
    let out = decode_vanilla(&m, &flat, &lens, Some(&[6, 1])).unwrap();
    assert_eq!(out[0].tokens.len(), 6);
    assert_eq!(out[1].tokens.len(), 1);
    let predicted = predict_lengths(&m, &flat, &lens).unwrap();
    let out = decode_vanilla(&m, &flat, &lens, None).unwrap();
    for (r, l) in out.iter().zip(predicted) {
        assert_eq!(r.tokens.len(), l);
        assert!(r.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert!(decode_ctc(&m, &flat, &lens).is_err());
    assert!(mask_predict(&m, &flat, &lens, 1, 1).is_err());
}

#[test]
fn one_iteration_mask_predict_is_the_single_pass() {
    let m = NatModel::<f32>::new(config(ModelKind::Cmlm), 3).unwrap();
    let srcs = random_sources(16, 9);
    let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
    let (flat, lens, _) = pad(&refs);
    let tgt_lens = predict_lengths(&m, &flat, &lens).unwrap();
    let max = *tgt_lens.iter().max().unwrap();
    let mut tokens = vec![PAD; lens.len() * max];
    for (b, &l) in tgt_lens.iter().enumerate() {
        tokens[b * max..b * max + l].fill(MASK);
    }
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &flat, &lens).unwrap();
    let dec = m
        .decode_nat(&mut tape, &enc, DecoderInput::Tokens { tokens: &tokens, lens: &tgt_lens })
        .unwrap();
    let argmax = tape.value(dec.logits).argmax_rows();

    let out = mask_predict(&m, &flat, &lens, 1, 1).unwrap();
    for (b, r) in out.iter().enumerate() {
        assert_eq!(r.tokens, argmax[b * max..b * max + tgt_lens[b]]);
        assert_eq!(r.iterations, 1);
    }
    assert_eq!(decode_batch(&m, &flat, &lens, 1, 1).unwrap(), out);
    assert!(mask_predict(&m, &flat, &lens, 0, 1).is_err());
}

#[test]
fn mask_predict_keeps_lengths_and_is_deterministic() {
    let m = NatModel::<f32>::new(config(ModelKind::Cmlm), 4).unwrap();
    let srcs = random_sources(8, 2);
    let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
    let (flat, lens, _) = pad(&refs);
    let lengths = predict_lengths(&m, &flat, &lens).unwrap();
    for i in [1, 2, 4, 8] {
        let a = mask_predict(&m, &flat, &lens, i, 1).unwrap();
        assert_eq!(a, mask_predict(&m, &flat, &lens, i, 1).unwrap());
        for (r, &l) in a.iter().zip(&lengths) {
            assert_eq!(r.tokens.len(), l);
        }
    }
}
