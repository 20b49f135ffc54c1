use natr_core::autograd::{AdamConfig, AdamState, Tape};
use natr_core::data::{pad, MASK, PAD};
use natr_core::losses::{ce_loss_vanilla, pretrain_rephraser_loss};
use natr_core::model::{uniform_copy_indices, DecoderInput};
use natr_core::{ModelConfig, ModelKind, NatModel, RephraserVariant};

const V: usize = 21;

fn config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        vocab_size: V,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        rephraser_layers: 2,
        model_kind: kind,
        max_len: 40,
        ..ModelConfig::default()
    }
}

fn model(kind: ModelKind) -> NatModel<f64> {
    NatModel::new(config(kind), 4).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn uniform_copy_examples() {
    assert_eq!(uniform_copy_indices(4, 2), [0, 2]);
    assert_eq!(uniform_copy_indices(2, 4), [0, 0, 1, 1]);
    assert_eq!(uniform_copy_indices(3, 3), [0, 1, 2]);
}

#[test]
fn output_shapes() {
    let m = model(ModelKind::Vanilla);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &[5, 6, 7, 8, 9], &[5]).unwrap();
    assert_eq!(tape.shape(enc.states), [1, 5, 16]);
    let dec = m
        .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[6] })
        .unwrap();
    assert_eq!(tape.shape(dec.logits), [1, 6, V]);
    let reph = m.rephrase(&mut tape, &[5, 6, 7, 8, 9, 10], &[6], &dec, &[0; 6]).unwrap();
    assert_eq!(tape.shape(reph), [1, 6, V]);

    let ctc = model(ModelKind::Ctc);
    assert_eq!(ctc.decoder_length(5, 0), 15);
    let mut tape = Tape::new();
    let enc = ctc.encode(&mut tape, &[5, 6, 7, 8, 9], &[5]).unwrap();
    let dec = ctc
        .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[15] })
        .unwrap();
    assert_eq!(tape.shape(dec.logits), [1, 15, V]);
    let argmax = tape.value(dec.logits).argmax_rows();
    let reph = ctc.rephrase_ctc(&mut tape, &argmax, &[15], &[5, 6, 7], &[3]).unwrap();
    assert_eq!(tape.shape(reph), [1, 15, V]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model(ModelKind::Vanilla);
    let mut tape = Tape::new();
    assert!(m.encode(&mut tape, &[PAD, PAD], &[0]).is_err());
    let enc = m.encode(&mut tape, &[5, 6], &[2]).unwrap();
    assert!(m
        .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[41] })
        .is_err());
    let dec = m
        .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[3] })
        .unwrap();
    assert!(m.rephrase(&mut tape, &[5, 6, 7, 8], &[4], &dec, &[0; 4]).is_err());
    let mut bad = config(ModelKind::Vanilla);
    bad.d_model = 15;
    assert!(NatModel::<f64>::new(bad, 0).is_err());
    let mut bad = config(ModelKind::Ctc);
    bad.ctc_upsample = 1;
    assert!(NatModel::<f64>::new(bad, 0).is_err());
}

#[test]
fn identical_sentences_get_identical_states() {
    let m = model(ModelKind::Vanilla);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &[5, 9, 7, 5, 9, 7], &[3, 3]).unwrap();
    let s = &tape.value(enc.states).data;
    assert_eq!(s[..48], s[48..]);
}

#[test]
fn pad_contents_do_not_leak_into_real_positions() {
    let m = model(ModelKind::Vanilla);
    let run = |tail: [usize; 2]| {
        let mut tape = Tape::new();
        let src = [5, 9, 7, tail[0], tail[1]];
        let enc = m.encode(&mut tape, &src, &[3]).unwrap();
        let dec = m
            .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[4] })
            .unwrap();
        let states = tape.value(enc.states).data[..3 * 16].to_vec();
        (states, tape.value(dec.logits).data.clone())
    };
    let (s1, l1) = run([PAD, PAD]);
    let (s2, l2) = run([11, 12]);
    assert!(close(&s1, &s2, 1e-6));
    assert!(close(&l1, &l2, 1e-6));

    // The same sentence alone and next to a longer one.
    let mut tape = Tape::new();
    let alone = m.encode(&mut tape, &[5, 9, 7], &[3]).unwrap();
    let alone = tape.value(alone.states).data.clone();
    let (flat, lens, _) = pad(&[&[5, 9, 7], &[6, 6, 6, 6, 6, 6]]);
    let both = m.encode(&mut tape, &flat, &lens).unwrap();
    assert!(close(&alone, &tape.value(both.states).data[..3 * 16], 1e-6));
}

#[test]
fn length_head_is_a_distribution_with_distinct_candidates() {
    let m = model(ModelKind::Cmlm);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &[5, 6, 7, 8], &[4]).unwrap();
    let logits = m.length_logits(&mut tape, &enc).unwrap();
    assert_eq!(tape.shape(logits), [1, 1, 41]);
    let sm = tape.softmax(logits);
    let total: f64 = tape.value(sm).data.iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    let row = tape.value(logits).data.clone();
    let c = m.length_candidates(&row, 4, 5);
    assert_eq!(c.len(), 5);
    let mut d = c.clone();
    d.sort();
    d.dedup();
    assert_eq!(d.len(), 5);
    assert!(c.iter().all(|&l| l >= 1));
    // Targets outside the offset range train the nearest class.
    assert_eq!(m.length_class(4, 30), 40);
    assert_eq!(m.length_class(30, 1), 0);
    assert_eq!(m.length_from_class(2, 0), 1);
}

#[test]
fn base_and_swap_rephrasers_differ() {
    let mut c = config(ModelKind::Vanilla);
    let base = NatModel::<f64>::new(c.clone(), 4).unwrap();
    c.rephraser_variant = RephraserVariant::Swap;
    let swap = NatModel::<f64>::new(c, 4).unwrap();
    let run = |m: &NatModel<f64>| {
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &[5, 6, 7], &[3]).unwrap();
        let dec = m
            .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[3] })
            .unwrap();
        let r = m.rephrase(&mut tape, &[8, 9, 10], &[3], &dec, &[5, 6, 7]).unwrap();
        tape.value(r).data.clone()
    };
    assert_ne!(run(&base), run(&swap));
}

/// CMLM decoder logits for the given decoder input tokens.
fn cmlm_logits(m: &NatModel<f64>, tokens: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &[5, 6, 7], &[3]).unwrap();
    let dec = m
        .decode_nat(
            &mut tape,
            &enc,
            DecoderInput::Tokens {
                tokens,
                lens: &[tokens.len()],
            },
        )
        .unwrap();
    tape.value(dec.logits).data.clone()
}

#[test]
fn decoder_is_permutation_equivariant_only_without_positions() {
    let input = [8, MASK, 10, 11];
    let perm = [2, 0, 3, 1];
    let permuted: Vec<usize> = perm.iter().map(|&i| input[i]).collect();
    for positions in [false, true] {
        let mut c = config(ModelKind::Cmlm);
        c.position_embeddings = positions;
        let m = NatModel::<f64>::new(c, 4).unwrap();
        let a = cmlm_logits(&m, &input);
        let b = cmlm_logits(&m, &permuted);
        let a_perm: Vec<f64> = perm.iter().flat_map(|&i| a[i * V..(i + 1) * V].to_vec()).collect();
        assert_eq!(close(&a_perm, &b, 1e-9), !positions, "positions = {positions}");
    }
}

#[test]
fn parameters_are_registered_once_and_split_cleanly() {
    let m = model(ModelKind::Vanilla);
    let p = m.params();
    let mut names: Vec<&str> = p.iter().map(|(id, _)| p.name(id)).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    let mut all: Vec<_> = m.nat_params().iter().chain(m.rephraser_params()).copied().collect();
    all.sort_by_key(|id| id.index());
    assert_eq!(all, p.ids().collect::<Vec<_>>());
    assert!(!m.rephraser_params().is_empty());
}

/// One Adam step on a fresh optimiser driven by the given loss choice.
fn step_with(rephraser_only: bool) -> (NatModel<f64>, NatModel<f64>) {
    let before = model(ModelKind::Vanilla);
    let mut m = before.clone();
    let mut tape = Tape::new();
    let (src, tgt) = ([5, 6, 7, 8], [8, 7, 6, 5]);
    let enc = m.encode(&mut tape, &src, &[4]).unwrap();
    let dec = m
        .decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &[4] })
        .unwrap();
    let argmax = tape.value(dec.logits).argmax_rows();
    let loss = if rephraser_only {
        let r = m.rephrase(&mut tape, &tgt, &[4], &dec, &argmax).unwrap();
        pretrain_rephraser_loss(&mut tape, r, &tgt, &argmax, &[true; 4]).unwrap()
    } else {
        ce_loss_vanilla(&mut tape, dec.logits, &tgt, &[true; 4]).unwrap()
    };
    tape.backward(loss.loss.unwrap()).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), m.params());
    let p = m.params_mut();
    p.accumulate(&tape);
    p.fill_missing_grads();
    adam.step(p).unwrap();
    (before, m)
}

#[test]
fn rephraser_losses_leave_nat_weights_alone() {
    let (before, after) = step_with(true);
    let nat = before.nat_params();
    let reph = before.rephraser_params();
    assert_eq!(before.params().checksum(nat), after.params().checksum(nat));
    assert_ne!(before.params().checksum(reph), after.params().checksum(reph));
}

#[test]
fn nat_losses_leave_rephraser_weights_alone() {
    let (before, after) = step_with(false);
    let nat = before.nat_params();
    let reph = before.rephraser_params();
    assert_ne!(before.params().checksum(nat), after.params().checksum(nat));
    assert_eq!(before.params().checksum(reph), after.params().checksum(reph));
}

#[test]
fn same_seed_same_weights() {
    let a = model(ModelKind::Ctc);
    let b = model(ModelKind::Ctc);
    let ids: Vec<_> = a.params().ids().collect();
    assert_eq!(a.params().checksum(&ids), b.params().checksum(&ids));
    let c = NatModel::<f64>::new(config(ModelKind::Ctc), 5).unwrap();
    assert_ne!(a.params().checksum(&ids), c.params().checksum(&ids));
}
