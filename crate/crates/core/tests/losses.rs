use natr_core::autograd::{Tape, Tensor};
use natr_core::losses::{
    ce_loss_cmlm, ce_loss_on_rephrased, ce_loss_vanilla, collapse, ctc_loss,
    pretrain_rephraser_loss,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BLANK: usize = 0;

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Loss value for `[T, V]` logits and a plain CE.
fn ce(logits: &[f64], v: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[targets.len(), v], logits), true);
    ce_loss_vanilla(&mut tape, x, targets, mask).unwrap().value
}

fn oracle_ce(logits: &[f64], v: usize, targets: &[usize], mask: &[bool]) -> f64 {
    logits
        .chunks(v)
        .zip(targets)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((row, &t), _)| -log_softmax(row)[t])
        .sum()
}

#[test]
fn uniform_logits_cost_log_v_per_position() {
    let l = ce(&[0.0; 8], 4, &[1, 3], &[true, true]);
    assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12, "{l}");
}

#[test]
fn peaked_logits_cost_almost_nothing() {
    let mut logits = vec![0.0; 10];
    logits[2] = 60.0;
    logits[5 + 4] = 60.0;
    assert!(ce(&logits, 5, &[2, 4], &[true, true]) < 1e-20);
}

#[test]
fn ce_matches_direct_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random_logits(&mut rng, 15);
    let (targets, mask) = ([4, 0, 2], [true; 3]);
    let got = ce(&logits, 5, &targets, &mask);
    assert!((got - oracle_ce(&logits, 5, &targets, &mask)).abs() < 1e-12);
}

#[test]
fn cmlm_loss_covers_masked_positions_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_logits(&mut rng, 6 * 4);
    let targets = [1, 3, 0, 2, 2, 1];
    let valid = [true; 6];
    let run = |masked: &[bool]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[6, 4], &logits), true);
        ce_loss_cmlm(&mut tape, x, &targets, &valid, masked).map(|r| r.value)
    };
    let all = run(&[true; 6]).unwrap();
    assert_eq!(all, ce(&logits, 4, &targets, &valid));
    assert!(run(&[false; 6]).is_err());

    let half = [true, false, false, true, true, false];
    let sub_logits: Vec<f64> = logits
        .chunks(4)
        .zip(half)
        .filter(|(_, m)| *m)
        .flat_map(|(r, _)| r.to_vec())
        .collect();
    let sub_targets: Vec<usize> = targets.iter().zip(half).filter(|(_, m)| *m).map(|(t, _)| *t).collect();
    let expect = oracle_ce(&sub_logits, 4, &sub_targets, &[true; 3]);
    assert!((run(&half).unwrap() - expect).abs() < 1e-12);
}

fn ctc_value(log_probs: &[f64], classes: usize, target: &[usize]) -> Option<f64> {
    let frames = log_probs.len() / classes;
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[frames, classes], log_probs), true);
    let r = ctc_loss(&mut tape, x, &[frames], &[target], BLANK).unwrap();
    r.loss.map(|_| r.value)
}

/// Every path over `classes^frames`, in lexicographic order.
fn all_paths(frames: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..frames {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..classes).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

fn merge_then_drop_blanks(path: &[usize]) -> Vec<usize> {
    let mut merged: Vec<usize> = Vec::new();
    for &s in path {
        if merged.last() != Some(&s) {
            merged.push(s);
        }
    }
    merged.retain(|&s| s != BLANK);
    merged
}

fn path_logprob(lp: &[f64], classes: usize, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &c)| lp[t * classes + c]).sum()
}

#[test]
fn two_frames_two_labels_have_one_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (1, 2);
    let logits = random_logits(&mut rng, 6);
    let lp: Vec<f64> = logits.chunks(3).flat_map(log_softmax).collect();
    let got = ctc_value(&logits, 3, &[a, b]).unwrap();
    assert!((got + lp[a] + lp[3 + b]).abs() < 1e-12);
}

#[test]
fn two_frames_one_label_sum_three_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = 1;
    let logits = random_logits(&mut rng, 6);
    let p: Vec<f64> = logits
        .chunks(3)
        .flat_map(log_softmax)
        .map(f64::exp)
        .collect();
    let expect = -(p[a] * p[3 + BLANK] + p[BLANK] * p[3 + a] + p[a] * p[3 + a]).ln();
    assert!((ctc_value(&logits, 3, &[a]).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn repeated_label_needs_a_separating_blank() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = 2;
    let logits = random_logits(&mut rng, 9);
    let lp: Vec<f64> = logits.chunks(3).flat_map(log_softmax).collect();
    let expect = -(lp[a] + lp[3 + BLANK] + lp[6 + a]);
    assert!((ctc_value(&logits, 3, &[a, a]).unwrap() - expect).abs() < 1e-12);
    assert!(ctc_value(&logits[..6], 3, &[a, a]).is_none());
}

#[test]
fn ctc_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 200 {
        let frames = rng.gen_range(1..=6);
        let labels = rng.gen_range(1..=3);
        let classes = labels + 1;
        let len = rng.gen_range(1..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
        let logits = random_logits(&mut rng, frames * classes);
        let lp: Vec<f64> = logits.chunks(classes).flat_map(log_softmax).collect();
        let valid: Vec<f64> = all_paths(frames, classes)
            .iter()
            .filter(|p| merge_then_drop_blanks(p) == target)
            .map(|p| path_logprob(&lp, classes, p))
            .collect();
        let got = ctc_value(&logits, classes, &target);
        if valid.is_empty() {
            assert!(got.is_none(), "{target:?} in {frames} frames");
            continue;
        }
        let expect = -valid.iter().map(|x| x.exp()).sum::<f64>().ln();
        let got = got.unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
        for p in &valid {
            assert!(got <= -p + 1e-12);
        }
        checked += 1;
    }
}

#[test]
fn collapse_examples() {
    let (a, b) = (1, 2);
    assert_eq!(collapse(&[a, a, BLANK, b, b], BLANK), [a, b]);
    assert!(collapse(&[BLANK; 3], BLANK).is_empty());
    assert_eq!(collapse(&[a, BLANK, a], BLANK), [a, a]);
}

/// Expands `y` by repeating each token, inserting blanks anywhere, and
/// forcing a blank between equal neighbours.
fn expand(y: &[usize], reps: &[usize], blanks: &[usize]) -> Vec<usize> {
    let mut path = vec![BLANK; blanks[0]];
    for (i, &tok) in y.iter().enumerate() {
        if i > 0 && y[i - 1] == tok && blanks[i] == 0 {
            path.push(BLANK);
        }
        path.extend(std::iter::repeat_n(tok, reps[i]));
        path.extend(std::iter::repeat_n(BLANK, blanks[i + 1]));
    }
    path
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn collapse_inverts_expansion(
        y in prop::collection::vec(1usize..4, 0..8),
        reps in prop::collection::vec(1usize..4, 8),
        blanks in prop::collection::vec(0usize..3, 9),
    ) {
        let path = expand(&y, &reps, &blanks);
        prop_assert_eq!(collapse(&path, BLANK), y);
    }
}

#[test]
fn rephrased_reference_equals_baseline_loss_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::new(vec![2, 3, 6], (0..36).map(|_| rng.gen_range(-3.0f32..3.0)).collect());
    let targets = [1, 5, 2, 3, 3, 0];
    let mask = [true, true, true, true, true, false];
    let mut t1 = Tape::<f32>::new();
    let x1 = t1.leaf(logits.clone(), true);
    let base = ce_loss_vanilla(&mut t1, x1, &targets, &mask).unwrap();
    let mut t2 = Tape::<f32>::new();
    let x2 = t2.leaf(logits, true);
    let reph = ce_loss_on_rephrased(&mut t2, x2, &targets, &mask).unwrap();
    assert_eq!(base.value.to_bits(), reph.value.to_bits());
    t1.backward(base.loss.unwrap()).unwrap();
    t2.backward(reph.loss.unwrap()).unwrap();
    assert_eq!(t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
}

#[test]
fn nat_argmax_target_minimises_each_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = random_logits(&mut rng, 4 * 5);
    let argmax: Vec<usize> = logits
        .chunks(5)
        .map(|r| (0..5).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
        .collect();
    let best = ce(&logits, 5, &argmax, &[true; 4]);
    for t in 0..4 {
        for c in 0..5 {
            let mut y = argmax.clone();
            y[t] = c;
            assert!(ce(&logits, 5, &y, &[true; 4]) >= best);
        }
    }
}

#[test]
fn rephrased_target_penalises_only_the_disagreeing_position() {
    // Tokens: I ate pizza this morning apple.
    let (i, ate, pizza, this, morning, apple) = (0, 1, 2, 3, 4, 5);
    let nat_output = [this, morning, i, ate, apple];
    let y_r = [this, morning, i, ate, pizza];
    let mut logits = vec![0.0; 5 * 6];
    for (t, &tok) in nat_output.iter().enumerate() {
        logits[t * 6 + tok] = 12.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[5, 6], &logits), true);
    let r = ce_loss_on_rephrased(&mut tape, x, &y_r, &[true; 5]).unwrap();
    let penalised: Vec<usize> = r
        .token_logprobs
        .iter()
        .enumerate()
        .filter(|(_, &lp)| lp < -1.0)
        .map(|(t, _)| t + 1)
        .collect();
    assert_eq!(penalised, [5]);
}

fn reph_loss(logits: &[f64], v: usize, reference: &[usize], nat: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[reference.len(), v], logits), true);
    pretrain_rephraser_loss(&mut tape, x, reference, nat, &vec![true; reference.len()])
        .unwrap()
        .value
}

#[test]
fn rephraser_pretraining_averages_two_cross_entropies() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let logits = random_logits(&mut rng, 3 * 4);
    let (reference, nat) = ([1, 2, 3], [1, 0, 0]);
    let mask = [true; 3];
    assert!(
        (reph_loss(&logits, 4, &reference, &reference) - oracle_ce(&logits, 4, &reference, &mask))
            .abs()
            < 1e-12
    );
    let expect = 0.5 * (oracle_ce(&logits, 4, &reference, &mask) + oracle_ce(&logits, 4, &nat, &mask));
    assert!((reph_loss(&logits, 4, &reference, &nat) - expect).abs() < 1e-12);
    assert!((reph_loss(&[0.0; 4], 4, &[1], &[2]) - 4f64.ln()).abs() < 1e-12);
}
