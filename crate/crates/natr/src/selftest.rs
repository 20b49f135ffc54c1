//! Oracle suites behind `natr selftest`: CTC against path enumeration,
//! gradients against finite differences, the REINFORCE estimator against
//! its closed form, and BLEU against hand-counted cases.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use natr_core::autograd::{
    ctc_feasible, finite_diff_check, log_softmax_in_place, AutogradError, Tape, Tensor, Var,
};
use natr_core::losses::{collapse, ctc_loss};
use natr_core::metrics::corpus_bleu;
use natr_core::rewards::{
    clipped_matches, draw_reinforce, reinforce_loss, sample_positions, sentence_bleu, RewardParts,
};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
}

/// `−log Σ P(path)` over every path of `frames` symbols that collapses to
/// `target`, by enumeration.
pub fn enumerate_ctc_nll(log_probs: &[f64], classes: usize, target: &[usize], blank: usize) -> f64 {
    let frames = log_probs.len() / classes;
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path, blank) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &c)| log_probs[t * classes + c])
                .sum::<f64>()
                .exp();
        }
        let mut t = 0;
        loop {
            if t == frames {
                return -total.ln();
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Random CTC problems (up to 6 frames, 3 target symbols, 3 labels plus
/// blank) checked against [`enumerate_ctc_nll`] to within 1e-8.
pub fn ctc_enumeration_suite(cases: usize, seed: u64) -> SuiteResult {
    timed("ctc-enumeration", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for case in 0..cases {
            let frames = rng.gen_range(1..=6);
            let labels = rng.gen_range(1..=3);
            let classes = labels + 1;
            let target: Vec<usize> = loop {
                let len = rng.gen_range(0..=3);
                let y: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=labels)).collect();
                if ctc_feasible(&y, frames) {
                    break y;
                }
            };
            let logits = random(&mut rng, &[1, frames, classes]);
            let mut lp = logits.data.clone();
            lp.chunks_exact_mut(classes).for_each(log_softmax_in_place);
            let oracle = enumerate_ctc_nll(&lp, classes, &target, 0);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(logits);
            let got = ctc_loss(&mut tape, x, &[frames], &[&target], 0)
                .map_err(|e| format!("case {case}: {e}"))?;
            let err = (got.value - oracle).abs();
            if err > 1e-8 {
                return Err(format!(
                    "case {case} (T={frames}, Y={target:?}): loss {} vs enumeration {oracle}",
                    got.value
                ));
            }
            worst = worst.max(err);
        }
        Ok(format!("{cases} cases, max abs error {worst:.2e}"))
    })
}

type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Build = fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng, bool) -> Result<Var, AutogradError>;

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.gen_range(1..5)
}

fn feasible_targets(
    rng: &mut ChaCha8Rng,
    n: usize,
    frames: usize,
    classes: usize,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| loop {
            let len = rng.gen_range(0..=3);
            let y: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
            if ctc_feasible(&y, frames) {
                break y;
            }
        })
        .collect()
}

fn ctc_case(
    t: &mut Tape<f64>,
    v: &[Var],
    rng: &mut ChaCha8Rng,
    flip: bool,
) -> Result<Var, AutogradError> {
    let s = t.shape(v[0]).to_vec();
    let (frames, classes) = (s[1], s[2]);
    let targets = feasible_targets(rng, 2, frames - 1, classes);
    let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let lp = t.log_softmax(v[0]);
    if flip {
        t.ctc_nll_with_flipped_backward(lp, &[frames, frames - 1], &refs, 0)
    } else {
        t.ctc_nll(lp, &[frames, frames - 1], &refs, 0)
    }
}

fn op_cases() -> Vec<(&'static str, Make, Build)> {
    vec![
        (
            "matmul",
            |r| {
                let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
                vec![random(r, &[b, m, k]), random(r, &[k, n])]
            },
            |t, v, _, _| t.matmul(v[0], v[1]),
        ),
        (
            "matmul_batched",
            |r| {
                let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
                vec![random(r, &[b, m, k]), random(r, &[b, k, n])]
            },
            |t, v, _, _| t.matmul(v[0], v[1]),
        ),
        (
            "transpose",
            |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                vec![random(r, &[a, b, c])]
            },
            |t, v, _, _| t.transpose(v[0]),
        ),
        (
            "add_sub_mul",
            |r| {
                let (a, b) = (dim(r), dim(r));
                vec![random(r, &[a, b]), random(r, &[b])]
            },
            |t, v, _, _| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[1], s)?;
                t.mul(d, v[0])
            },
        ),
        (
            "scale_shift_neg",
            |r| {
                vec![{
                    let s = [dim(r)];
                    random(r, &s)
                }]
            },
            |t, v, _, _| {
                let s = t.scale(v[0], -1.7);
                let s = t.add_scalar(s, 0.3);
                Ok(t.neg(s))
            },
        ),
        (
            "relu",
            |r| {
                let mut x = {
                    let s = [dim(r) + 2];
                    random(r, &s)
                };
                x.data
                    .iter_mut()
                    .filter(|v| v.abs() < 0.05)
                    .for_each(|v| *v += 0.1);
                vec![x]
            },
            |t, v, _, _| Ok(t.relu(v[0])),
        ),
        (
            "softmax",
            |r| {
                vec![{
                    let s = [dim(r), dim(r) + 1];
                    random(r, &s)
                }]
            },
            |t, v, _, _| Ok(t.softmax(v[0])),
        ),
        (
            "log_softmax",
            |r| {
                vec![{
                    let s = [dim(r), dim(r) + 1];
                    random(r, &s)
                }]
            },
            |t, v, _, _| Ok(t.log_softmax(v[0])),
        ),
        (
            "layer_norm",
            |r| {
                let (a, d) = (dim(r), dim(r) + 2);
                vec![random(r, &[a, d]), random(r, &[d]), random(r, &[d])]
            },
            |t, v, _, _| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "masked_fill",
            |r| {
                vec![{
                    let s = [dim(r), dim(r) + 1];
                    random(r, &s)
                }]
            },
            |t, v, rng, _| {
                let n = t.value(v[0]).numel();
                let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
                let y = t.masked_fill(v[0], &mask, -3.0)?;
                Ok(t.softmax(y))
            },
        ),
        (
            "embedding_lookup",
            |r| {
                vec![{
                    let s = [dim(r) + 1, dim(r)];
                    random(r, &s)
                }]
            },
            |t, v, rng, _| {
                let rows = t.shape(v[0])[0];
                let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..rows)).collect();
                t.embedding_lookup(v[0], &idx, &[2, 3])
            },
        ),
        (
            "gather_last",
            |r| {
                vec![{
                    let s = [dim(r), dim(r) + 1];
                    random(r, &s)
                }]
            },
            |t, v, rng, _| {
                let s = t.shape(v[0]).to_vec();
                let idx: Vec<usize> = (0..s[0]).map(|_| rng.gen_range(0..s[1])).collect();
                t.gather_last(v[0], &idx)
            },
        ),
        (
            "concat",
            |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                vec![random(r, &[a, b]), random(r, &[a, c])]
            },
            |t, v, _, _| t.concat(&[v[0], v[1], v[0]], 1),
        ),
        (
            "reductions",
            |r| {
                vec![{
                    let s = [dim(r), dim(r)];
                    random(r, &s)
                }]
            },
            |t, v, _, _| {
                let s = t.sum_last(v[0]);
                let m = t.mean(v[0]);
                let total = t.sum(s);
                t.mul(total, m)
            },
        ),
        (
            "ctc_nll",
            |r| {
                vec![{
                    let s = [2, r.gen_range(3..7), r.gen_range(2..5)];
                    random(r, &s)
                }]
            },
            ctc_case,
        ),
        (
            "ctc_loss",
            |r| {
                vec![{
                    let s = [3, r.gen_range(2..7), r.gen_range(2..5)];
                    random(r, &s)
                }]
            },
            |t, v, rng, _| {
                let s = t.shape(v[0]).to_vec();
                let (frames, classes) = (s[1], s[2]);
                // the last target may be infeasible and is then skipped
                let mut targets = feasible_targets(rng, 2, frames, classes);
                targets.push((0..frames + 1).map(|i| 1 + i % (classes - 1)).collect());
                let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
                let report = ctc_loss(t, v[0], &[frames; 3], &refs, 0).map_err(|e| {
                    AutogradError::Invalid {
                        op: "ctc_loss",
                        reason: e.to_string(),
                    }
                })?;
                report.loss.ok_or(AutogradError::Invalid {
                    op: "ctc_loss",
                    reason: "every target skipped".into(),
                })
            },
        ),
    ]
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, AutogradError> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Every differentiable op and the CTC loss against central differences
/// (ε = 1e-5, max relative error 1e-4), `seeds` random draws each.
/// `flip_ctc_backward` swaps in a CTC rule with the wrong sign, which the
/// suite must catch.
pub fn finite_difference_suite(seeds: u64, flip_ctc_backward: bool) -> SuiteResult {
    timed("finite-difference", || {
        let mut worst = (0.0f64, "");
        let cases = op_cases();
        for (name, make, build) in &cases {
            for seed in 0..seeds {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ name.len() as u64);
                let inputs = make(&mut rng);
                let graph_seed: u64 = rng.gen();
                let err = finite_diff_check(
                    |tape, v| {
                        let mut r = ChaCha8Rng::seed_from_u64(graph_seed);
                        let out = build(tape, v, &mut r, flip_ctc_backward)?;
                        weighted_sum(tape, out, graph_seed)
                    },
                    &inputs,
                    1e-5,
                )
                .map_err(|e| format!("{name} seed {seed}: {e}"))?;
                if err >= 1e-4 {
                    return Err(format!("{name} seed {seed}: max relative error {err:.3e}"));
                }
                if err > worst.0 {
                    worst = (err, name);
                }
            }
        }
        Ok(format!(
            "{} ops x {seeds} seeds, max relative error {:.2e} ({})",
            cases.len(),
            worst.0,
            worst.1
        ))
    })
}

/// Logits and fixed per-token rewards of the enumerable policy.
pub const POLICY_LOGITS: [f64; 3] = [0.2, -0.4, 0.7];
pub const POLICY_REWARDS: [f64; 3] = [1.0, 0.4, 0.1];

/// One REINFORCE gradient estimate for the single-position policy, drawn
/// from `seed`, through the training code path.
pub fn policy_gradient_draw(seed: u64, k_baseline: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lp = POLICY_LOGITS.to_vec();
    log_softmax_in_place(&mut lp);
    let draw = draw_reinforce(
        1,
        k_baseline,
        &mut rng,
        |_, r| sample_positions(&lp, 3, None, r),
        |_, s| {
            let total = POLICY_REWARDS[s.tokens[0]];
            RewardParts {
                sim: total,
                loss: 0.0,
                total,
            }
        },
    );
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::new(vec![1, 3], POLICY_LOGITS.to_vec()), true);
    let loss = reinforce_loss(&mut tape, z, &draw.samples[0].tokens, &draw.advantages)
        .expect("shapes match");
    tape.backward(loss).expect("scalar loss");
    let g = tape.grad(z).expect("leaf gradient");
    // the surrogate is minimised, so the ascent direction is its negation
    [-g[0], -g[1], -g[2]]
}

/// `∇_z E[R] = p ⊙ (R − E[R])` for the softmax policy.
pub fn policy_gradient_exact() -> [f64; 3] {
    let mut p = POLICY_LOGITS.to_vec();
    natr_core::autograd::softmax_in_place(&mut p);
    let mean: f64 = p.iter().zip(POLICY_REWARDS).map(|(p, r)| p * r).sum();
    [0, 1, 2].map(|i| p[i] * (POLICY_REWARDS[i] - mean))
}

pub struct EstimatorStats {
    pub mean: [f64; 3],
    /// Summed per-coordinate variance.
    pub variance: f64,
}

pub fn estimator_stats(draws: u64, k_baseline: usize, seed: u64) -> EstimatorStats {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for d in 0..draws {
        let g = policy_gradient_draw(seed.wrapping_add(d), k_baseline);
        for i in 0..3 {
            sum[i] += g[i];
            sq[i] += g[i] * g[i];
        }
    }
    let n = draws as f64;
    let mean = sum.map(|s| s / n);
    let variance = (0..3).map(|i| sq[i] / n - mean[i] * mean[i]).sum();
    EstimatorStats { mean, variance }
}

pub fn relative_error(estimate: &[f64; 3], exact: &[f64; 3]) -> f64 {
    let diff: f64 = estimate
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let norm: f64 = exact.iter().map(|b| b * b).sum();
    (diff / norm).sqrt()
}

/// Mean of `draws` estimates within 2% (relative, Euclidean) of the exact
/// gradient, with and without baseline, and the baseline not increasing
/// the variance on the same seeds.
pub fn reinforce_suite(draws: u64) -> SuiteResult {
    timed("reinforce-unbiasedness", || {
        let exact = policy_gradient_exact();
        let plain = estimator_stats(draws, 0, 1);
        let based = estimator_stats(draws, 2, 1);
        let (e0, e2) = (
            relative_error(&plain.mean, &exact),
            relative_error(&based.mean, &exact),
        );
        if e0 > 0.02 || e2 > 0.02 {
            return Err(format!(
                "relative error {e0:.4} (no baseline), {e2:.4} (K=2)"
            ));
        }
        if based.variance > plain.variance {
            return Err(format!(
                "baseline variance {:.4} exceeds plain {:.4}",
                based.variance, plain.variance
            ));
        }
        Ok(format!(
            "relative error {e0:.4} / {e2:.4}, variance {:.4} -> {:.4}",
            plain.variance, based.variance
        ))
    })
}

/// Hand-counted BLEU cases.
pub fn bleu_suite() -> SuiteResult {
    timed("bleu", || {
        let toks = |s: &str| s.split(' ').map(str::to_owned).collect::<Vec<_>>();
        let x = toks("the cat sat on the mat");
        if sentence_bleu(&x, &x) != 1.0 {
            return Err("sentence_bleu(x, x) != 1".into());
        }
        let cand = toks("this morning I ate pizza");
        let reference = toks("I ate pizza this morning");
        let refs = [reference.as_slice()];
        let counts: Vec<(usize, usize)> =
            (1..=4).map(|n| clipped_matches(&cand, &refs, n)).collect();
        if counts != [(5, 5), (3, 4), (1, 3), (0, 2)] {
            return Err(format!("clipped counts {counts:?}"));
        }
        if sentence_bleu::<String>(&[], &x) != 0.0 {
            return Err("empty candidate does not score 0".into());
        }
        let hyps = vec![toks("a b c d"), toks("e f")];
        let refs = vec![vec![toks("a b c e")], vec![toks("e f g")]];
        // one 4-gram in the whole corpus, unmatched
        let got = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?;
        if got != 0.0 {
            return Err(format!("corpus BLEU {got}, expected 0 (no 4-gram matches)"));
        }
        let hyps = vec![toks("a b c d e"), toks("f g h i")];
        let refs = vec![vec![toks("a b c d x")], vec![toks("f g h i"), toks("q")]];
        // 1-grams 8/9, 2-grams 6/7, 3-grams 4/5, 4-grams 2/3, equal lengths
        let expected =
            100.0 * ((8.0f64 / 9.0) * (6.0 / 7.0) * (4.0 / 5.0) * (2.0 / 3.0)).powf(0.25);
        let got = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?;
        if (got - expected).abs() > 1e-9 {
            return Err(format!("corpus BLEU {got}, expected {expected}"));
        }
        Ok("identity, clipped counts, empty candidate, two corpora".into())
    })
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![
        ctc_enumeration_suite(200, 1),
        finite_difference_suite(20, false),
        reinforce_suite(100_000),
        bleu_suite(),
    ]
}
