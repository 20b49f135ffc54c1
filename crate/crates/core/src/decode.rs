//! Inference: argmax decoding, CTC collapse decoding, and mask-predict.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{log_softmax_in_place, Real, Tape};
use crate::data::{BLANK, MASK};
use crate::losses::collapse;
use crate::metrics::entropy;
use crate::model::{DecoderInput, ModelKind, NatModel};
use crate::{Error, Result};

/// One decoded sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Probability of the chosen symbol at every decoder position (before
    /// collapsing, for CTC).
    pub probs: Vec<f64>,
    /// Entropy (nats) of the full output distribution at every decoder
    /// position.
    pub entropies: Vec<f64>,
    pub iterations: usize,
}

impl DecodeResult {
    /// Mean log-probability of the chosen symbols.
    pub fn mean_logprob(&self) -> f64 {
        if self.probs.is_empty() {
            return 0.0;
        }
        self.probs.iter().map(|p| libm::log(*p)).sum::<f64>() / self.probs.len() as f64
    }
}

struct Position {
    token: usize,
    prob: f64,
    entropy: f64,
}

fn position<F: Real>(logits: &[F]) -> Position {
    let mut lp: Vec<F> = logits.to_vec();
    log_softmax_in_place(&mut lp);
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    Position {
        token: best,
        prob: libm::exp(lp[best].f64()),
        entropy: entropy(logits),
    }
}

fn expect_kind<F: Real>(model: &NatModel<F>, kinds: &[ModelKind]) -> Result<()> {
    if kinds.contains(&model.kind()) {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!(
            "decoder does not apply to {} models",
            model.kind().name()
        )))
    }
}

/// Predicted target lengths from the length head (argmax class).
pub fn predict_lengths<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
) -> Result<Vec<usize>> {
    Ok(length_candidates(model, src, lens, 1)?
        .into_iter()
        .map(|c| c[0])
        .collect())
}

/// Up to `k` distinct candidate lengths per sentence, most likely first.
pub fn length_candidates<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, src, lens)?;
    let logits = model.length_logits(&mut tape, &enc)?;
    let rows = tape.value(logits).rows();
    Ok(rows
        .zip(lens)
        .map(|(row, &l)| model.length_candidates(row, l, k))
        .collect())
}

/// Position-wise argmax at the predicted length, or at `gold_lens` when
/// given.
pub fn decode_vanilla<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
    gold_lens: Option<&[usize]>,
) -> Result<Vec<DecodeResult>> {
    expect_kind(model, &[ModelKind::Vanilla])?;
    let tgt_lens = match gold_lens {
        Some(g) => g.to_vec(),
        None => predict_lengths(model, src, lens)?,
    };
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, src, lens)?;
    let dec = model.decode_nat(
        &mut tape,
        &enc,
        DecoderInput::UniformCopy { lens: &tgt_lens },
    )?;
    let logits = tape.value(dec.logits);
    let v = logits.last_dim();
    Ok(tgt_lens
        .iter()
        .enumerate()
        .map(|(b, &l)| {
            let mut r = DecodeResult {
                iterations: 1,
                ..DecodeResult::default()
            };
            for t in 0..l {
                let off = (b * dec.max + t) * v;
                let p = position(&logits.data[off..off + v]);
                r.tokens.push(p.token);
                r.probs.push(p.prob);
                r.entropies.push(p.entropy);
            }
            r
        })
        .collect())
}

/// Drops every token equal to its predecessor.
pub fn merge_repeats(mut tokens: Vec<usize>) -> Vec<usize> {
    tokens.dedup();
    tokens
}

/// Argmax alignment of length `ctc_upsample · T_src`, collapsed. Tokens
/// separated only by blanks are merged as well, so the output never
/// repeats a token.
pub fn decode_ctc<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
) -> Result<Vec<DecodeResult>> {
    expect_kind(model, &[ModelKind::Ctc])?;
    let frames: Vec<usize> = lens.iter().map(|&l| model.decoder_length(l, 0)).collect();
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, src, lens)?;
    let dec = model.decode_nat(&mut tape, &enc, DecoderInput::UniformCopy { lens: &frames })?;
    let logits = tape.value(dec.logits);
    let v = logits.last_dim();
    Ok(frames
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            let mut path = Vec::with_capacity(n);
            let mut r = DecodeResult {
                iterations: 1,
                ..DecodeResult::default()
            };
            for t in 0..n {
                let off = (b * dec.max + t) * v;
                let p = position(&logits.data[off..off + v]);
                path.push(p.token);
                r.probs.push(p.prob);
                r.entropies.push(p.entropy);
            }
            r.tokens = merge_repeats(collapse(&path, BLANK));
            r
        })
        .collect())
}

/// Number of positions re-masked at iteration `i` (1-based, `i ≥ 2`) of
/// `iterations` for a target of length `t`: `⌈t · (I − i + 1) / I⌉`.
pub fn remask_count(t: usize, i: usize, iterations: usize) -> usize {
    (t * (iterations + 1 - i)).div_ceil(iterations)
}

/// The `n` least confident positions, ties to the lower index.
pub fn least_confident(probs: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[a]
            .partial_cmp(&probs[b])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// One CMLM pass over the padded `tokens`, updating `results` at the
/// positions where `update` is set.
fn cmlm_pass<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
    tokens: &[usize],
    tgt_lens: &[usize],
    update: &[bool],
    results: &mut [DecodeResult],
) -> Result<()> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, src, lens)?;
    let dec = model.decode_nat(
        &mut tape,
        &enc,
        DecoderInput::Tokens {
            tokens,
            lens: tgt_lens,
        },
    )?;
    let logits = tape.value(dec.logits);
    let v = logits.last_dim();
    for (b, r) in results.iter_mut().enumerate() {
        for t in 0..tgt_lens[b] {
            if update[b * dec.max + t] {
                let off = (b * dec.max + t) * v;
                let p = position(&logits.data[off..off + v]);
                r.tokens[t] = p.token;
                r.probs[t] = p.prob;
                r.entropies[t] = p.entropy;
            }
        }
    }
    Ok(())
}

/// Mask-predict: for every one of the top `candidates` lengths, predict all
/// positions from a fully masked target, then for `i = 2..=iterations`
/// re-mask the [`remask_count`] least confident positions and predict them
/// again. The candidate with the highest mean log-probability wins (the
/// more likely length on ties).
pub fn mask_predict<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
    iterations: usize,
    candidates: usize,
) -> Result<Vec<DecodeResult>> {
    expect_kind(model, &[ModelKind::Cmlm])?;
    if iterations == 0 || candidates == 0 {
        return Err(Error::Config(
            "mask_predict needs at least one iteration and one length".into(),
        ));
    }
    let cands = length_candidates(model, src, lens, candidates)?;
    let b = lens.len();
    let mut best: Vec<Option<DecodeResult>> = vec![None; b];
    for c in 0..candidates {
        let tgt_lens: Vec<usize> = cands.iter().map(|cs| cs[c.min(cs.len() - 1)]).collect();
        if c > 0 && cands.iter().all(|cs| c >= cs.len()) {
            break;
        }
        let max = tgt_lens.iter().copied().max().unwrap_or(0);
        let mut results: Vec<DecodeResult> = tgt_lens
            .iter()
            .map(|&l| DecodeResult {
                tokens: vec![MASK; l],
                probs: vec![0.0; l],
                entropies: vec![0.0; l],
                iterations,
            })
            .collect();
        let mut tokens = vec![crate::data::PAD; b * max];
        let mut update = vec![false; b * max];
        for (bi, &l) in tgt_lens.iter().enumerate() {
            for t in 0..l {
                tokens[bi * max + t] = MASK;
                update[bi * max + t] = true;
            }
        }
        cmlm_pass(model, src, lens, &tokens, &tgt_lens, &update, &mut results)?;
        for i in 2..=iterations {
            update.iter_mut().for_each(|u| *u = false);
            for (bi, r) in results.iter().enumerate() {
                let l = tgt_lens[bi];
                for t in 0..l {
                    tokens[bi * max + t] = r.tokens[t];
                }
                for t in least_confident(&r.probs, remask_count(l, i, iterations)) {
                    tokens[bi * max + t] = MASK;
                    update[bi * max + t] = true;
                }
            }
            cmlm_pass(model, src, lens, &tokens, &tgt_lens, &update, &mut results)?;
        }
        for (bi, r) in results.into_iter().enumerate() {
            if c >= cands[bi].len() {
                continue;
            }
            let better = match &best[bi] {
                None => true,
                Some(prev) => r.mean_logprob() > prev.mean_logprob(),
            };
            if better {
                best[bi] = Some(r);
            }
        }
    }
    Ok(best.into_iter().map(|r| r.unwrap_or_default()).collect())
}

/// Decodes with the procedure that fits the model kind; `iterations` and
/// `candidates` only matter for CMLM.
pub fn decode_batch<F: Real>(
    model: &NatModel<F>,
    src: &[usize],
    lens: &[usize],
    iterations: usize,
    candidates: usize,
) -> Result<Vec<DecodeResult>> {
    match model.kind() {
        ModelKind::Vanilla => decode_vanilla(model, src, lens, None),
        ModelKind::Ctc => decode_ctc(model, src, lens),
        ModelKind::Cmlm => mask_predict(model, src, lens, iterations, candidates),
    }
}
