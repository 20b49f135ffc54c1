//! Evaluation metrics: corpus BLEU with multiple references, prediction
//! entropy, and adjacent-repetition rate.

use alloc::vec::Vec;

use crate::autograd::Real;
use crate::rewards::clipped_matches;
use crate::{Error, Result};

/// Corpus BLEU-4 ×100. N-gram matches are clipped per sentence by the
/// largest count in any of its references and summed over the corpus; the
/// brevity penalty uses, per sentence, the reference length closest to the
/// hypothesis length (the shorter one on ties).
pub fn corpus_bleu<T: Ord>(hypotheses: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Config("corpus_bleu on an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: hypotheses.len(),
            got: references.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        let rs: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
        for n in 1..=4 {
            let (m, t) = clipped_matches(h, &rs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        hyp_len += h.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| libm::log(matched[i] as f64 / total[i] as f64))
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    } else {
        1.0
    };
    Ok(100.0 * bp * libm::exp(log_p))
}

/// Entropy in nats of the distribution `softmax(logits)`.
pub fn entropy<F: Real>(logits: &[F]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let z: f64 = logits.iter().map(|x| libm::exp(x.f64() - max)).sum();
    let log_z = libm::log(z) + max;
    logits
        .iter()
        .map(|x| {
            let lp = x.f64() - log_z;
            let p = libm::exp(lp);
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean entropy over every decoded position of every sentence.
pub fn entropy_metric<'a>(per_sentence: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in per_sentence {
        sum += e.iter().sum::<f64>();
        n += e.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of tokens equal to their immediate predecessor.
pub fn repetition_rate<T: PartialEq>(hypotheses: &[Vec<T>]) -> f64 {
    let total: usize = hypotheses.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let repeats: usize = hypotheses
        .iter()
        .map(|h| h.windows(2).filter(|w| w[0] == w[1]).count())
        .sum();
    repeats as f64 / total as f64
}
