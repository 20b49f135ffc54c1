//! Rephraser rewards and the REINFORCE estimator.
//!
//! The reward of a rephrased target `Y_r` is
//! `α · sim(Y_r, Y) + (1 − α) · r_loss(Y_r)` where `r_loss` is the
//! length-normalised NAT log-likelihood of `Y_r` and `α` decays linearly
//! over fine-tuning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ctc_log_likelihood, AutogradError, Real, Tape, Tensor, Var};
use crate::losses::collapse;
use crate::{Error, Result};

/// Reward of an empty rephrased target.
pub const DEFAULT_EMPTY_REWARD: f64 = -10.0;

/// Mean NAT log-probability per target token; `empty_reward` for an empty
/// target.
pub fn r_loss(logprob_sum: f64, len: usize, empty_reward: f64) -> f64 {
    if len == 0 {
        empty_reward
    } else {
        logprob_sum / len as f64
    }
}

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// `(matched, total)` n-gram counts of `candidate`, each n-gram's matches
/// clipped by its largest count in any single reference.
pub fn clipped_matches<T: Ord>(candidate: &[T], references: &[&[T]], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matched = 0;
    for (g, &c) in &cand {
        let max_ref = refs
            .iter()
            .map(|r| r.get(g).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += c.min(max_ref);
    }
    (
        matched,
        candidate.len().saturating_sub(n - 1).min(candidate.len()),
    )
}

/// Sentence BLEU-4 in `[0, 1]`. Unigram precision is unsmoothed, 2- to
/// 4-gram precisions use add-one smoothing, and candidates shorter than
/// the reference pay `exp(1 − |ref|/|cand|)`.
pub fn sentence_bleu<T: Ord>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = clipped_matches(candidate, &[reference], n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += libm::log(p);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { libm::exp(1.0 - r / c) } else { 1.0 };
    bp * libm::exp(log_sum / 4.0)
}

pub fn interpolate_reward(r_sim: f64, r_loss: f64, alpha: f64) -> f64 {
    alpha * r_sim + (1.0 - alpha) * r_loss
}

/// Linear decay of `α` from `alpha_max` at step 0 to `alpha_min` at
/// `total_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub total_steps: u64,
}

impl AnnealSchedule {
    pub fn alpha(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.alpha_min;
        }
        let frac = t as f64 / self.total_steps as f64;
        frac * self.alpha_min + (1.0 - frac) * self.alpha_max
    }
}

/// Similarity between a rephrased target and the reference.
#[derive(Clone, Copy, Debug)]
pub enum Similarity {
    Bleu,
    Custom(fn(&[usize], &[usize]) -> f64),
}

impl Similarity {
    pub fn score(&self, candidate: &[usize], reference: &[usize]) -> f64 {
        match self {
            Similarity::Bleu => sentence_bleu(candidate, reference),
            Similarity::Custom(f) => f(candidate, reference),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RewardConfig {
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Number of fine-tuning steps the schedule spans.
    pub total_steps: u64,
    /// Baseline samples per sentence.
    pub k_baseline: usize,
    pub empty_reward: f64,
    pub similarity: Similarity,
    /// Fixed `α` instead of the annealed schedule.
    pub static_alpha: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_max: 0.75,
            alpha_min: 0.5,
            total_steps: 1000,
            k_baseline: 2,
            empty_reward: DEFAULT_EMPTY_REWARD,
            similarity: Similarity::Bleu,
            static_alpha: None,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.alpha_min) && unit(self.alpha_max) && self.alpha_min <= self.alpha_max) {
            return Err(Error::Config(format!(
                "need 0 <= alpha_min ({}) <= alpha_max ({}) <= 1",
                self.alpha_min, self.alpha_max
            )));
        }
        if let Some(a) = self.static_alpha {
            if !unit(a) {
                return Err(Error::Config(format!("static alpha {a} outside [0, 1]")));
            }
        }
        if self.k_baseline == 0 {
            return Err(Error::Config("k_baseline must be at least 1".into()));
        }
        if !self.empty_reward.is_finite() {
            return Err(Error::Config("empty_reward must be finite".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            alpha_max: self.alpha_max,
            alpha_min: self.alpha_min,
            total_steps: self.total_steps,
        }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        self.static_alpha
            .unwrap_or_else(|| self.schedule().alpha(t))
    }
}

/// One draw from the rephraser.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RephraseSample {
    pub tokens: Vec<usize>,
    /// Log-probability of the symbol drawn at each position (alignment
    /// positions for CTC).
    pub position_logprobs: Vec<f64>,
    /// `log P_r(Y_r)`; the CTC marginal for CTC samples.
    pub logprob: f64,
    pub reward: f64,
}

fn categorical<F: Real, R: Rng>(log_probs: &[F], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += libm::exp(lp.f64());
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative mass just below 1.
    log_probs
        .iter()
        .enumerate()
        .rev()
        .find(|(_, lp)| lp.f64() > f64::NEG_INFINITY)
        .map_or(0, |(i, _)| i)
}

/// Independent categorical draw at every position of `log_probs`
/// (`[T, classes]`, already normalised). Positions with `forced[t] =
/// Some(tok)` keep `tok` and contribute log-probability 0.
pub fn sample_positions<F: Real, R: Rng>(
    log_probs: &[F],
    classes: usize,
    forced: Option<&[Option<usize>]>,
    rng: &mut R,
) -> RephraseSample {
    let mut s = RephraseSample::default();
    for (t, row) in log_probs.chunks_exact(classes).enumerate() {
        match forced.and_then(|f| f[t]) {
            Some(tok) => {
                s.tokens.push(tok);
                s.position_logprobs.push(0.0);
            }
            None => {
                let tok = categorical(row, rng);
                s.tokens.push(tok);
                s.position_logprobs.push(row[tok].f64());
            }
        }
    }
    s.logprob = s.position_logprobs.iter().sum();
    s
}

/// Draws an alignment path, collapses it, and scores the collapsed output
/// by its marginal probability over all alignments.
pub fn sample_ctc<F: Real, R: Rng>(
    log_probs: &[F],
    classes: usize,
    blank: usize,
    rng: &mut R,
) -> RephraseSample {
    let mut path = Vec::new();
    let mut position_logprobs = Vec::new();
    for row in log_probs.chunks_exact(classes) {
        let tok = categorical(row, rng);
        path.push(tok);
        position_logprobs.push(row[tok].f64());
    }
    let tokens = collapse(&path, blank);
    let logprob = ctc_log_likelihood(log_probs, classes, &tokens, blank)
        .expect("a sampled path always aligns its own collapse")
        .f64();
    RephraseSample {
        tokens,
        position_logprobs,
        logprob,
        reward: 0.0,
    }
}

/// Reward of one sample split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardParts {
    pub sim: f64,
    pub loss: f64,
    pub total: f64,
}

/// Learning samples with their advantages and batch-mean diagnostics.
#[derive(Clone, Debug, Default)]
pub struct ReinforceDraw {
    /// One learning sample per sentence, reward filled in.
    pub samples: Vec<RephraseSample>,
    /// `R(Y_r) − b` per sentence.
    pub advantages: Vec<f64>,
    pub mean_reward: f64,
    pub mean_sim: f64,
    pub mean_loss: f64,
    pub mean_baseline: f64,
}

pub fn baseline(rewards: &[f64]) -> f64 {
    if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    }
}

/// For every sentence draws one learning sample and `k` baseline samples
/// (in that order from `rng`), scores them, and sets the advantage of the
/// learning sample to its reward minus the mean baseline reward. With
/// `k = 0` there is no baseline.
pub fn draw_reinforce<R, S, W>(
    sentences: usize,
    k: usize,
    rng: &mut R,
    mut sample: S,
    mut reward: W,
) -> ReinforceDraw
where
    R: Rng,
    S: FnMut(usize, &mut R) -> RephraseSample,
    W: FnMut(usize, &RephraseSample) -> RewardParts,
{
    let mut out = ReinforceDraw::default();
    let mut base_rewards = Vec::with_capacity(k);
    for b in 0..sentences {
        let mut learn = sample(b, rng);
        let parts = reward(b, &learn);
        learn.reward = parts.total;
        base_rewards.clear();
        for _ in 0..k {
            let s = sample(b, rng);
            base_rewards.push(reward(b, &s).total);
        }
        let base = if k == 0 { 0.0 } else { baseline(&base_rewards) };
        out.advantages.push(parts.total - base);
        out.mean_reward += parts.total;
        out.mean_sim += parts.sim;
        out.mean_loss += parts.loss;
        out.mean_baseline += base;
        out.samples.push(learn);
    }
    if sentences > 0 {
        let n = sentences as f64;
        out.mean_reward /= n;
        out.mean_sim /= n;
        out.mean_loss /= n;
        out.mean_baseline /= n;
    }
    out
}

/// Surrogate whose gradient is `−Σ_b adv_b ∇ log P_r(Y_r^b)` for
/// position-factorised samples. `tokens` is the padded `[B·T]` sample
/// matrix and `weights[r]` the advantage of the sentence owning row `r`
/// (0 for pads and forced positions).
pub fn reinforce_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    tokens: &[usize],
    weights: &[f64],
) -> Result<Var> {
    if tokens.len() != weights.len() {
        return Err(AutogradError::ShapeMismatch {
            op: "reinforce_loss",
            lhs: vec![tokens.len()],
            rhs: vec![weights.len()],
        }
        .into());
    }
    let lp = tape.log_softmax(logits);
    let g = tape.gather_last(lp, tokens)?;
    let w = Tensor::new(
        tape.shape(g).to_vec(),
        weights.iter().map(|&a| F::of(-a)).collect(),
    );
    let w = tape.constant(w);
    let prod = tape.mul(g, w)?;
    Ok(tape.sum(prod))
}

/// CTC form of [`reinforce_loss`]: `log P_r` is the alignment marginal of
/// each collapsed sample.
pub fn reinforce_loss_ctc<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    input_lens: &[usize],
    samples: &[&[usize]],
    advantages: &[f64],
    blank: usize,
) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let nll = tape.ctc_nll(lp, input_lens, samples, blank)?;
    let w = Tensor::new(
        tape.shape(nll).to_vec(),
        advantages.iter().map(|&a| F::of(a)).collect(),
    );
    let w = tape.constant(w);
    let prod = tape.mul(nll, w)?;
    Ok(tape.sum(prod))
}
