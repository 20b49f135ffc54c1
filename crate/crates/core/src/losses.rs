//! Training losses. Every loss is a raw sum over contributing positions;
//! callers apply their own normalisation.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{ctc_feasible, AutogradError, Real, Tape, Tensor, Var};

type Result<T> = core::result::Result<T, AutogradError>;

/// A loss on the tape plus the bookkeeping needed for logging and rewards.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    /// Summed loss; `None` when every pair was skipped.
    pub loss: Option<Var>,
    pub value: f64,
    /// Log-probability of every contributing target position, row-major.
    /// Empty for CTC losses, which have no per-position decomposition.
    pub token_logprobs: Vec<f64>,
    /// Total log-likelihood of each sentence; `None` for skipped sentences.
    pub sentence_logprobs: Vec<Option<f64>>,
    /// Target tokens that contributed.
    pub tokens: usize,
    /// Pairs left out because no alignment or no target exists.
    pub skipped: usize,
}

impl LossReport {
    pub fn per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.value / self.tokens as f64
        }
    }
}

fn invalid(op: &'static str, reason: &str) -> AutogradError {
    AutogradError::Invalid {
        op,
        reason: reason.to_string(),
    }
}

/// Cross-entropy of `logits` (`[.., T, V]`) against `targets` over the
/// positions where `mask` is set.
fn masked_ce<F: Real>(
    tape: &mut Tape<F>,
    op: &'static str,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<LossReport> {
    let shape = tape.shape(logits).to_vec();
    if shape.is_empty() {
        return Err(invalid(op, "logits must have a class axis"));
    }
    let rows = shape[..shape.len() - 1].iter().product::<usize>();
    if targets.len() != rows || mask.len() != rows {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid(op, "no position contributes to the loss"));
    }
    let seq_len = if shape.len() >= 3 {
        shape[shape.len() - 2]
    } else {
        rows
    };
    let lp = tape.log_softmax(logits);
    let picked: Vec<usize> = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { 0 })
        .collect();
    let gathered = tape.gather_last(lp, &picked)?;
    let weights = Tensor::new(
        tape.shape(gathered).to_vec(),
        mask.iter()
            .map(|&m| if m { F::one() } else { F::zero() })
            .collect(),
    );
    let w = tape.constant(weights);
    let kept = tape.mul(gathered, w)?;
    let total = tape.sum(kept);
    let loss = tape.neg(total);

    let values = &tape.value(gathered).data;
    let mut token_logprobs = Vec::new();
    let mut sentence_logprobs = vec![Some(0.0); rows.div_ceil(seq_len.max(1))];
    for (r, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m {
            token_logprobs.push(v.f64());
            if let Some(s) = sentence_logprobs[r / seq_len.max(1)].as_mut() {
                *s += v.f64();
            }
        }
    }
    Ok(LossReport {
        loss: Some(loss),
        value: tape.value(loss).data[0].f64(),
        tokens: token_logprobs.len(),
        token_logprobs,
        sentence_logprobs,
        skipped: 0,
    })
}

/// `−Σ_t log p(y_t)` over non-pad positions (`valid`).
pub fn ce_loss_vanilla<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
    valid: &[bool],
) -> Result<LossReport> {
    masked_ce(tape, "ce_loss_vanilla", logits, targets, valid)
}

/// Cross-entropy over masked positions only; observed positions contribute
/// nothing.
pub fn ce_loss_cmlm<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
    valid: &[bool],
    masked: &[bool],
) -> Result<LossReport> {
    if masked.len() != valid.len() {
        return Err(AutogradError::ShapeMismatch {
            op: "ce_loss_cmlm",
            lhs: vec![valid.len()],
            rhs: vec![masked.len()],
        });
    }
    let mask: Vec<bool> = valid.iter().zip(masked).map(|(&v, &m)| v && m).collect();
    masked_ce(tape, "ce_loss_cmlm", logits, targets, &mask)
}

/// Merges runs of identical symbols, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if prev != Some(s) && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `−log Σ_{A ∈ Γ(Y)} Π_t p_t(A_t)` for every row of `logits`
/// (`[B, T, C]`, or `[T, C]` for one sentence), each using the first
/// `input_lens[b]` frames. Targets no alignment can produce are skipped and
/// counted.
pub fn ctc_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    input_lens: &[usize],
    targets: &[&[usize]],
    blank: usize,
) -> Result<LossReport> {
    ctc_loss_impl(tape, logits, input_lens, targets, blank, false)
}

fn ctc_loss_impl<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    input_lens: &[usize],
    targets: &[&[usize]],
    blank: usize,
    skip_empty: bool,
) -> Result<LossReport> {
    if targets.iter().any(|y| y.contains(&blank)) {
        return Err(invalid("ctc_loss", "target contains the blank symbol"));
    }
    if input_lens.len() != targets.len() {
        return Err(AutogradError::ShapeMismatch {
            op: "ctc_loss",
            lhs: vec![input_lens.len()],
            rhs: vec![targets.len()],
        });
    }
    let keep: Vec<bool> = targets
        .iter()
        .zip(input_lens)
        .map(|(y, &n)| ctc_feasible(y, n) && !(skip_empty && y.is_empty()))
        .collect();
    let skipped = keep.iter().filter(|&&k| !k).count();
    let mut report = LossReport {
        skipped,
        sentence_logprobs: vec![None; targets.len()],
        ..LossReport::default()
    };
    if skipped == targets.len() {
        return Ok(report);
    }
    let substituted: Vec<&[usize]> = targets
        .iter()
        .zip(&keep)
        .map(|(y, &k)| if k { *y } else { &[][..] })
        .collect();
    let lp = tape.log_softmax(logits);
    let nll = tape.ctc_nll(lp, input_lens, &substituted, blank)?;
    let weights = Tensor::new(
        tape.shape(nll).to_vec(),
        keep.iter()
            .map(|&k| if k { F::one() } else { F::zero() })
            .collect(),
    );
    let w = tape.constant(weights);
    let kept = tape.mul(nll, w)?;
    let loss = tape.sum(kept);
    for (b, v) in tape.value(nll).data.iter().enumerate() {
        if keep[b] {
            report.sentence_logprobs[b] = Some(-v.f64());
        }
    }
    report.tokens = targets
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(y, _)| y.len())
        .sum();
    report.value = tape.value(loss).data[0].f64();
    report.loss = Some(loss);
    Ok(report)
}

/// NAT cross-entropy against the rephrased target `y_r` (treated as a
/// constant). For CMLM pass the masked positions as `mask`; otherwise the
/// non-pad positions.
pub fn ce_loss_on_rephrased<F: Real>(
    tape: &mut Tape<F>,
    nat_logits: Var,
    y_r: &[usize],
    mask: &[bool],
) -> Result<LossReport> {
    masked_ce(tape, "ce_loss_on_rephrased", nat_logits, y_r, mask)
}

/// NAT CTC loss against collapsed rephraser outputs. Empty outputs and
/// outputs too long to align are skipped and counted.
pub fn ctc_loss_on_rephrased<F: Real>(
    tape: &mut Tape<F>,
    nat_logits: Var,
    input_lens: &[usize],
    y_r: &[&[usize]],
    blank: usize,
) -> Result<LossReport> {
    ctc_loss_impl(tape, nat_logits, input_lens, y_r, blank, true)
}

fn half_sum<F: Real>(tape: &mut Tape<F>, a: LossReport, b: LossReport) -> Result<LossReport> {
    let half = F::of(0.5);
    let loss = match (a.loss, b.loss) {
        (Some(x), Some(y)) => {
            let s = tape.add(x, y)?;
            Some(tape.scale(s, half))
        }
        (Some(x), None) | (None, Some(x)) => Some(tape.scale(x, half)),
        (None, None) => None,
    };
    let sentence_logprobs = a
        .sentence_logprobs
        .iter()
        .zip(&b.sentence_logprobs)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => Some(0.5 * (x + y)),
            _ => None,
        })
        .collect();
    Ok(LossReport {
        loss,
        value: 0.5 * (a.value + b.value),
        token_logprobs: a
            .token_logprobs
            .into_iter()
            .chain(b.token_logprobs)
            .collect(),
        sentence_logprobs,
        tokens: a.tokens + b.tokens,
        skipped: a.skipped + b.skipped,
    })
}

/// `0.5 · CE(reference) + 0.5 · CE(nat_argmax)` over the positions in
/// `mask`.
pub fn pretrain_rephraser_loss<F: Real>(
    tape: &mut Tape<F>,
    rephraser_logits: Var,
    reference: &[usize],
    nat_argmax: &[usize],
    mask: &[bool],
) -> Result<LossReport> {
    let a = masked_ce(
        tape,
        "pretrain_rephraser_loss",
        rephraser_logits,
        reference,
        mask,
    )?;
    let b = masked_ce(
        tape,
        "pretrain_rephraser_loss",
        rephraser_logits,
        nat_argmax,
        mask,
    )?;
    half_sum(tape, a, b)
}

/// CTC form of [`pretrain_rephraser_loss`]: both terms are CTC losses, the
/// second against the collapsed NAT argmax.
pub fn pretrain_rephraser_loss_ctc<F: Real>(
    tape: &mut Tape<F>,
    rephraser_logits: Var,
    input_lens: &[usize],
    references: &[&[usize]],
    nat_collapsed: &[&[usize]],
    blank: usize,
) -> Result<LossReport> {
    let a = ctc_loss(tape, rephraser_logits, input_lens, references, blank)?;
    let b = ctc_loss(tape, rephraser_logits, input_lens, nat_collapsed, blank)?;
    half_sum(tape, a, b)
}
