//! Pre-training and fine-tuning steps.
//!
//! Pre-training gives the NAT model its native loss (cross-entropy, masked
//! cross-entropy or CTC) and the rephraser the average of its
//! cross-entropies against the reference and against the NAT argmax.
//! Fine-tuning trains the NAT model on the rephraser's argmax output and the
//! rephraser by REINFORCE with an annealed reward.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{
    ctc_log_likelihood, log_softmax_in_place, AdamConfig, AdamState, ParamId, Real, Tape, Var,
};
use crate::data::{Batch, BLANK};
use crate::losses::{
    ce_loss_cmlm, ce_loss_on_rephrased, ce_loss_vanilla, collapse, ctc_loss, ctc_loss_on_rephrased,
    pretrain_rephraser_loss, pretrain_rephraser_loss_ctc, LossReport,
};
use crate::model::{DecoderInput, DecoderOut, ModelKind, NatModel};
use crate::rewards::{
    draw_reinforce, interpolate_reward, r_loss, reinforce_loss, reinforce_loss_ctc, sample_ctc,
    sample_positions, RewardConfig, RewardParts,
};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct StepConfig {
    /// Weight of the length-predictor loss relative to the main loss.
    pub length_loss_weight: f64,
    pub reward: RewardConfig,
    /// Train the rephraser at all. Off gives the plain NAT baseline.
    pub use_rephraser: bool,
    /// Keep the pre-training rephraser loss during fine-tuning, next to
    /// REINFORCE.
    pub finetune_rephraser_ce: bool,
    /// Fine-tune NAT and rephraser on alternating steps instead of jointly.
    pub alternate: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            length_loss_weight: 0.1,
            reward: RewardConfig::default(),
            use_rephraser: true,
            finetune_rephraser_ce: false,
            alternate: false,
        }
    }
}

/// Per-step diagnostics. Losses are per target token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub nat_loss: f64,
    pub length_loss: f64,
    pub rephraser_loss: f64,
    pub reward: f64,
    pub r_sim: f64,
    pub r_loss: f64,
    pub baseline: f64,
    pub alpha: f64,
    /// Pairs skipped by CTC losses (infeasible or empty targets).
    pub skipped: usize,
    pub tokens: usize,
}

/// Loss components of one batch, kept apart so callers can inspect which
/// parameters each one reaches.
#[derive(Clone, Debug, Default)]
pub struct StepLosses {
    pub nat: Option<Var>,
    pub length: Option<Var>,
    pub rephraser: Option<Var>,
    pub stats: StepStats,
}

struct Forward {
    dec: DecoderOut,
    /// Frames per sentence (CTC) or target lengths.
    dec_lens: Vec<usize>,
    nat: LossReport,
    length: Option<Var>,
    length_value: f64,
}

fn masked_positions(batch: &Batch) -> Result<Vec<bool>> {
    let cm = batch
        .cmlm
        .as_ref()
        .ok_or_else(|| Error::Config("cmlm batch without a mask".into()))?;
    Ok(batch
        .target_mask()
        .iter()
        .zip(&cm.masked)
        .map(|(&v, &m)| v && m)
        .collect())
}

fn references(batch: &Batch) -> Vec<&[usize]> {
    (0..batch.size()).map(|b| batch.target(b)).collect()
}

/// Row-wise log-softmax of a tape value.
fn log_probs<F: Real>(tape: &Tape<F>, logits: Var) -> (Vec<F>, usize) {
    let t = tape.value(logits);
    let v = t.last_dim();
    let mut out = t.data.clone();
    out.chunks_exact_mut(v).for_each(log_softmax_in_place);
    (out, v)
}

/// Owns the model, the optimiser and the sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: NatModel<F>,
    pub adam: AdamState<F>,
    pub config: StepConfig,
    pub rng: ChaCha8Rng,
    /// Optimiser updates applied so far.
    pub step: u64,
    /// Fine-tuning updates applied so far (the annealing clock).
    pub finetune_step: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        model: NatModel<F>,
        adam: AdamConfig,
        config: StepConfig,
        seed: u64,
    ) -> Result<Self> {
        config.reward.validate()?;
        let adam = AdamState::new(adam, model.params());
        Ok(Trainer {
            model,
            adam,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            finetune_step: 0,
        })
    }

    fn forward(&self, tape: &mut Tape<F>, batch: &Batch) -> Result<Forward> {
        let m = &self.model;
        let enc = m.encode(tape, &batch.src, &batch.src_lens)?;
        let valid = batch.target_mask();
        let (length, length_value) = if m.kind() == ModelKind::Ctc {
            (None, 0.0)
        } else {
            let logits = m.length_logits(tape, &enc)?;
            let classes: Vec<usize> = batch
                .src_lens
                .iter()
                .zip(&batch.tgt_lens)
                .map(|(&s, &t)| m.length_class(s, t))
                .collect();
            let r = ce_loss_vanilla(tape, logits, &classes, &vec![true; classes.len()])?;
            let w = F::of(self.config.length_loss_weight);
            (
                r.loss.map(|l| tape.scale(l, w)),
                r.value * self.config.length_loss_weight,
            )
        };
        let (dec, dec_lens, nat) = match m.kind() {
            ModelKind::Vanilla => {
                let dec = m.decode_nat(
                    tape,
                    &enc,
                    DecoderInput::UniformCopy {
                        lens: &batch.tgt_lens,
                    },
                )?;
                let nat = ce_loss_vanilla(tape, dec.logits, &batch.tgt, &valid)?;
                (dec, batch.tgt_lens.clone(), nat)
            }
            ModelKind::Cmlm => {
                let cm = batch
                    .cmlm
                    .as_ref()
                    .ok_or_else(|| Error::Config("cmlm batch without a mask".into()))?;
                let dec = m.decode_nat(
                    tape,
                    &enc,
                    DecoderInput::Tokens {
                        tokens: &cm.observed,
                        lens: &batch.tgt_lens,
                    },
                )?;
                let nat = ce_loss_cmlm(tape, dec.logits, &batch.tgt, &valid, &cm.masked)?;
                (dec, batch.tgt_lens.clone(), nat)
            }
            ModelKind::Ctc => {
                let frames: Vec<usize> = batch
                    .src_lens
                    .iter()
                    .map(|&s| m.decoder_length(s, 0))
                    .collect();
                let dec = m.decode_nat(tape, &enc, DecoderInput::UniformCopy { lens: &frames })?;
                let nat = ctc_loss(tape, dec.logits, &frames, &references(batch), BLANK)?;
                (dec, frames, nat)
            }
        };
        Ok(Forward {
            dec,
            dec_lens,
            nat,
            length,
            length_value,
        })
    }

    /// Rephraser logits for the batch given the NAT forward pass.
    fn rephraser_logits(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch,
        fwd: &Forward,
        nat_argmax: &[usize],
    ) -> Result<Var> {
        match self.model.kind() {
            ModelKind::Ctc => self.model.rephrase_ctc(
                tape,
                nat_argmax,
                &fwd.dec_lens,
                &batch.tgt,
                &batch.tgt_lens,
            ),
            _ => self
                .model
                .rephrase(tape, &batch.tgt, &batch.tgt_lens, &fwd.dec, nat_argmax),
        }
    }

    fn pretrain_rephraser(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch,
        fwd: &Forward,
        reph: Var,
        nat_argmax: &[usize],
    ) -> Result<LossReport> {
        Ok(match self.model.kind() {
            ModelKind::Vanilla => {
                pretrain_rephraser_loss(tape, reph, &batch.tgt, nat_argmax, &batch.target_mask())?
            }
            ModelKind::Cmlm => pretrain_rephraser_loss(
                tape,
                reph,
                &batch.tgt,
                nat_argmax,
                &masked_positions(batch)?,
            )?,
            ModelKind::Ctc => {
                let collapsed = collapsed_rows(nat_argmax, &fwd.dec_lens, fwd.dec.max);
                let c: Vec<&[usize]> = collapsed.iter().map(Vec::as_slice).collect();
                pretrain_rephraser_loss_ctc(
                    tape,
                    reph,
                    &fwd.dec_lens,
                    &references(batch),
                    &c,
                    BLANK,
                )?
            }
        })
    }

    /// Loss components of a pre-training step, recorded on `tape`.
    pub fn pretrain_losses(&self, tape: &mut Tape<F>, batch: &Batch) -> Result<StepLosses> {
        let fwd = self.forward(tape, batch)?;
        let mut out = StepLosses {
            nat: fwd.nat.loss,
            length: fwd.length,
            ..StepLosses::default()
        };
        out.stats.tokens = batch.target_tokens();
        out.stats.nat_loss = fwd.nat.value / out.stats.tokens as f64;
        out.stats.length_loss = fwd.length_value / batch.size() as f64;
        out.stats.skipped = fwd.nat.skipped;
        if self.config.use_rephraser {
            let nat_argmax = tape.value(fwd.dec.logits).argmax_rows();
            let reph = self.rephraser_logits(tape, batch, &fwd, &nat_argmax)?;
            let r = self.pretrain_rephraser(tape, batch, &fwd, reph, &nat_argmax)?;
            out.rephraser = r.loss;
            out.stats.rephraser_loss = r.value / out.stats.tokens as f64;
            out.stats.skipped += r.skipped;
        }
        Ok(out)
    }

    /// Loss components of a fine-tuning step at interpolation weight
    /// `alpha`. Draws REINFORCE samples from the trainer's stream.
    pub fn finetune_losses(
        &mut self,
        tape: &mut Tape<F>,
        batch: &Batch,
        alpha: f64,
    ) -> Result<StepLosses> {
        let fwd = self.forward(tape, batch)?;
        let kind = self.model.kind();
        let tokens = batch.target_tokens();
        let nat_argmax = tape.value(fwd.dec.logits).argmax_rows();
        let reph = self.rephraser_logits(tape, batch, &fwd, &nat_argmax)?;
        let (reph_lp, v) = log_probs(tape, reph);
        let (nat_lp, _) = log_probs(tape, fwd.dec.logits);
        let t_max = fwd.dec.max;
        let rc = self.config.reward.clone();
        let mut out = StepLosses {
            length: fwd.length,
            ..StepLosses::default()
        };
        out.stats.tokens = tokens;
        out.stats.length_loss = fwd.length_value / batch.size() as f64;
        out.stats.alpha = alpha;
        out.stats.skipped = fwd.nat.skipped;

        let reward_of =
            |b: usize, tokens: &[usize], nat_ll: Option<f64>, len: usize| -> RewardParts {
                let sim = rc.similarity.score(tokens, batch.target(b));
                let loss = match nat_ll {
                    Some(ll) => r_loss(ll, len, rc.empty_reward),
                    None => rc.empty_reward,
                };
                RewardParts {
                    sim,
                    loss,
                    total: interpolate_reward(sim, loss, alpha),
                }
            };

        match kind {
            ModelKind::Vanilla | ModelKind::Cmlm => {
                let contributing = match kind {
                    ModelKind::Cmlm => masked_positions(batch)?,
                    _ => batch.target_mask(),
                };
                let y_r = keep_reference_where(tape.value(reph).argmax_rows(), batch, &contributing);
                let nat = ce_loss_on_rephrased(tape, fwd.dec.logits, &y_r, &contributing)?;
                out.nat = nat.loss;
                out.stats.nat_loss = nat.value / tokens as f64;

                let forced: Vec<Vec<Option<usize>>> = (0..batch.size())
                    .map(|b| {
                        (0..batch.tgt_lens[b])
                            .map(|t| {
                                let i = b * t_max + t;
                                (!contributing[i]).then_some(batch.tgt[i])
                            })
                            .collect()
                    })
                    .collect();
                let draw = draw_reinforce(
                    batch.size(),
                    rc.k_baseline,
                    &mut self.rng,
                    |b, rng| {
                        let rows = &reph_lp[b * t_max * v..(b * t_max + batch.tgt_lens[b]) * v];
                        sample_positions(rows, v, Some(&forced[b]), rng)
                    },
                    |b, s| {
                        let (mut ll, mut n) = (0.0, 0);
                        for (t, &tok) in s.tokens.iter().enumerate() {
                            if contributing[b * t_max + t] {
                                ll += nat_lp[(b * t_max + t) * v + tok].f64();
                                n += 1;
                            }
                        }
                        reward_of(b, &s.tokens, Some(ll), n)
                    },
                );
                let mut sample_tokens = vec![0usize; batch.size() * t_max];
                let mut weights = vec![0.0; batch.size() * t_max];
                for (b, s) in draw.samples.iter().enumerate() {
                    for (t, &tok) in s.tokens.iter().enumerate() {
                        let i = b * t_max + t;
                        sample_tokens[i] = tok;
                        if contributing[i] {
                            weights[i] = draw.advantages[b];
                        }
                    }
                }
                out.rephraser = Some(reinforce_loss(tape, reph, &sample_tokens, &weights)?);
                fill_reward_stats(&mut out.stats, &draw);
            }
            ModelKind::Ctc => {
                let y_r = collapsed_rows(&tape.value(reph).argmax_rows(), &fwd.dec_lens, t_max);
                let refs: Vec<&[usize]> = y_r.iter().map(Vec::as_slice).collect();
                let nat = ctc_loss_on_rephrased(tape, fwd.dec.logits, &fwd.dec_lens, &refs, BLANK)?;
                out.nat = nat.loss;
                out.stats.nat_loss = nat.value / tokens as f64;
                out.stats.skipped += nat.skipped;

                let frames = &fwd.dec_lens;
                let draw = draw_reinforce(
                    batch.size(),
                    rc.k_baseline,
                    &mut self.rng,
                    |b, rng| {
                        sample_ctc(
                            &reph_lp[b * t_max * v..(b * t_max + frames[b]) * v],
                            v,
                            BLANK,
                            rng,
                        )
                    },
                    |b, s| {
                        let rows = &nat_lp[b * t_max * v..(b * t_max + frames[b]) * v];
                        let ll = if s.tokens.is_empty() {
                            None
                        } else {
                            ctc_log_likelihood(rows, v, &s.tokens, BLANK).map(Real::f64)
                        };
                        reward_of(b, &s.tokens, ll, s.tokens.len())
                    },
                );
                let samples: Vec<&[usize]> =
                    draw.samples.iter().map(|s| s.tokens.as_slice()).collect();
                out.rephraser = Some(reinforce_loss_ctc(
                    tape,
                    reph,
                    frames,
                    &samples,
                    &draw.advantages,
                    BLANK,
                )?);
                fill_reward_stats(&mut out.stats, &draw);
            }
        }

        if self.config.finetune_rephraser_ce {
            let r = self.pretrain_rephraser(tape, batch, &fwd, reph, &nat_argmax)?;
            out.stats.rephraser_loss = r.value / tokens as f64;
            out.rephraser = match (out.rephraser, r.loss) {
                (Some(a), Some(b)) => Some(tape.add(a, b)?),
                (a, b) => a.or(b),
            };
        }
        Ok(out)
    }

    /// The rephraser's argmax output `Y_r` for every sentence of `batch`,
    /// as the NAT model would be trained on it: CMLM observed positions
    /// hold their reference tokens, CTC outputs are collapsed.
    pub fn rephrased_targets(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch)?;
        let nat_argmax = tape.value(fwd.dec.logits).argmax_rows();
        let reph = self.rephraser_logits(&mut tape, batch, &fwd, &nat_argmax)?;
        let argmax = tape.value(reph).argmax_rows();
        let t_max = fwd.dec.max;
        Ok(match self.model.kind() {
            ModelKind::Ctc => collapsed_rows(&argmax, &fwd.dec_lens, t_max),
            kind => {
                let contributing = match kind {
                    ModelKind::Cmlm => masked_positions(batch)?,
                    _ => batch.target_mask(),
                };
                let y_r = keep_reference_where(argmax, batch, &contributing);
                (0..batch.size())
                    .map(|b| y_r[b * t_max..b * t_max + batch.tgt_lens[b]].to_vec())
                    .collect()
            }
        })
    }

    /// Backpropagates the scaled sum of `losses`, then updates `ids`.
    fn apply(
        &mut self,
        tape: &mut Tape<F>,
        parts: &[Option<Var>],
        stats: &StepStats,
        ids: &[ParamId],
    ) -> Result<()> {
        let present: Vec<Var> = parts.iter().flatten().copied().collect();
        let Some((&first, rest)) = present.split_first() else {
            self.model.params_mut().zero_grads();
            return Ok(());
        };
        let mut total = first;
        for &p in rest {
            total = tape.add(total, p)?;
        }
        let total = tape.scale(total, F::of(1.0 / stats.tokens.max(1) as f64));
        let value = tape.value(total).data[0].f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                step: self.step,
                detail: format!(
                    "nat {} length {} rephraser {} reward {}",
                    stats.nat_loss, stats.length_loss, stats.rephraser_loss, stats.reward
                ),
            });
        }
        tape.backward(total)?;
        let params = self.model.params_mut();
        params.accumulate(tape);
        params.fill_missing_grads();
        self.adam.step_subset(params, ids)?;
        params.zero_grads();
        Ok(())
    }

    fn all_ids(&self) -> Vec<ParamId> {
        self.model.params().ids().collect()
    }

    /// One pre-training update of NAT (and rephraser, if enabled).
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let mut tape = Tape::new();
        let l = self.pretrain_losses(&mut tape, batch)?;
        let ids = self.all_ids();
        self.apply(&mut tape, &[l.nat, l.length, l.rephraser], &l.stats, &ids)?;
        self.step += 1;
        Ok(l.stats)
    }

    /// One fine-tuning update. Without a rephraser this is a pre-training
    /// step; with `alternate`, even steps update only the NAT model and odd
    /// steps only the rephraser.
    pub fn finetune_step(&mut self, batch: &Batch) -> Result<StepStats> {
        if !self.config.use_rephraser {
            let s = self.pretrain_step(batch)?;
            self.finetune_step += 1;
            return Ok(s);
        }
        let alpha = self.config.reward.alpha(self.finetune_step);
        let mut tape = Tape::new();
        let l = self.finetune_losses(&mut tape, batch, alpha)?;
        let (parts, ids) = if self.config.alternate {
            if self.finetune_step.is_multiple_of(2) {
                ([l.nat, l.length, None], self.model.nat_params().to_vec())
            } else {
                (
                    [None, None, l.rephraser],
                    self.model.rephraser_params().to_vec(),
                )
            }
        } else {
            ([l.nat, l.length, l.rephraser], self.all_ids())
        };
        self.apply(&mut tape, &parts, &l.stats, &ids)?;
        self.step += 1;
        self.finetune_step += 1;
        Ok(l.stats)
    }
}

/// Observed (CMLM) and pad positions keep the reference token.
fn keep_reference_where(mut y_r: Vec<usize>, batch: &Batch, contributing: &[bool]) -> Vec<usize> {
    for (i, &c) in contributing.iter().enumerate() {
        if !c {
            y_r[i] = batch.tgt[i];
        }
    }
    y_r
}

fn fill_reward_stats(stats: &mut StepStats, draw: &crate::rewards::ReinforceDraw) {
    stats.reward = draw.mean_reward;
    stats.r_sim = draw.mean_sim;
    stats.r_loss = draw.mean_loss;
    stats.baseline = draw.mean_baseline;
}

/// Collapses the first `lens[b]` entries of every padded row.
fn collapsed_rows(padded: &[usize], lens: &[usize], max: usize) -> Vec<Vec<usize>> {
    lens.iter()
        .enumerate()
        .map(|(b, &l)| collapse(&padded[b * max..b * max + l], BLANK))
        .collect()
}
