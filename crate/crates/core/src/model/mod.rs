//! Encoder, NAT decoder, length predictor and rephraser.
//!
//! All stacks are non-causal pre-norm Transformers sharing one embedding
//! table, which is also the output projection. The rephraser reads that
//! table and the decoder states as constants, so no rephraser loss reaches
//! a NAT weight and the two parameter sets stay disjoint.

mod config;
mod layers;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::data::length_mask;
use crate::{Error, Result};

pub use config::{ModelConfig, ModelKind, RephraserVariant};
use layers::{xavier, BlockDims, Linear, Stack};

/// Name prefix of every rephraser parameter.
pub const REPHRASER_PREFIX: &str = "reph.";

/// Encoder output for a padded batch.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    /// `[B, S, d]`.
    pub states: Var,
    pub lens: Vec<usize>,
    pub max: usize,
}

impl EncoderOut {
    pub fn valid(&self) -> Vec<bool> {
        length_mask(&self.lens, self.max)
    }
}

/// What the NAT decoder reads.
#[derive(Clone, Copy, Debug)]
pub enum DecoderInput<'a> {
    /// Encoder states copied to `lens[b]` positions.
    UniformCopy { lens: &'a [usize] },
    /// Token embeddings (CMLM: observed tokens and mask symbols), padded
    /// to `[B, T]`.
    Tokens {
        tokens: &'a [usize],
        lens: &'a [usize],
    },
}

#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Final-norm hidden states, `[B, T, d]`.
    pub states: Var,
    pub lens: Vec<usize>,
    pub max: usize,
}

impl DecoderOut {
    pub fn valid(&self) -> Vec<bool> {
        length_mask(&self.lens, self.max)
    }
}

/// Source index copied to decoder position `t`: `⌊t · T_src / T_dec⌋`.
pub fn uniform_copy_indices(t_src: usize, t_dec: usize) -> Vec<usize> {
    (0..t_dec).map(|t| t * t_src / t_dec).collect()
}

#[derive(Clone, Debug)]
pub struct NatModel<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    embed: ParamId,
    encoder: Stack,
    decoder: Stack,
    rephraser: Stack,
    length_head: Linear,
    nat_ids: Vec<ParamId>,
    rephraser_ids: Vec<ParamId>,
}

impl<F: Real> NatModel<F> {
    /// Builds a freshly initialised model; the same seed gives the same
    /// weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let embed = params.add("embed", xavier(&mut rng, c.vocab_size, c.d_model));
        let dims = |cross| BlockDims {
            d: c.d_model,
            heads: c.n_heads,
            ffn: c.ffn_dim,
            cross,
        };
        let pos = c.position_embeddings;
        let encoder = Stack::new(
            &mut params,
            &mut rng,
            "enc",
            c.n_enc_layers,
            &dims(false),
            c.max_len,
            pos,
        );
        let decoder = Stack::new(
            &mut params,
            &mut rng,
            "dec",
            c.n_dec_layers,
            &dims(true),
            c.max_len,
            pos,
        );
        let length_head = Linear::new(
            &mut params,
            &mut rng,
            "length",
            c.d_model,
            c.length_classes(),
            true,
        );
        let rephraser = Stack::new(
            &mut params,
            &mut rng,
            "reph",
            c.rephraser_layers,
            &dims(true),
            c.max_len,
            pos,
        );
        let (rephraser_ids, nat_ids) = params
            .ids()
            .partition(|&id| params.name(id).starts_with(REPHRASER_PREFIX));
        Ok(NatModel {
            config,
            params,
            embed,
            encoder,
            decoder,
            rephraser,
            length_head,
            nat_ids,
            rephraser_ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Encoder, decoder, length-predictor and embedding parameters.
    pub fn nat_params(&self) -> &[ParamId] {
        &self.nat_ids
    }

    pub fn rephraser_params(&self) -> &[ParamId] {
        &self.rephraser_ids
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model_kind
    }

    /// Decoder length used for a source of `src_len` tokens and (for
    /// vanilla/CMLM) a target of `tgt_len` tokens.
    pub fn decoder_length(&self, src_len: usize, tgt_len: usize) -> usize {
        match self.config.model_kind {
            ModelKind::Ctc => self.config.ctc_upsample * src_len,
            _ => tgt_len,
        }
    }

    fn check_tokens(&self, tokens: &[usize], lens: &[usize], what: &'static str) -> Result<usize> {
        let b = lens.len();
        if b == 0 || !tokens.len().is_multiple_of(b) {
            return Err(Error::Config(format!(
                "{what}: {} padded tokens do not split into {b} rows",
                tokens.len()
            )));
        }
        let max = tokens.len() / b;
        for (i, &l) in lens.iter().enumerate() {
            if l == 0 {
                return Err(Error::EmptySentence { index: i });
            }
            if l > max || l > self.config.max_len {
                return Err(Error::TooLong {
                    index: i,
                    len: l,
                    max: max.min(self.config.max_len),
                });
            }
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(max)
    }

    fn embed_tokens(
        &self,
        tape: &mut Tape<F>,
        table: Var,
        tokens: &[usize],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        Ok(tape.embedding_lookup(table, tokens, &[b, t])?)
    }

    /// Detached copy of the shared embedding table for rephraser use.
    fn frozen_embed(&self, tape: &mut Tape<F>) -> Var {
        let e = tape.param(&self.params, self.embed);
        tape.detach(e)
    }

    /// Logits `states · Eᵀ` against the given embedding table.
    fn project(&self, tape: &mut Tape<F>, states: Var, table: Var) -> Result<Var> {
        let et = tape.transpose(table)?;
        Ok(tape.matmul(states, et)?)
    }

    /// Encodes a padded `[B, S]` source batch.
    pub fn encode(&self, tape: &mut Tape<F>, src: &[usize], lens: &[usize]) -> Result<EncoderOut> {
        let max = self.check_tokens(src, lens, "encode")?;
        let e = tape.param(&self.params, self.embed);
        let x = self.embed_tokens(tape, e, src, lens.len(), max)?;
        let valid = length_mask(lens, max);
        let states = self.encoder.forward(tape, &self.params, x, &valid, None)?;
        Ok(EncoderOut {
            states,
            lens: lens.to_vec(),
            max,
        })
    }

    /// Runs the NAT decoder without causal masking.
    pub fn decode_nat(
        &self,
        tape: &mut Tape<F>,
        enc: &EncoderOut,
        input: DecoderInput<'_>,
    ) -> Result<DecoderOut> {
        let b = enc.lens.len();
        let (x, lens, max) = match input {
            DecoderInput::UniformCopy { lens } => {
                if lens.len() != b {
                    return Err(Error::LengthMismatch {
                        expected: b,
                        got: lens.len(),
                    });
                }
                let max = lens.iter().copied().max().unwrap_or(0);
                if max > self.config.max_len {
                    return Err(Error::TooLong {
                        index: lens.iter().position(|&l| l == max).unwrap_or(0),
                        len: max,
                        max: self.config.max_len,
                    });
                }
                if let Some(i) = lens.iter().position(|&l| l == 0) {
                    return Err(Error::EmptySentence { index: i });
                }
                let mut rows = Vec::with_capacity(b * max);
                for (bi, &l) in lens.iter().enumerate() {
                    let copy = uniform_copy_indices(enc.lens[bi], l);
                    rows.extend(copy.iter().map(|&s| bi * enc.max + s));
                    rows.extend(std::iter::repeat_n(bi * enc.max, max - l));
                }
                let x = tape.embedding_lookup(enc.states, &rows, &[b, max])?;
                (x, lens.to_vec(), max)
            }
            DecoderInput::Tokens { tokens, lens } => {
                if lens.len() != b {
                    return Err(Error::LengthMismatch {
                        expected: b,
                        got: lens.len(),
                    });
                }
                let max = self.check_tokens(tokens, lens, "decode_nat")?;
                let e = tape.param(&self.params, self.embed);
                let x = self.embed_tokens(tape, e, tokens, b, max)?;
                (x, lens.to_vec(), max)
            }
        };
        let valid = length_mask(&lens, max);
        let src_valid = enc.valid();
        let states = self.decoder.forward(
            tape,
            &self.params,
            x,
            &valid,
            Some((enc.states, &src_valid)),
        )?;
        let e = tape.param(&self.params, self.embed);
        let logits = self.project(tape, states, e)?;
        Ok(DecoderOut {
            logits,
            states,
            lens,
            max,
        })
    }

    /// Length-offset logits `[B, 1, 2r+1]` from mean-pooled encoder states.
    pub fn length_logits(&self, tape: &mut Tape<F>, enc: &EncoderOut) -> Result<Var> {
        let b = enc.lens.len();
        let mut pool = vec![F::zero(); b * enc.max];
        for (bi, &l) in enc.lens.iter().enumerate() {
            let w = F::of(1.0 / l as f64);
            pool[bi * enc.max..bi * enc.max + l]
                .iter_mut()
                .for_each(|p| *p = w);
        }
        let pool = tape.constant(Tensor::new(vec![b, 1, enc.max], pool));
        let pooled = tape.matmul(pool, enc.states)?;
        self.length_head.forward(tape, &self.params, pooled)
    }

    /// Training class of a target length, clamped into the offset range.
    pub fn length_class(&self, src_len: usize, tgt_len: usize) -> usize {
        let r = self.config.length_offset_range as i64;
        let off = (tgt_len as i64 - src_len as i64).clamp(-r, r);
        (off + r) as usize
    }

    pub fn length_from_class(&self, src_len: usize, class: usize) -> usize {
        let off = class as i64 - self.config.length_offset_range as i64;
        (src_len as i64 + off).clamp(1, self.config.max_len as i64) as usize
    }

    /// Up to `k` distinct predicted lengths, most likely first (ties to the
    /// lower class index).
    pub fn length_candidates(&self, logits_row: &[F], src_len: usize, k: usize) -> Vec<usize> {
        let mut classes: Vec<usize> = (0..logits_row.len()).collect();
        classes.sort_by(|&a, &b| {
            logits_row[b]
                .partial_cmp(&logits_row[a])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        let mut out = Vec::with_capacity(k);
        for c in classes {
            let len = self.length_from_class(src_len, c);
            if !out.contains(&len) {
                out.push(len);
                if out.len() == k {
                    break;
                }
            }
        }
        out
    }

    /// Rephraser logits `[B, T, V]` for vanilla/CMLM. The base variant reads
    /// the reference and attends to the (detached) decoder states; the
    /// swap variant reads `nat_tokens` and attends to the reference.
    pub fn rephrase(
        &self,
        tape: &mut Tape<F>,
        reference: &[usize],
        lens: &[usize],
        dec: &DecoderOut,
        nat_tokens: &[usize],
    ) -> Result<Var> {
        let max = self.check_tokens(reference, lens, "rephrase")?;
        if lens != dec.lens.as_slice() || max != dec.max {
            return Err(Error::LengthMismatch {
                expected: dec.max,
                got: max,
            });
        }
        let b = lens.len();
        let e = self.frozen_embed(tape);
        let valid = length_mask(lens, max);
        let states = match self.config.rephraser_variant {
            RephraserVariant::Base => {
                let x = self.embed_tokens(tape, e, reference, b, max)?;
                let memory = tape.detach(dec.states);
                self.rephraser
                    .forward(tape, &self.params, x, &valid, Some((memory, &valid)))?
            }
            RephraserVariant::Swap => {
                if nat_tokens.len() != reference.len() {
                    return Err(Error::LengthMismatch {
                        expected: reference.len(),
                        got: nat_tokens.len(),
                    });
                }
                let x = self.embed_tokens(tape, e, nat_tokens, b, max)?;
                let m = self.embed_tokens(tape, e, reference, b, max)?;
                let memory = self.rephraser.add_positions(tape, &self.params, m)?;
                self.rephraser
                    .forward(tape, &self.params, x, &valid, Some((memory, &valid)))?
            }
        };
        self.project(tape, states, e)
    }

    /// CTC rephraser logits `[B, T_dec, V]`: reads the NAT alignment argmax
    /// (blanks included) and attends to the reference embeddings.
    pub fn rephrase_ctc(
        &self,
        tape: &mut Tape<F>,
        alignment: &[usize],
        frame_lens: &[usize],
        reference: &[usize],
        ref_lens: &[usize],
    ) -> Result<Var> {
        let frames = self.check_tokens(alignment, frame_lens, "rephrase_ctc")?;
        let ref_max = self.check_tokens(reference, ref_lens, "rephrase_ctc")?;
        if frame_lens.len() != ref_lens.len() {
            return Err(Error::LengthMismatch {
                expected: frame_lens.len(),
                got: ref_lens.len(),
            });
        }
        let b = frame_lens.len();
        let e = self.frozen_embed(tape);
        let x = self.embed_tokens(tape, e, alignment, b, frames)?;
        let m = self.embed_tokens(tape, e, reference, b, ref_max)?;
        let memory = self.rephraser.add_positions(tape, &self.params, m)?;
        let valid = length_mask(frame_lens, frames);
        let ref_valid = length_mask(ref_lens, ref_max);
        let states =
            self.rephraser
                .forward(tape, &self.params, x, &valid, Some((memory, &ref_valid)))?;
        self.project(tape, states, e)
    }
}
