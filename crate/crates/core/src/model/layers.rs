//! Parameter layout and forward rules of the pre-norm Transformer blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::Result;

const NEG_LARGE: f64 = -1e9;

pub(crate) fn xavier<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<F> {
    let a = libm::sqrt(6.0 / (rows + cols) as f64);
    Tensor::new(
        alloc::vec![rows, cols],
        (0..rows * cols)
            .map(|_| F::of(rng.gen_range(-a..a)))
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub(crate) fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b, F::of(1e-5))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), xavier(rng, d_in, d_out)),
            b: bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub(crate) fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Multi-head attention with one projection matrix per head.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    heads: Vec<(Linear, Linear, Linear)>,
    out: Linear,
    head_dim: usize,
}

impl Attention {
    fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        let hd = d / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                (
                    Linear::new(store, rng, &format!("{name}.q{h}"), d, hd, false),
                    Linear::new(store, rng, &format!("{name}.k{h}"), d, hd, false),
                    Linear::new(store, rng, &format!("{name}.v{h}"), d, hd, false),
                )
            })
            .collect();
        Attention {
            heads,
            out: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            head_dim: hd,
        }
    }

    /// `queries` is `[B, T, d]`, `memory` `[B, S, d]`; `key_valid` marks the
    /// `B·S` memory positions that may be attended to.
    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
        memory: Var,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (b, t) = (tape.shape(queries)[0], tape.shape(queries)[1]);
        let s = tape.shape(memory)[1];
        let mask: Vec<bool> = (0..b)
            .flat_map(|bi| (0..t).flat_map(move |_| (0..s).map(move |si| (bi, si))))
            .map(|(bi, si)| !key_valid[bi * s + si])
            .collect();
        let scale = F::of(1.0 / libm::sqrt(self.head_dim as f64));
        let mut outs = Vec::with_capacity(self.heads.len());
        for (wq, wk, wv) in &self.heads {
            let q = wq.forward(tape, store, queries)?;
            let k = wk.forward(tape, store, memory)?;
            let v = wv.forward(tape, store, memory)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.masked_fill(scores, &mask, F::of(NEG_LARGE))?;
            let weights = tape.softmax(scores);
            outs.push(tape.matmul(weights, v)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 2)?
        };
        self.out.forward(tape, store, cat)
    }
}

/// Non-causal block: self-attention, optional cross-attention, feed-forward,
/// each behind a layer norm with a residual connection.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    self_norm: Norm,
    self_attn: Attention,
    cross: Option<(Norm, Attention)>,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

pub(crate) struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cross: bool,
}

impl Block {
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dims: &BlockDims,
    ) -> Self {
        let n = |part: &str| -> String { format!("{name}.{part}") };
        let (d, h) = (dims.d, dims.heads);
        Block {
            self_norm: Norm::new(store, &n("self_norm"), d),
            self_attn: Attention::new(store, rng, &n("self_attn"), d, h),
            cross: dims.cross.then(|| {
                (
                    Norm::new(store, &n("cross_norm"), d),
                    Attention::new(store, rng, &n("cross_attn"), d, h),
                )
            }),
            ffn_norm: Norm::new(store, &n("ffn_norm"), d),
            ffn_in: Linear::new(store, rng, &n("ffn_in"), d, dims.ffn, true),
            ffn_out: Linear::new(store, rng, &n("ffn_out"), dims.ffn, d, true),
        }
    }

    pub(crate) fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        self_valid: &[bool],
        memory: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let h = self.self_norm.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, self_valid)?;
        let mut x = tape.add(x, a)?;
        if let (Some((norm, attn)), Some((mem, mem_valid))) = (&self.cross, memory) {
            let h = norm.forward(tape, store, x)?;
            let a = attn.forward(tape, store, h, mem, mem_valid)?;
            x = tape.add(x, a)?;
        }
        let h = self.ffn_norm.forward(tape, store, x)?;
        let h = self.ffn_in.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.ffn_out.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Stack of blocks with learned positions and a final norm.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Norm,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        layers: usize,
        dims: &BlockDims,
        max_len: usize,
        positions: bool,
    ) -> Self {
        Stack {
            pos: positions.then(|| store.add(format!("{name}.pos"), xavier(rng, max_len, dims.d))),
            blocks: (0..layers)
                .map(|l| Block::new(store, rng, &format!("{name}.{l}"), dims))
                .collect(),
            norm: Norm::new(store, &format!("{name}.final_norm"), dims.d),
        }
    }

    /// Adds position embeddings to `x` (`[B, T, d]`).
    pub(crate) fn add_positions<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        match self.pos {
            None => Ok(x),
            Some(p) => {
                let t = tape.shape(x)[1];
                let table = tape.param(store, p);
                let idx: Vec<usize> = (0..t).collect();
                let pos = tape.embedding_lookup(table, &idx, &[t])?;
                Ok(tape.add(x, pos)?)
            }
        }
    }

    pub(crate) fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        valid: &[bool],
        memory: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let mut h = self.add_positions(tape, store, x)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, valid, memory)?;
        }
        self.norm.forward(tape, store, h)
    }
}
