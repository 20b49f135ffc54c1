//! Recording tape and the differentiable operation set.
//!
//! Every op evaluates eagerly and, when at least one input requires a
//! gradient, appends a node carrying what its backward rule needs. Nodes
//! are only ever appended, so recording order is a topological order and
//! [`Tape::backward`] walks it in reverse.
//!
//! Broadcasting is restricted to leading axes: in a binary elementwise op
//! one operand's shape must equal, or be a suffix of, the other's.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::AutogradError;

type Result<T> = core::result::Result<T, AutogradError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Shift {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Transpose {
        x: Var,
    },
    GatherLast {
        x: Var,
        indices: Vec<usize>,
    },
    Ctc {
        log_probs: Var,
        /// d nll_b / d log_probs, laid out like `log_probs`.
        jacobian: Vec<F>,
        frame_block: usize,
        flip_sign: bool,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op<F>,
}

/// Ordered record of a forward computation.
///
/// One tape per training step and per execution context; it is not `Sync`
/// by construction of the `&mut self` API.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        let id = Var(self.nodes.len());
        // A node whose inputs are all constant needs no backward rule.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op,
        });
        id
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls on one tape return the
    /// same node, so every parameter appears on the tape at most once.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `x` that is cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<F> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].value.shape
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `x`.
    pub fn grad(&self, x: Var) -> Option<&[F]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[F])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| {
            let id = node.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }

    fn rg(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product over the last two axes.
    ///
    /// Leading (batch) axes must match, or one operand must be a plain
    /// matrix that is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || AutogradError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        if a_batched && b_batched && ba != bb {
            return Err(mismatch());
        }
        let lead: Vec<usize> = if a_batched { ba.to_vec() } else { bb.to_vec() };
        let batch: usize = lead.iter().product();

        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            if !b_batched {
                // [batch·m, k] × [k, n] in one call.
                F::gemm(
                    batch * m,
                    k,
                    n,
                    av,
                    (k as isize, 1),
                    bv,
                    (n as isize, 1),
                    F::zero(),
                    &mut out,
                );
            } else {
                for i in 0..batch {
                    let a_off = if a_batched { i * m * k } else { 0 };
                    F::gemm(
                        m,
                        k,
                        n,
                        &av[a_off..a_off + m * k],
                        (k as isize, 1),
                        &bv[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                        F::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out),
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(AutogradError::Invalid {
                op: "transpose",
                reason: "needs at least two axes".to_string(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); xv.len()];
        for (blk_in, blk_out) in xv.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out), rg, Op::Transpose { x }))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = if sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(AutogradError::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let total: usize = shape.iter().product();
        let (la, lb) = (av.len(), bv.len());
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<F> = if la == lb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..total).map(|i| f(av[i % la], bv[i % lb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out), rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(
            t.shape.clone(),
            t.data.iter().map(|&v| v * factor).collect(),
        );
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v + c).collect());
        let rg = self.rg(x);
        self.push(out, rg, Op::Shift { x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(
            t.shape.clone(),
            t.data
                .iter()
                .map(|&v| if v > F::zero() { v } else { F::zero() })
                .collect(),
        );
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu { x })
    }

    /// Sets positions where `mask` is true to `value`; those positions pass
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: F) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(AutogradError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = Tensor::new(
            t.shape.clone(),
            t.data
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { value } else { v })
                .collect(),
        );
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let mut out = t.data.clone();
        let d = t.last_dim().max(1);
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape.clone(), out);
        let rg = self.rg(x);
        self.push(out, rg, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let mut out = t.data.clone();
        let d = t.last_dim().max(1);
        for row in out.chunks_exact_mut(d) {
            log_softmax_in_place(row);
        }
        let out = Tensor::new(t.shape.clone(), out);
        let rg = self.rg(x);
        self.push(out, rg, Op::LogSoftmax { x })
    }

    /// Layer normalisation over the last axis with learnable `gain` and
    /// `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(p) != [d] {
                return Err(AutogradError::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm(gain)"
                    } else {
                        "layer_norm(bias)"
                    },
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let n = F::of(d as f64);
        let rows = xv.numel() / d;
        let mut normalized = vec![F::zero(); xv.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / n;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normalized[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    // ---- indexing -------------------------------------------------------

    /// Gathers rows of `table`, viewed as `[rows, last_dim]`, producing
    /// `out_prefix ++ [last_dim]`.
    ///
    /// This is the embedding lookup; with the encoder states as the table
    /// it also expresses the uniform copy.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        indices: &[usize],
        out_prefix: &[usize],
    ) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let d = t.last_dim();
        let rows = if d == 0 { 0 } else { t.numel() / d };
        if out_prefix.iter().product::<usize>() != indices.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: out_prefix.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(AutogradError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let mut shape = out_prefix.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out),
            rg,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Picks one entry of every last-axis row: `out[r] = x[r, indices[r]]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = t.last_dim();
        let rows = t.numel() / d.max(1);
        if indices.len() != rows || t.rank() == 0 {
            return Err(AutogradError::ShapeMismatch {
                op: "gather_last",
                lhs: t.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= d {
                return Err(AutogradError::IndexOutOfRange {
                    op: "gather_last",
                    index: i,
                    size: d,
                });
            }
            out.push(t.data[r * d + i]);
        }
        let shape = t.shape[..t.rank() - 1].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out),
            rg,
            Op::GatherLast {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| AutogradError::Invalid {
            op: "concat",
            reason: "no inputs".to_string(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(AutogradError::Invalid {
                op: "concat",
                reason: "axis out of range".to_string(),
            });
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis]);
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let data = &self.nodes[v.0].value.data;
                out.extend_from_slice(&data[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out),
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
                outer,
                inner,
            },
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0]
            .value
            .data
            .iter()
            .fold(F::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data.iter().fold(F::zero(), |a, &b| a + b) / F::of(t.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out: Vec<F> = t
            .rows()
            .map(|r| r.iter().fold(F::zero(), |a, &b| a + b))
            .collect();
        let shape = t.shape[..t.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), rg, Op::SumLast { x })
    }

    // ---- sequence losses ------------------------------------------------

    /// Negative CTC log-likelihood of each target under per-frame
    /// log-probabilities, marginalised over all alignments by the forward
    /// recursion in log space.
    ///
    /// `log_probs` is `[B, T, C]` (or `[T, C]`, treated as `B = 1`); frame
    /// counts beyond `input_lens[b]` are ignored. Returns `[B]` (a scalar
    /// for 2-D input). Targets that no alignment can produce are rejected.
    pub fn ctc_nll(
        &mut self,
        log_probs: Var,
        input_lens: &[usize],
        targets: &[&[usize]],
        blank: usize,
    ) -> Result<Var> {
        self.ctc_nll_impl(log_probs, input_lens, targets, blank, false)
    }

    /// [`ctc_nll`](Self::ctc_nll) with its backward rule negated. Exists so
    /// gradient-check suites can demonstrate that they catch a broken rule.
    #[doc(hidden)]
    pub fn ctc_nll_with_flipped_backward(
        &mut self,
        log_probs: Var,
        input_lens: &[usize],
        targets: &[&[usize]],
        blank: usize,
    ) -> Result<Var> {
        self.ctc_nll_impl(log_probs, input_lens, targets, blank, true)
    }

    fn ctc_nll_impl(
        &mut self,
        log_probs: Var,
        input_lens: &[usize],
        targets: &[&[usize]],
        blank: usize,
        flip_sign: bool,
    ) -> Result<Var> {
        let t = &self.nodes[log_probs.0].value;
        let (batch, frames, classes, scalar_out) = match t.shape.as_slice() {
            &[b, f, c] => (b, f, c, false),
            &[f, c] => (1, f, c, true),
            other => {
                return Err(AutogradError::Invalid {
                    op: "ctc_nll",
                    reason: alloc::format!("expected [B, T, C] or [T, C], got {other:?}"),
                })
            }
        };
        if input_lens.len() != batch || targets.len() != batch {
            return Err(AutogradError::ShapeMismatch {
                op: "ctc_nll",
                lhs: t.shape.clone(),
                rhs: vec![input_lens.len(), targets.len()],
            });
        }
        if blank >= classes {
            return Err(AutogradError::IndexOutOfRange {
                op: "ctc_nll(blank)",
                index: blank,
                size: classes,
            });
        }
        let block = frames * classes;
        let mut nll = vec![F::zero(); batch];
        let mut jacobian = vec![F::zero(); t.numel()];
        for b in 0..batch {
            let len = input_lens[b];
            let target = targets[b];
            if len == 0 || len > frames {
                return Err(AutogradError::Invalid {
                    op: "ctc_nll",
                    reason: alloc::format!("input length {len} outside 1..={frames}"),
                });
            }
            if let Some(&bad) = target.iter().find(|&&y| y >= classes || y == blank) {
                return Err(AutogradError::IndexOutOfRange {
                    op: "ctc_nll(target)",
                    index: bad,
                    size: classes,
                });
            }
            if !super::ctc::ctc_feasible(target, len) {
                return Err(AutogradError::CtcInfeasible {
                    target_len: target.len(),
                    input_len: len,
                });
            }
            let lp = &t.data[b * block..b * block + len * classes];
            let (value, grad) = super::ctc::ctc_forward_backward(lp, classes, target, blank);
            nll[b] = value;
            jacobian[b * block..b * block + len * classes].copy_from_slice(&grad);
        }
        let shape = if scalar_out { Vec::new() } else { vec![batch] };
        let rg = self.rg(log_probs);
        Ok(self.push(
            Tensor::new(shape, nll),
            rg,
            Op::Ctc {
                log_probs,
                jacobian,
                frame_block: block,
                flip_sign,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients land on every
    /// node that requires one and are summed over all uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(AutogradError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let (lower, upper) = self.grads.split_at_mut(i);
            let nodes = &self.nodes;
            backprop_node(nodes, i, &g, lower);
            upper[0] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn backprop_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        } => {
            let av = &nodes[a.0].value.data;
            let bv = &nodes[b.0].value.data;
            if let Some(ga) = slot(nodes, grads, a) {
                // dA = dC · Bᵀ
                if !b_batched {
                    F::gemm(
                        batch * m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        bv,
                        (1, n as isize),
                        F::one(),
                        ga,
                    );
                } else {
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        F::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bv[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            F::one(),
                            &mut ga[a_off..a_off + m * k],
                        );
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                // dB = Aᵀ · dC
                if !b_batched {
                    F::gemm(
                        k,
                        batch * m,
                        n,
                        av,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        F::one(),
                        gb,
                    );
                } else {
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        F::gemm(
                            k,
                            m,
                            n,
                            &av[a_off..a_off + m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            F::one(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }
        }
        &Op::Binary { kind, a, b } => {
            let la = nodes[a.0].value.numel();
            let lb = nodes[b.0].value.numel();
            if let Some(ga) = slot(nodes, grads, a) {
                match kind {
                    Binary::Add | Binary::Sub => {
                        for (j, &gv) in g.iter().enumerate() {
                            ga[j % la] = ga[j % la] + gv;
                        }
                    }
                    Binary::Mul => {
                        let bv = &nodes[b.0].value.data;
                        for (j, &gv) in g.iter().enumerate() {
                            ga[j % la] = ga[j % la] + gv * bv[j % lb];
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                match kind {
                    Binary::Add => {
                        for (j, &gv) in g.iter().enumerate() {
                            gb[j % lb] = gb[j % lb] + gv;
                        }
                    }
                    Binary::Sub => {
                        for (j, &gv) in g.iter().enumerate() {
                            gb[j % lb] = gb[j % lb] - gv;
                        }
                    }
                    Binary::Mul => {
                        let av = &nodes[a.0].value.data;
                        for (j, &gv) in g.iter().enumerate() {
                            gb[j % lb] = gb[j % lb] + gv * av[j % la];
                        }
                    }
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv * factor;
                }
            }
        }
        &Op::Shift { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o = *o + gv;
                }
            }
        }
        &Op::Relu { x } => {
            let xv = &nodes[x.0].value.data;
            if let Some(gx) = slot(nodes, grads, x) {
                for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > F::zero() {
                        *o = *o + gv;
                    }
                }
            }
        }
        &Op::Softmax { x } => {
            let y = &node.value;
            let d = y.last_dim().max(1);
            if let Some(gx) = slot(nodes, grads, x) {
                for ((yr, gr), or) in y
                    .data
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..d {
                        or[j] = or[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { x } => {
            let y = &node.value;
            let d = y.last_dim().max(1);
            if let Some(gx) = slot(nodes, grads, x) {
                for ((yr, gr), or) in y
                    .data
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let total = gr.iter().fold(F::zero(), |s, &v| s + v);
                    for j in 0..d {
                        or[j] = or[j] + gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = node.value.last_dim();
            let n = F::of(d as f64);
            let gv = &nodes[gain.0].value.data;
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for gr in g.chunks_exact(d) {
                    for j in 0..d {
                        gb[j] = gb[j] + gr[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dh = vec![F::zero(); d];
                for (r, ((gr, hr), or)) in g
                    .chunks_exact(d)
                    .zip(normalized.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                        sum_dh = sum_dh + dh[j];
                        sum_dh_h = sum_dh_h + dh[j] * hr[j];
                    }
                    let c = inv_std[r] / n;
                    for j in 0..d {
                        or[j] = or[j] + c * (n * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Gather { table, indices } => {
            let d = nodes[table.0].value.last_dim();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] = gt[idx * d + j] + g[r * d + j];
                    }
                }
            }
        }
        Op::GatherLast { x, indices } => {
            let d = nodes[x.0].value.last_dim();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &idx) in indices.iter().enumerate() {
                    gx[r * d + idx] = gx[r * d + idx] + g[r];
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
        }
        &Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let s = g[0] / F::of(gx.len().max(1) as f64);
                for o in gx.iter_mut() {
                    *o = *o + s;
                }
            }
        }
        &Op::SumLast { x } => {
            let d = nodes[x.0].value.last_dim().max(1);
            if let Some(gx) = slot(nodes, grads, x) {
                for (r, row) in gx.chunks_exact_mut(d).enumerate() {
                    for o in row.iter_mut() {
                        *o = *o + g[r];
                    }
                }
            }
        }
        Op::Concat {
            inputs,
            widths,
            outer,
            inner,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&v, &w) in inputs.iter().zip(widths) {
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..*outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                        let dst = &mut gv[o * w * inner..(o + 1) * w * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o = *o + gv;
                    }
                }
            }
        }
        &Op::Transpose { x } => {
            let s = &node.value.shape;
            // output is [.., c, r]; input is [.., r, c]
            let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
            if let Some(gx) = slot(nodes, grads, x) {
                for (gblk, oblk) in g.chunks_exact(r * c).zip(gx.chunks_exact_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            oblk[i * c + j] = oblk[i * c + j] + gblk[j * r + i];
                        }
                    }
                }
            }
        }
        Op::Ctc {
            log_probs,
            jacobian,
            frame_block,
            flip_sign,
        } => {
            if let Some(gx) = slot(nodes, grads, *log_probs) {
                for (b, &gv) in g.iter().enumerate() {
                    let gv = if *flip_sign { -gv } else { gv };
                    let range = b * frame_block..(b + 1) * frame_block;
                    for (o, &jv) in gx[range.clone()].iter_mut().zip(&jacobian[range]) {
                        *o = *o + gv * jv;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row
        .iter()
        .fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row
        .iter()
        .fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let lse = max + row.iter().fold(F::zero(), |s, &v| s + (v - max).exp()).ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}
