use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::Tape;
use super::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
}

/// Owner of every learnable tensor. Tapes borrow copies of the values;
/// gradients are folded back with [`accumulate`](Self::accumulate).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter `{name}` registered twice"
        );
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients recorded on `tape` into the stored ones.
    pub fn accumulate(&mut self, tape: &Tape<F>) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            let acc = p.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
    }

    /// Makes sure every parameter carries a gradient buffer, zero-filled
    /// where no loss reached it this step.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![F::zero(); p.value.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Order-sensitive FNV-1a digest of the listed parameter values.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in ids {
            for v in &self.params[id.0].value.data {
                for byte in v.f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
