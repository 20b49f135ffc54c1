use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::Real;
use super::AutogradError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps; 0 disables warm-up.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 500,
        }
    }
}

impl AdamConfig {
    /// Learning rate applied at update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![F::zero(); p.value.numel()])
                .collect()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = F::zero());
        }
        self.t = 0;
    }

    /// One bias-corrected Adam update of every parameter, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<(), AutogradError> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_subset(store, &ids)
    }

    /// [`step`](Self::step) restricted to `ids`; every other parameter keeps
    /// its value and moments. The step counter still advances once.
    pub fn step_subset(
        &mut self,
        store: &mut ParamStore<F>,
        ids: &[ParamId],
    ) -> Result<(), AutogradError> {
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(AutogradError::MissingGrad {
                name: store.name(id).to_string(),
            });
        }
        self.t += 1;
        let c = self.config;
        let lr = c.lr_at(self.t);
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2_sqrt = F::of(1.0 / libm::sqrt(bc2));
        let eps = F::of(c.eps);
        for &id in ids {
            let i = id.index();
            let grad = store.get(id).grad.clone().unwrap_or_default();
            let value = &mut store.value_mut(id).data;
            for (j, &g) in grad.iter().enumerate() {
                let m = b1 * self.m[i][j] + one_b1 * g;
                let v = b2 * self.v[i][j] + one_b2 * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                value[j] = value[j] - step_size * m / (v.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
