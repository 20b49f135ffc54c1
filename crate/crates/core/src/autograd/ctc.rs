//! Log-space CTC forward–backward over one sequence.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Real;

/// Whether `target` can be emitted in `frames` frames: every symbol needs a
/// frame and every adjacent repeat needs a separating blank.
pub fn ctc_feasible(target: &[usize], frames: usize) -> bool {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats <= frames
}

pub(crate) fn log_add<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

struct Lattice<'a, F> {
    log_probs: &'a [F],
    classes: usize,
    target: &'a [usize],
    blank: usize,
    frames: usize,
    states: usize,
}

impl<F: Real> Lattice<'_, F> {
    fn label(&self, s: usize) -> usize {
        if s.is_multiple_of(2) {
            self.blank
        } else {
            self.target[s / 2]
        }
    }

    // Skipping from s-2 to s is allowed onto a symbol that differs from the
    // previous symbol.
    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && s % 2 == 1 && self.label(s) != self.label(s - 2)
    }

    fn lp(&self, t: usize, s: usize) -> F {
        self.log_probs[t * self.classes + self.label(s)]
    }

    /// Forward variables and the log partition.
    fn alpha(&self) -> (Vec<F>, F) {
        let (frames, states) = (self.frames, self.states);
        let ninf = F::neg_infinity();
        let mut alpha = vec![ninf; frames * states];
        alpha[0] = self.lp(0, 0);
        if states > 1 {
            alpha[1] = self.lp(0, 1);
        }
        for t in 1..frames {
            for s in 0..states {
                let prev = &alpha[(t - 1) * states..t * states];
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if self.can_skip(s) {
                    acc = log_add(acc, prev[s - 2]);
                }
                alpha[t * states + s] = if acc == ninf {
                    ninf
                } else {
                    acc + self.lp(t, s)
                };
            }
        }
        let last = (frames - 1) * states;
        let mut log_z = alpha[last + states - 1];
        if states > 1 {
            log_z = log_add(log_z, alpha[last + states - 2]);
        }
        (alpha, log_z)
    }
}

fn lattice<'a, F: Real>(
    log_probs: &'a [F],
    classes: usize,
    target: &'a [usize],
    blank: usize,
) -> Lattice<'a, F> {
    Lattice {
        log_probs,
        classes,
        target,
        blank,
        frames: log_probs.len() / classes,
        states: 2 * target.len() + 1,
    }
}

/// `log Σ_A Π_t p_t(A_t)` over alignments of `target`, or `None` when the
/// target does not fit in the available frames.
pub fn ctc_log_likelihood<F: Real>(
    log_probs: &[F],
    classes: usize,
    target: &[usize],
    blank: usize,
) -> Option<F> {
    let frames = log_probs.len() / classes;
    if frames == 0 || !ctc_feasible(target, frames) {
        return None;
    }
    Some(lattice(log_probs, classes, target, blank).alpha().1)
}

/// Returns `(−log Σ_A Π_t p_t(A_t), ∂/∂ log_probs)` for `log_probs` laid
/// out as `[frames, classes]`. The caller guarantees feasibility.
pub(crate) fn ctc_forward_backward<F: Real>(
    log_probs: &[F],
    classes: usize,
    target: &[usize],
    blank: usize,
) -> (F, Vec<F>) {
    let lat = lattice(log_probs, classes, target, blank);
    let (frames, states) = (lat.frames, lat.states);
    let label = |s: usize| lat.label(s);
    let can_skip = |s: usize| lat.can_skip(s);
    let lp = |t: usize, s: usize| lat.lp(t, s);
    let ninf = F::neg_infinity();
    let (alpha, log_z) = lat.alpha();
    let last = (frames - 1) * states;

    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = F::zero();
    if states > 1 {
        beta[last + states - 2] = F::zero();
    }
    for t in (0..frames.saturating_sub(1)).rev() {
        for s in 0..states {
            let next = (t + 1) * states;
            let mut acc = beta[next + s] + lp(t + 1, s);
            if s + 1 < states {
                acc = log_add(acc, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut grad = vec![F::zero(); log_probs.len()];
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s];
            if occ == ninf {
                continue;
            }
            let k = label(s);
            grad[t * classes + k] = grad[t * classes + k] - (occ - log_z).exp();
        }
    }
    (-log_z, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasibility_counts_repeats() {
        assert!(ctc_feasible(&[1, 2], 2));
        assert!(!ctc_feasible(&[1, 1], 2));
        assert!(ctc_feasible(&[1, 1], 3));
        assert!(ctc_feasible(&[], 1));
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let lp = [(0.3f64).ln(), (0.7f64).ln(), (0.6f64).ln(), (0.4f64).ln()];
        let (nll, _) = ctc_forward_backward(&lp, 2, &[], 0);
        assert!((nll - -(0.3f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn occupancies_sum_to_one_per_frame() {
        let lp: Vec<f64> = [0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.4, 0.4, 0.2, 0.3, 0.3, 0.4]
            .iter()
            .map(|p: &f64| p.ln())
            .collect();
        let (_, g) = ctc_forward_backward(&lp, 3, &[1, 2], 0);
        for row in g.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s + 1.0).abs() < 1e-12, "{s}");
        }
    }
}
