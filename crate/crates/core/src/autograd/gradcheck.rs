use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutogradError;

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences, in 64-bit.
///
/// `graph` receives one leaf per entry of `inputs` and must return a scalar.
/// The result is the largest `|analytic − numeric| / max(1, |analytic|)`
/// over every input coordinate.
pub fn finite_diff_check<G>(
    graph: G,
    inputs: &[Tensor<f64>],
    epsilon: f64,
) -> Result<f64, AutogradError>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(AutogradError::Invalid {
            op: "finite_diff_check",
            reason: alloc::format!("epsilon {epsilon} outside [1e-7, 1e-3]"),
        });
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutogradError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = graph(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = graph(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data[j];
            probe[i].data[j] = orig + epsilon;
            let up = eval(&probe)?;
            probe[i].data[j] = orig - epsilon;
            let down = eval(&probe)?;
            probe[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i][j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(AutogradError::NonFinite { input: i, coord: j });
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64, AutogradError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(AutogradError::NonScalarLoss {
            shape: t.shape.clone(),
        });
    }
    if !t.data[0].is_finite() {
        return Err(AutogradError::NonFinite {
            input: usize::MAX,
            coord: 0,
        });
    }
    Ok(t.data[0])
}
