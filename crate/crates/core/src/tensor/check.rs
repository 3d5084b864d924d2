//! Finite-difference verification of the tape's reverse pass.

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::{Error, Result};

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must construct the same scalar graph every time it is called
/// (it runs once for the analytic pass and twice per input element for the
/// numeric one). Returns the worst relative disagreement
/// `|ad - fd| / (|ad| + |fd| + 1e-6)` over every element of every input.
pub fn gradient_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("gradient_check eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient_check target must be scalar, got {:?}",
            tape.value(loss).shape
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = ids.iter().map(|&id| tape.grad_tensor(id)).collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).values[0])
    };

    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for vi in 0..inputs[ti].values.len() {
            let orig = inputs[ti].values[vi];
            point[ti].values[vi] = orig + eps;
            let f_plus = eval(&point)?;
            point[ti].values[vi] = orig - eps;
            let f_minus = eval(&point)?;
            point[ti].values[vi] = orig;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let ad = grads[ti].values[vi];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
