//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Step size for central differences; with f64 evaluation this balances
/// truncation against round-off for O(1) activations.
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// max over probes of |analytic − numeric| / max(|analytic|, 1e-8)
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Checks the tape gradient of `op` against central finite differences.
///
/// `op` builds a subgraph from the registered inputs and returns its output
/// node. Non-scalar outputs are reduced to a scalar through a fixed random
/// linear functional so that every output element influences the loss. Each
/// probe perturbs one randomly chosen input element by ±1e-5 and compares the
/// difference quotient with the analytic gradient.
pub fn grad_check<F>(inputs: &[Tensor<f64>], probes: usize, seed: u64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Discover the output shape once, then freeze the reduction weights.
    let (out_shape, out_len) = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.tensor(t)).collect();
        let out = op(&mut tape, &ids)?;
        (tape.shape_of(out).to_vec(), tape.value(out).len())
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let run = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.tensor(t)).collect();
        let out = op(&mut tape, &ids)?;
        let loss = if out_len == 1 {
            out
        } else {
            let w = tape.leaf(&out_shape, weights.clone())?;
            let prod = tape.mul(out, w)?;
            tape.sum_all(prod)?
        };
        let lv = tape.value(loss)[0];
        if want_grads {
            tape.backward(loss)?;
            let grads = ids
                .iter()
                .zip(xs)
                .map(|(&id, t)| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect();
            Ok((lv, Some(grads)))
        } else {
            Ok((lv, None))
        }
    };

    let (_, grads) = run(inputs, true)?;
    let grads = grads.expect("gradients requested");

    let eligible: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].numel() > 0).collect();
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let t = eligible[rng.gen_range(0..eligible.len())];
        let e = rng.gen_range(0..inputs[t].numel());
        let mut plus = inputs.to_vec();
        plus[t].data_mut()[e] += FD_STEP;
        let (fp, _) = run(&plus, false)?;
        let mut minus = inputs.to_vec();
        minus[t].data_mut()[e] -= FD_STEP;
        let (fm, _) = run(&minus, false)?;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = grads[t][e];
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, probes })
}
