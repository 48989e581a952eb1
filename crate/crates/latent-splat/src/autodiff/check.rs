//! Central finite-difference gradient checking.
//!
//! The checker evaluates a graph builder twice per probed coordinate and
//! never inspects how backward is implemented, so it stays an independent
//! reference for every op on the tape, including the custom rasterizer and
//! projection kernels.

use rand::Rng;

use super::{Tape, TensorError, Value};
use crate::tensor::Tensor;

/// Builds the value under test from leaf inputs on the given tape.
pub type GraphBuilder<'a> = &'a dyn Fn(&mut Tape, &[Value]) -> Result<Value, TensorError>;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f32,
    /// Relative tolerance against max(|fd|, |analytic|).
    pub rel_tol: f32,
    /// Absolute tolerance applied when the analytic gradient is tiny.
    pub abs_tol: f32,
    /// Magnitude below which a gradient counts as tiny.
    pub tiny: f32,
    /// Coordinates probed per input tensor.
    pub probes_per_input: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-2,
            abs_tol: 1e-4,
            tiny: 1e-2,
            probes_per_input: 8,
        }
    }
}

impl GradCheck {
    /// Check the analytic gradients of `build` at `inputs`.
    ///
    /// The output is contracted to a scalar with fixed random weights so
    /// arbitrary output shapes are covered. Returns a description of the
    /// first failing coordinate, if any.
    pub fn check(
        &self,
        inputs: &[Tensor],
        build: GraphBuilder,
        rng: &mut impl Rng,
    ) -> Result<(), String> {
        // Fixed contraction weights for the whole check.
        let probe_shape = {
            let mut tape = Tape::new();
            let leaves: Vec<Value> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &leaves).map_err(|e| format!("forward failed: {e}"))?;
            tape.value(out).shape().to_vec()
        };
        let weights = Tensor::rand_uniform(&probe_shape, -1.0, 1.0, rng);

        // Contract in f64: the forward pipeline is f32, but summing the
        // contraction in wider precision keeps the difference quotient from
        // drowning in accumulation roundoff.
        let eval = |inputs: &[Tensor]| -> Result<f64, String> {
            let mut tape = Tape::new();
            let leaves: Vec<Value> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &leaves).map_err(|e| format!("forward failed: {e}"))?;
            Ok(tape
                .value(out)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(&o, &w)| o as f64 * w as f64)
                .sum())
        };

        // Analytic pass.
        let mut tape = Tape::new();
        let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &leaves).map_err(|e| format!("forward failed: {e}"))?;
        if tape.value(out).shape() != probe_shape.as_slice() {
            return Err("builder output shape changed between calls".into());
        }
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).map_err(|e| e.to_string())?;
        let loss = tape.sum(prod).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;

        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(leaves[which])
                .ok_or_else(|| format!("input {which}: no gradient materialized"))?
                .to_vec();
            let n = input.numel();
            let probes = self.probes_per_input.min(n);
            for _ in 0..probes {
                let coord = rng.gen_range(0..n);
                let fd = {
                    let mut plus = input.to_vec();
                    let mut minus = plus.clone();
                    plus[coord] += self.step;
                    minus[coord] -= self.step;
                    let mut in_plus = inputs.to_vec();
                    let mut in_minus = inputs.to_vec();
                    in_plus[which] = Tensor::new(input.shape(), plus).unwrap();
                    in_minus[which] = Tensor::new(input.shape(), minus).unwrap();
                    ((eval(&in_plus)? - eval(&in_minus)?) / (2.0 * self.step as f64)) as f32
                };
                let an = analytic[coord];
                let diff = (fd - an).abs();
                let rel_ok = diff <= self.rel_tol * fd.abs().max(an.abs());
                let abs_ok = an.abs() < self.tiny && diff <= self.abs_tol;
                if !(rel_ok || abs_ok) {
                    return Err(format!(
                        "input {which} coord {coord}: analytic {an:.6e} vs finite-diff {fd:.6e} (diff {diff:.3e})"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn catches_a_wrong_gradient() {
        // exp whose backward is deliberately scaled: must be flagged.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = Tensor::rand_uniform(&[4], 0.2, 1.0, &mut rng);
        let build = |tape: &mut Tape, ins: &[Value]| -> Result<Value, TensorError> {
            let y = tape.exp(ins[0]);
            // corrupt the chain with a custom op whose backward lies
            let out = tape.value(y).clone();
            Ok(tape.custom_op(&[y], out, |ctx| {
                vec![Some(ctx.grad.map(|g| g * 1.5))]
            }))
        };
        let res = GradCheck::default().check(&[input], &build, &mut rng);
        assert!(res.is_err());
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Tensor::rand_uniform(&[6], 0.2, 1.0, &mut rng);
        let build = |tape: &mut Tape, ins: &[Value]| -> Result<Value, TensorError> {
            let y = tape.exp(ins[0]);
            let z = tape.mul(y, ins[0])?;
            Ok(z)
        };
        GradCheck::default()
            .check(&[input], &build, &mut rng)
            .unwrap();
    }
}
