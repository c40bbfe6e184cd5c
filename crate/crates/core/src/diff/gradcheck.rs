//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst relative disagreement between backward and finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the magnitude, so entries whose true
/// gradient is ~0 are compared absolutely against `floor`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare the gradient of `Σ weights ⊙ build(inputs)` with central
/// differences of step `h` on every input entry. `build` must be a pure
/// function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor], weights_seed: u64, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let weights = |len: usize| -> Vec<f64> {
        // deterministic, non-degenerate projection weights
        (0..len)
            .map(|i| ((i as f64 + 1.0) * 0.7548776662 + weights_seed as f64 * 0.5698402910).fract() - 0.5)
            .collect()
    };
    let eval = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let out = build(&mut g, &vars)?;
        let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights(g.value(out).numel()))?);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut up = inputs.to_vec();
            up[ti].data_mut()[j] += h;
            let mut dn = inputs.to_vec();
            dn[ti].data_mut()[j] -= h;
            let fd = (eval(&up, false)?.0 - eval(&dn, false)?.0) / (2.0 * h);
            worst = worst.max(rel_error(analytic[ti][j], fd, 1e-3));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
