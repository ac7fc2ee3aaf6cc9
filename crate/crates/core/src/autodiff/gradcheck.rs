//! Central-difference check of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    let value = graph.value(out);
    if value.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Numeric(
            "grad_check function returned a non-finite value".into(),
        ));
    }
    Ok(v)
}

/// Largest `|a - n| / max(1, |a|, |n|)` over every input coordinate, where `a`
/// is the reverse-mode gradient and `n` the central difference with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    let grads = graph.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*var, input.len());
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
