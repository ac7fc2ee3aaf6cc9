use serde::Serialize;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ParamMode};

pub const CAM_LAYER: &str = "last 3x3x3 convolution of stage 4 (rectified)";

/// Per-slot relevance on the cluster grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationMap {
    pub g: usize,
    pub l: usize,
    /// Row-major `(g, l)`, in `[0, 1]`.
    pub heat: Vec<f64>,
    pub target_layer: String,
    pub clip_id: String,
    pub predicted_class: usize,
    pub target_class: usize,
}

impl ActivationMap {
    pub fn at(&self, r: usize, s: usize) -> f64 {
        self.heat[r * self.l + s]
    }

    /// Row holding the hottest slot (first in row-major order on ties).
    pub fn argmax_row(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.heat.iter().enumerate() {
            if v > self.heat[best] {
                best = i;
            }
        }
        best / self.l
    }
}

/// Scale to `[0, 1]` by min and max. A constant map becomes all ones if
/// positive and stays zero otherwise.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else if hi > 0.0 {
        values.iter_mut().for_each(|v| *v /= hi);
    } else {
        values.fill(0.0);
    }
}

/// Grad-CAM from an activation `(g, l, t, d)` and the gradient of the
/// target score with respect to it.
pub fn cam_from_activation(activation: &[f64], grad: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [g, l, t, d] = dims;
    let positions = (g * l * t) as f64;
    let mut alpha = vec![0.0; d];
    for row in grad.chunks_exact(d) {
        alpha.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    alpha.iter_mut().for_each(|a| *a /= positions);
    let mut heat = vec![0.0; g * l];
    for (cell, h) in heat.iter_mut().enumerate() {
        for j in 0..t {
            let base = (cell * t + j) * d;
            let s: f64 = (0..d).map(|k| alpha[k] * activation[base + k]).sum();
            *h += s.max(0.0);
        }
        *h /= t as f64;
    }
    min_max_normalize(&mut heat);
    heat
}

pub fn grad_cam(
    model: &Model,
    input: &[f64],
    target_class: usize,
    clip_id: &str,
) -> Result<ActivationMap> {
    let cfg = &model.config;
    if target_class >= cfg.classes {
        return Err(Error::Config(format!(
            "class {target_class} out of range for {} classes",
            cfg.classes
        )));
    }
    let mut graph = Graph::new();
    let x = graph.param(Tensor::new(&cfg.input, input.to_vec())?);
    let fwd = model.forward(&mut graph, x, ParamMode::Frozen)?;
    let mut seed = vec![0.0; cfg.classes];
    seed[target_class] = 1.0;
    let grads = graph.backward_with(fwd.logits, Tensor::from_vec(seed))?;
    let act = graph.value(fwd.last_conv);
    let shape = act.shape();
    let dims = [shape[0], shape[1], shape[2], shape[3]];
    let grad = grads.get_or_zeros(fwd.last_conv, act.len());
    let heat = cam_from_activation(act.data(), &grad, dims);
    let probs = graph.value(fwd.probs).data();
    let predicted_class = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    Ok(ActivationMap {
        g: dims[0],
        l: dims[1],
        heat,
        target_layer: CAM_LAYER.to_string(),
        clip_id: clip_id.to_string(),
        predicted_class,
        target_class,
    })
}
