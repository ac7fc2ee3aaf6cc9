use rand::Rng;
use serde::Serialize;

use super::attention::{spatial_attention, AttentionVars};
use super::config::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::PadSpec;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Whether forward registers parameters as gradient targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Parameter nodes, in the order of [`Model::params`].
    pub params: Vec<Var>,
    /// Rectified output of the last 3x3x3 convolution.
    pub last_conv: Var,
    pub attention: Vec<AttentionVars>,
    pub trace: Vec<LayerRow>,
}

/// One line of the architecture report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub output: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

fn conv_shape(k: [usize; 3], cin: usize, cout: usize) -> Vec<usize> {
    vec![k[0], k[1], k[2], cin, cout]
}

/// Names and shapes of every parameter, in forward order.
pub fn param_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let c = cfg.input[3];
    let n = cfg.time_kernel;
    let mut out = vec![
        (
            "stem.w".to_string(),
            conv_shape([1, 1, cfg.stem_kernel_t], c, cfg.widths[0]),
        ),
        ("stem.b".to_string(), vec![cfg.widths[0]]),
    ];
    let mut cin = cfg.widths[0];
    for (s, &blocks) in cfg.blocks_per_stage()?.iter().enumerate() {
        let cout = cfg.widths[s];
        for b in 0..blocks {
            let p = format!("stage{}.block{}", s + 1, b + 1);
            out.push((format!("{p}.conv3.w"), conv_shape([3, 3, 3], cin, cout)));
            out.push((format!("{p}.conv3.b"), vec![cout]));
            out.push((format!("{p}.convt.w"), conv_shape([1, 1, n], cout, cout)));
            out.push((format!("{p}.convt.b"), vec![cout]));
            cin = cout;
        }
    }
    out.push(("fc.w".to_string(), vec![cin, cfg.classes]));
    out.push(("fc.b".to_string(), vec![cfg.classes]));
    Ok(out)
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_shapes(cfg)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Convention used by [`count_flops`].
pub const FLOP_CONVENTION: &str =
    "2 FLOPs per multiply-accumulate; convolutions and the final linear layer only";

/// Forward-pass FLOPs for one clip under [`FLOP_CONVENTION`].
pub fn count_flops(cfg: &ModelConfig) -> Result<u64> {
    Ok(2 * architecture_report(cfg)?
        .iter()
        .map(|r| r.macs)
        .sum::<u64>())
}

/// Shape, parameter and MAC trace of every layer group, computed without
/// arithmetic on activations.
pub fn architecture_report(cfg: &ModelConfig) -> Result<Vec<LayerRow>> {
    let model = Model::zeroed(cfg.clone())?;
    let mut graph = Graph::shape_only();
    let x = graph.constant(Tensor::zeros(&cfg.input));
    Ok(model.forward(&mut graph, x, ParamMode::Frozen)?.trace)
}

impl Model {
    /// He-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "init", 0);
        let params = param_shapes(&config)?
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    // drawn in f32 so 32-bit storage loses nothing
                    let data = (0..n)
                        .map(|_| f64::from(rng.gen_range(-bound..bound) as f32))
                        .collect();
                    Tensor::new(&shape, data).expect("length matches shape")
                };
                Param { name, tensor }
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let params = param_shapes(&config)?
            .into_iter()
            .map(|(name, shape)| Param {
                name,
                tensor: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    /// Round every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = f64::from(*v as f32));
        }
    }

    /// Record the forward pass for one `(g, l, t, c)` input.
    pub fn forward(&self, graph: &mut Graph, x: Var, mode: ParamMode) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                ParamMode::Trainable => graph.param(p.tensor.clone()),
                ParamMode::Frozen => graph.constant(p.tensor.clone()),
            })
            .collect();
        self.forward_with(graph, x, params)
    }

    /// Forward pass reading weights from `params` (in [`Model::params`]
    /// order) instead of from the model.
    pub fn forward_with(&self, graph: &mut Graph, x: Var, params: Vec<Var>) -> Result<Forward> {
        let cfg = &self.config;
        if graph.shape(x) != cfg.input {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                cfg.input,
                graph.shape(x)
            )));
        }
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(&v, p)| graph.shape(v) != p.tensor.shape())
        {
            return Err(Error::Shape(
                "parameter nodes do not match the architecture".into(),
            ));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter list matches architecture");
        let mut trace = Vec::new();
        let mut attention = Vec::new();

        let (w, b) = (take(), take());
        let h = graph.conv3d(
            x,
            w,
            b,
            [1, 1, cfg.stem_stride_t],
            &PadSpec::time_only(cfg.stem_kernel_t / 2),
        )?;
        let mut h = graph.relu(h);
        trace.push(row("stem", graph, h, &[w, b], conv_macs(graph, h, w)));

        let mut last_conv = h;
        for (s, &blocks) in cfg.blocks_per_stage()?.iter().enumerate() {
            let mut stage_params = Vec::new();
            let mut macs = 0;
            for b in 0..blocks {
                let stride_t = if b == 0 { 2 } else { 1 };
                let (w3, b3, wt, bt) = (take(), take(), take(), take());
                stage_params.extend([w3, b3, wt, bt]);
                let out = residual_block(graph, h, [w3, b3, wt, bt], stride_t, cfg)?;
                macs += conv_macs(graph, out.f, w3) + conv_macs(graph, out.conv_t, wt);
                last_conv = out.f;
                attention.extend(out.attention);
                h = out.h;
            }
            trace.push(row(
                &format!("stage{}", s + 1),
                graph,
                h,
                &stage_params,
                macs,
            ));
        }

        let pooled = graph.avg_pool_all(h)?;
        trace.push(row("avgpool", graph, pooled, &[], 0));
        let (wf, bf) = (take(), take());
        let logits = graph.linear(pooled, wf, bf)?;
        let fc_macs = graph.value(wf).len() as u64;
        trace.push(row("fc", graph, logits, &[wf, bf], fc_macs));
        let probs = graph.softmax_along(logits, 0)?;
        Ok(Forward {
            logits,
            probs,
            params,
            last_conv,
            attention,
            trace,
        })
    }

    /// Class probabilities for one `(g, l, t, c)` input.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(&self.config.input, input.to_vec())?);
        let fwd = self.forward(&mut graph, x, ParamMode::Frozen)?;
        Ok(graph.value(fwd.probs).data().to_vec())
    }

    /// Logits for one input.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(&self.config.input, input.to_vec())?);
        let fwd = self.forward(&mut graph, x, ParamMode::Frozen)?;
        Ok(graph.value(fwd.logits).data().to_vec())
    }
}

fn conv_macs(graph: &Graph, out: Var, w: Var) -> u64 {
    let positions: usize = graph.shape(out)[..3].iter().product();
    (positions * graph.value(w).len()) as u64
}

fn row(name: &str, graph: &Graph, out: Var, params: &[Var], macs: u64) -> LayerRow {
    LayerRow {
        name: name.to_string(),
        output: graph.shape(out).to_vec(),
        params: params.iter().map(|&p| graph.value(p).len()).sum(),
        macs,
    }
}

pub struct BlockOutput {
    pub h: Var,
    /// Rectified output of the 3x3x3 convolution.
    pub f: Var,
    pub conv_t: Var,
    pub attention: Option<AttentionVars>,
}

/// One residual block: `[w3, b3, wt, bt]` are the 3x3x3 and temporal
/// convolution weights and biases.
pub fn residual_block(
    graph: &mut Graph,
    h: Var,
    [w3, b3, wt, bt]: [Var; 4],
    stride_t: usize,
    cfg: &ModelConfig,
) -> Result<BlockOutput> {
    let f = graph.conv3d(h, w3, b3, [1, 1, stride_t], &PadSpec::spatial(1, 1, 1))?;
    let f = graph.relu(f);
    let conv_t = graph.conv3d(
        f,
        wt,
        bt,
        [1, 1, 1],
        &PadSpec::time_only(cfg.time_kernel / 2),
    )?;
    let (branch, attention) = if cfg.attention {
        let att = spatial_attention(graph, f, cfg.cluster_max)?;
        let [g, l] = [graph.shape(f)[0], graph.shape(f)[1]];
        let weights = graph.reshape(att.w, &[g, l, 1, 1])?;
        (graph.mul(conv_t, weights)?, Some(att))
    } else {
        (conv_t, None)
    };
    let depth = graph.shape(branch)[3];
    let skip = if stride_t == 1 && graph.shape(h)[3] == depth {
        h
    } else {
        graph.shortcut(h, stride_t, depth)?
    };
    let sum = graph.add(branch, skip)?;
    Ok(BlockOutput {
        h: graph.relu(sum),
        f,
        conv_t,
        attention,
    })
}
