use anyhow::{ensure, Result};
use rand::Rng;
use spikegrid::autodiff::{grad_check, Graph, Tensor, Var, DEFAULT_EPS};
use spikegrid::encoder::PadSpec;
use spikegrid::model::{residual_block, spatial_attention, ClusterMaxMode, Model, ModelConfig};
use spikegrid::seed::rng_for;

use crate::commands::{sha256_hex, write_run};
use crate::SelftestArgs;

const GRAD_TOL: f64 = 1e-4;
const SHIFT_TOL: f64 = 1e-5;

fn uniform(n: usize, rng: &mut impl Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn weighted_sum(g: &mut Graph, x: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = g.constant(Tensor::new(&shape, weights.to_vec())?);
    let prod = g.mul(x, r)?;
    Ok(g.sum_all(prod))
}

/// Worst relative gradient error of a convolution, a residual block and a
/// whole minimum-depth network with a BCE head.
fn gradient_checks(seed: u64) -> Result<[f64; 3]> {
    let mut rng = rng_for(seed, "selftest-gradcheck", 0);

    let x = Tensor::new(&[3, 4, 6, 2], uniform(144, &mut rng, -1.0, 1.0))?;
    let w = Tensor::new(&[3, 3, 3, 2, 3], uniform(162, &mut rng, -0.5, 0.5))?;
    let b = Tensor::from_vec(uniform(3, &mut rng, -0.5, 0.5));
    let r = uniform(3 * 4 * 3 * 3, &mut rng, -1.0, 1.0);
    let conv = grad_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [1, 1, 2], &PadSpec::spatial(1, 1, 1))?;
            Ok(weighted_sum(g, y, &r).expect("shape from conv output"))
        },
        &[x, w, b],
        DEFAULT_EPS,
    )?;

    let cfg = ModelConfig {
        input: [3, 4, 6, 2],
        ..ModelConfig::table_one()
    };
    let inputs = vec![
        Tensor::new(&[3, 4, 6, 2], uniform(144, &mut rng, -1.0, 1.0))?,
        Tensor::new(&[3, 3, 3, 2, 3], uniform(162, &mut rng, -0.5, 0.5))?,
        Tensor::from_vec(uniform(3, &mut rng, -0.5, 0.5)),
        Tensor::new(&[1, 1, 3, 3, 3], uniform(27, &mut rng, -0.5, 0.5))?,
        Tensor::from_vec(uniform(3, &mut rng, -0.5, 0.5)),
    ];
    let r = uniform(3 * 4 * 3 * 3, &mut rng, -1.0, 1.0);
    let block = grad_check(
        |g, v| {
            let out = residual_block(g, v[0], [v[1], v[2], v[3], v[4]], 2, &cfg)?;
            Ok(weighted_sum(g, out.h, &r).expect("shape from block output"))
        },
        &inputs,
        DEFAULT_EPS,
    )?;

    let cfg = ModelConfig {
        depth: 9,
        input: [3, 3, 8, 1],
        widths: [2, 2, 3, 3],
        ..ModelConfig::table_one()
    };
    let mut model = Model::new(cfg.clone(), seed)?;
    // nonzero biases keep activations away from ReLU kinks
    for p in model.params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        let n = p.tensor.len();
        p.tensor
            .data_mut()
            .copy_from_slice(&uniform(n, &mut rng, -0.5, 0.5));
    }
    let mut inputs = vec![Tensor::new(&cfg.input, uniform(72, &mut rng, -1.0, 1.0))?];
    inputs.extend(model.params.iter().map(|p| p.tensor.clone()));
    let label = (seed % 2) as f64;
    let network = grad_check(
        |g, v| {
            let fwd = model.forward_with(g, v[0], v[1..].to_vec())?;
            g.bce_logits(fwd.logits, label, 1e-7)
        },
        &inputs,
        DEFAULT_EPS,
    )?;
    Ok([conv, block, network])
}

/// Column sums of the rank-ordered weights, non-negativity and the
/// uniform answer on constant maps. Returns the worst column-sum error.
fn attention_checks(n_maps: usize) -> Result<f64> {
    let mut rng = rng_for(0, "selftest-attention", 0);
    let mut worst = 0.0f64;
    for i in 0..n_maps {
        let mode = if i % 2 == 0 {
            ClusterMaxMode::Pooled
        } else {
            ClusterMaxMode::FeatureMap
        };
        let dims = [
            rng.gen_range(2..7),
            rng.gen_range(2..7),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        ];
        let [g, l, t, c] = dims;
        let n = g * l * t * c;
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(&dims, uniform(n, &mut rng, 0.0, 3.0))?);
        let att = spatial_attention(&mut graph, x, mode)?;
        let ranked = graph.value(att.ranked).data();
        for s in 0..l {
            let sum: f64 = (0..g).map(|r| ranked[r * l + s]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        ensure!(
            graph.value(att.w).data().iter().all(|&v| v >= 0.0),
            "negative attention weight"
        );

        let mut flat = Graph::new();
        let x = flat.constant(Tensor::new(&dims, vec![1.5; n])?);
        let att = spatial_attention(&mut flat, x, mode)?;
        for &v in flat.value(att.w).data() {
            ensure!(
                (v - 1.0 / g as f64).abs() < 1e-12,
                "constant map gave weight {v}, expected 1/{g}"
            );
        }
    }
    Ok(worst)
}

/// Largest relative logit change under cyclic shifts of the cluster axis.
fn shift_check() -> Result<f64> {
    let mut rng = rng_for(0, "selftest-shift", 0);
    let cfg = ModelConfig {
        depth: 9,
        input: [5, 4, 16, 2],
        widths: [4, 4, 8, 8],
        ..ModelConfig::table_one()
    };
    let model = Model::new(cfg.clone(), 7)?;
    let [g, l, t, c] = cfg.input;
    let row = l * t * c;
    let x = uniform(g * row, &mut rng, -1.0, 1.0);
    let base = model.logits(&x)?;
    let scale = base.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for k in 1..g {
        let mut shifted = vec![0.0; x.len()];
        for r in 0..g {
            let dst = (r + k) % g;
            shifted[dst * row..(dst + 1) * row].copy_from_slice(&x[r * row..(r + 1) * row]);
        }
        let y = model.logits(&shifted)?;
        for (a, b) in base.iter().zip(&y) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(worst)
}

pub fn run(a: SelftestArgs) -> Result<()> {
    let mut grad = [0.0f64; 3];
    for seed in 0..3 {
        for (w, e) in grad.iter_mut().zip(gradient_checks(seed)?) {
            *w = w.max(e);
        }
    }
    println!(
        "grad check: conv {:.2e}, block {:.2e}, network {:.2e}",
        grad[0], grad[1], grad[2]
    );
    let col = attention_checks(200)?;
    println!("attention: 200 maps, worst column-sum error {col:.1e}");
    let shift = shift_check()?;
    println!("cyclic cluster shifts: worst relative logit change {shift:.1e}");
    let max_grad = grad.iter().copied().fold(0.0, f64::max);
    println!("max grad-check error {max_grad:.3e}");
    if let Some(dir) = &a.out_dir {
        let hash = sha256_hex(format!("{max_grad:e},{col:e},{shift:e}").as_bytes());
        write_run(dir, "selftest", &hash, None, &a)?;
    }
    ensure!(
        max_grad < GRAD_TOL,
        "gradient check error {max_grad:.3e} exceeds {GRAD_TOL:e}"
    );
    ensure!(col < 1e-10, "attention column sums off by {col:.1e}");
    ensure!(
        shift < SHIFT_TOL,
        "logits moved by {shift:.1e} under cyclic shifts"
    );
    Ok(())
}
