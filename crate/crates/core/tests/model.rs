use std::time::Instant;

use proptest::prelude::*;
use rand::Rng;
use spikegrid::autodiff::{Graph, Tensor};
use spikegrid::model::{
    architecture_report, count_params, load_checkpoint, load_checkpoint_for, save_checkpoint,
    spatial_attention, Checkpoint, ClusterMaxMode, Model, ModelConfig,
};
use spikegrid::seed::rng_for;
use spikegrid::Error;

fn random_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, "model-test", 0);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Plain-loop evaluation of the attention weights for a `(g, l, t, c)` map.
fn attention_oracle(f: &[f64], [g, l, t, c]: [usize; 4], mode: ClusterMaxMode) -> Vec<Vec<f64>> {
    let at = |r: usize, s: usize, j: usize, k: usize| f[((r * l + s) * t + j) * c + k];
    let mut scaled = vec![vec![0.0; l]; g];
    for r in 0..g {
        let mean: Vec<f64> = (0..l)
            .map(|s| {
                let mut sum = 0.0;
                for j in 0..t {
                    for k in 0..c {
                        sum += at(r, s, j, k);
                    }
                }
                sum / (t * c) as f64
            })
            .collect();
        let mut mx = f64::NEG_INFINITY;
        for s in 0..l {
            if mode == ClusterMaxMode::Pooled {
                mx = mx.max(mean[s]);
                continue;
            }
            for j in 0..t {
                for k in 0..c {
                    mx = mx.max(at(r, s, j, k));
                }
            }
        }
        let z: f64 = mean.iter().map(|m| m.exp()).sum();
        for s in 0..l {
            scaled[r][s] = mean[s].exp() / z * mx;
        }
    }
    let mut order = vec![vec![0usize; l]; g];
    let mut sorted = vec![vec![0.0; l]; g];
    for r in 0..g {
        let mut idx: Vec<usize> = (0..l).collect();
        idx.sort_by(|&a, &b| scaled[r][b].partial_cmp(&scaled[r][a]).unwrap());
        for (i, &s) in idx.iter().enumerate() {
            sorted[r][i] = scaled[r][s];
        }
        order[r] = idx;
    }
    let mut w = vec![vec![0.0; l]; g];
    for i in 0..l {
        let z: f64 = (0..g).map(|r| sorted[r][i].exp()).sum();
        for r in 0..g {
            w[r][order[r][i]] = sorted[r][i].exp() / z;
        }
    }
    w
}

fn attention_weights(
    f: Vec<f64>,
    dims: [usize; 4],
    mode: ClusterMaxMode,
) -> (Vec<f64>, Vec<usize>) {
    let (w, _, perm) = attention_full(f, dims, mode);
    (w, perm)
}

/// Slot-order weights, rank-order weights and sort permutation.
fn attention_full(
    f: Vec<f64>,
    dims: [usize; 4],
    mode: ClusterMaxMode,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut graph = Graph::new();
    let x = graph.constant(Tensor::new(&dims, f).unwrap());
    let att = spatial_attention(&mut graph, x, mode).unwrap();
    (
        graph.value(att.w).data().to_vec(),
        graph.value(att.ranked).data().to_vec(),
        att.perm,
    )
}

#[test]
fn table_one_shapes_and_runtime() {
    let start = Instant::now();
    let report = architecture_report(&ModelConfig::table_one()).unwrap();
    let shapes: Vec<Vec<usize>> = report.iter().map(|r| r.output.clone()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![13, 10, 150, 64],
            vec![13, 10, 75, 64],
            vec![13, 10, 38, 128],
            vec![13, 10, 19, 256],
            vec![13, 10, 10, 512],
            vec![512],
            vec![2],
        ]
    );
    assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
}

#[test]
fn parameter_census() {
    let n17 = count_params(&ModelConfig::table_one()).unwrap();
    assert!((16_100_000..=16_420_000).contains(&n17), "{n17}");
    let report = architecture_report(&ModelConfig::table_one()).unwrap();
    assert_eq!(report.last().unwrap().params, 1026);
    assert_eq!(report.iter().map(|r| r.params).sum::<usize>(), n17);
    let mut counts = Vec::new();
    for depth in [9, 13, 17, 21] {
        counts.push(
            count_params(&ModelConfig {
                depth,
                ..ModelConfig::table_one()
            })
            .unwrap(),
        );
    }
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn invalid_depth_rejected() {
    let cfg = ModelConfig {
        depth: 11,
        ..ModelConfig::table_one()
    };
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn attention_matches_scalar_oracle_on_two_by_two() {
    let f = vec![1.0, 3.0, 2.0, 2.0];
    let (w, _) = attention_weights(f.clone(), [2, 2, 1, 1], ClusterMaxMode::FeatureMap);
    let expected = attention_oracle(&f, [2, 2, 1, 1], ClusterMaxMode::FeatureMap);
    for r in 0..2 {
        for s in 0..2 {
            assert!((w[r * 2 + s] - expected[r][s]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_oracle_on_random_maps() {
    for mode in [ClusterMaxMode::FeatureMap, ClusterMaxMode::Pooled] {
        for seed in 0..20 {
            let dims = [4, 5, 3, 2];
            let f = random_vec(120, seed, 0.0, 2.0);
            let (w, _) = attention_weights(f.clone(), dims, mode);
            let expected = attention_oracle(&f, dims, mode);
            for r in 0..4 {
                for s in 0..5 {
                    assert!((w[r * 5 + s] - expected[r][s]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn constant_map_gives_uniform_weights() {
    for mode in [ClusterMaxMode::FeatureMap, ClusterMaxMode::Pooled] {
        let (w, _) = attention_weights(vec![0.8; 5 * 4 * 3 * 2], [5, 4, 3, 2], mode);
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

fn compact_model(seed: u64) -> Model {
    Model::new(ModelConfig::compact([6, 5, 16, 2]), seed).unwrap()
}

#[test]
fn probabilities_are_a_distribution() {
    let model = compact_model(1);
    for seed in 0..3 {
        let p = model
            .predict(&random_vec(6 * 5 * 16 * 2, seed, -1.0, 1.0))
            .unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_classifier_weights_give_even_odds() {
    let mut model = compact_model(2);
    model.param_mut("fc.w").unwrap().data_mut().fill(0.0);
    let p = model
        .predict(&random_vec(6 * 5 * 16 * 2, 9, -1.0, 1.0))
        .unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn wrong_input_shape_rejected() {
    let model = compact_model(0);
    assert!(matches!(model.predict(&[0.0; 10]), Err(Error::Shape(_))));
}

fn shift_rows(x: &[f64], [g, l, t, c]: [usize; 4], k: usize) -> Vec<f64> {
    let row = l * t * c;
    let mut out = vec![0.0; x.len()];
    for r in 0..g {
        let dst = (r + k) % g;
        out[dst * row..(dst + 1) * row].copy_from_slice(&x[r * row..(r + 1) * row]);
    }
    out
}

#[test]
fn logits_invariant_under_cluster_shifts() {
    let dims = [6, 5, 16, 2];
    let model = compact_model(3);
    let x = random_vec(dims.iter().product(), 4, -1.0, 1.0);
    let base = model.logits(&x).unwrap();
    for k in 1..6 {
        let shifted = model.logits(&shift_rows(&x, dims, k)).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn block_output_is_shift_equivariant() {
    let dims = [6, 5, 16, 2];
    let model = compact_model(5);
    let x = random_vec(dims.iter().product(), 6, -1.0, 1.0);
    let run = |input: Vec<f64>| {
        let mut graph = Graph::new();
        let v = graph.constant(Tensor::new(&dims, input).unwrap());
        let fwd = model
            .forward(&mut graph, v, spikegrid::model::ParamMode::Frozen)
            .unwrap();
        let out = graph.value(fwd.last_conv);
        (out.data().to_vec(), out.shape().to_vec())
    };
    let (base, shape) = run(x.clone());
    let (shifted, _) = run(shift_rows(&x, dims, 2));
    let expected = shift_rows(&base, [shape[0], shape[1], shape[2], shape[3]], 2);
    for (a, b) in shifted.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = compact_model(7);
    let ckpt = Checkpoint {
        model: model.clone(),
        epoch: 3,
        seed: 7,
        optimizer: None,
    };
    let path = dir.path().join("model.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let x = random_vec(6 * 5 * 16 * 2, 8, -1.0, 1.0);
    assert_eq!(model.predict(&x).unwrap(), back.model.predict(&x).unwrap());

    let other = ModelConfig {
        attention: false,
        ..model.config.clone()
    };
    assert!(matches!(
        load_checkpoint_for(&path, &other),
        Err(Error::Config(_))
    ));

    let blob = dir.path().join("model.f32");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_columns_are_distributions(values in prop::collection::vec(-3.0f64..3.0, 4 * 3 * 2 * 2)) {
        let (w, ranked, perm) = attention_full(values, [4, 3, 2, 2], ClusterMaxMode::FeatureMap);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        for i in 0..3 {
            let sum: f64 = (0..4).map(|r| ranked[r * 3 + i]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-10);
        }
        // each row of w is its ranked row put back in slot order
        for r in 0..4 {
            for i in 0..3 {
                prop_assert_eq!(w[r * 3 + perm[r * 3 + i]], ranked[r * 3 + i]);
            }
        }
    }

    #[test]
    fn attention_follows_slot_permutations(seed in 0u64..1000, cluster in 0usize..3) {
        let dims = [3, 4, 2, 2];
        let block = 2 * 2;
        let f = random_vec(48, seed, 0.0, 1.0);
        let mut rng = rng_for(seed, "perm", 0);
        let mut sigma: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(&mut sigma[..], &mut rng);
        // slot s of the permuted map holds slot sigma[s] of the original
        let mut permuted = f.clone();
        for s in 0..4 {
            let dst = (cluster * 4 + s) * block;
            let src = (cluster * 4 + sigma[s]) * block;
            permuted[dst..dst + block].copy_from_slice(&f[src..src + block]);
        }
        let (w, perm) = attention_weights(f, dims, ClusterMaxMode::FeatureMap);
        let (wp, perm_p) = attention_weights(permuted, dims, ClusterMaxMode::FeatureMap);
        for i in 0..4 {
            prop_assert_eq!(sigma[perm_p[cluster * 4 + i]], perm[cluster * 4 + i]);
        }
        for s in 0..4 {
            prop_assert!((wp[cluster * 4 + s] - w[cluster * 4 + sigma[s]]).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_rescaling_keeps_sort_order(seed in 0u64..1000, alpha in 0.1f64..10.0) {
        let f = random_vec(48, seed, 0.0, 1.0);
        let scaled: Vec<f64> = f.iter().map(|v| v * alpha).collect();
        let (_, perm) = attention_weights(f, [3, 4, 2, 2], ClusterMaxMode::FeatureMap);
        let (_, perm_s) = attention_weights(scaled, [3, 4, 2, 2], ClusterMaxMode::FeatureMap);
        prop_assert_eq!(perm, perm_s);
    }
}
