use proptest::prelude::*;
use rand::Rng;
use spikegrid::dataset::Sample;
use spikegrid::eval::{
    auroc, cam_from_activation, confusion_metrics, evaluate, grad_cam, min_max_normalize,
    youden_threshold,
};
use spikegrid::model::{Model, ModelConfig};
use spikegrid::seed::rng_for;
use spikegrid::train::{
    bce_loss, cosine_lr, train_loop, AdamW, AdamWConfig, Storage, TrainConfig, Trainer,
};
use spikegrid::Error;

const DIMS: [usize; 4] = [3, 4, 16, 1];

fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 9,
        input: DIMS,
        widths: [4, 4, 8, 8],
        ..ModelConfig::table_one()
    }
}

/// Noise clips; positives carry a bump on the first cluster row.
fn clips(n: usize, seed: u64) -> Vec<Sample> {
    let [g, l, t, c] = DIMS;
    let mut rng = rng_for(seed, "clips", 0);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut input: Vec<f64> = (0..g * l * t * c)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect();
            if label == 1 {
                for s in 0..l {
                    for j in 6..10 {
                        input[(s * t + j) * c] += 3.0;
                    }
                }
            }
            Sample {
                id: format!("clip{i}"),
                input,
                dims: DIMS,
                label,
            }
        })
        .collect()
}

fn config(batch_size: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn bce_examples() {
    assert!(bce_loss(&[1.0], &[1]) < 1e-6);
    assert!((bce_loss(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce_loss(&[0.5, 0.5], &[1, 0]) - std::f64::consts::LN_2).abs() < 1e-12);
    // clamped, so a confidently wrong prediction stays finite
    assert!((bce_loss(&[0.0], &[1]) - (1e7f64).ln()).abs() < 1e-6);
}

#[test]
fn adamw_first_step_closed_form() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &[1]);
    let mut theta = vec![1.0];
    opt.step(&mut [&mut theta[..]], &[vec![0.5]], &["w"], 0.005)
        .unwrap();
    assert!((theta[0] - 0.995).abs() < 1e-6);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
    let mut theta = vec![2.0, -4.0];
    opt.step(&mut [&mut theta[..]], &[vec![0.0, 0.0]], &["w"], 0.005)
        .unwrap();
    assert_eq!(theta, vec![2.0 * (1.0 - 5e-5), -4.0 * (1.0 - 5e-5)]);
    assert_eq!(opt.state.first[0], vec![0.0, 0.0]);
}

#[test]
fn adamw_rejects_non_finite_gradient_by_name() {
    let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
    let mut theta = vec![1.0];
    let err = opt
        .step(&mut [&mut theta[..]], &[vec![f64::NAN]], &["stem.w"], 0.005)
        .unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("stem.w")),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 50, 0.005, 0.0), 0.005);
    assert!(cosine_lr(50, 50, 0.005, 0.0).abs() < 1e-18);
    assert!((cosine_lr(25, 50, 0.005, 0.0) - 0.0025).abs() < 1e-15);
    assert!((cosine_lr(50, 50, 0.005, 0.001) - 0.001).abs() < 1e-15);
}

#[test]
fn one_epoch_two_batches_is_two_steps() {
    let data = clips(4, 1);
    let model = Model::new(tiny_config(), 7).unwrap();
    let out = train_loop(model, &data, &[], &config(2, 1), None).unwrap();
    assert_eq!(out.steps, 2);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn empty_training_set_is_config_error() {
    let model = Model::new(tiny_config(), 7).unwrap();
    let err = train_loop(model, &[], &[], &config(2, 1), None)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn overfits_four_clips() {
    let data = clips(4, 2);
    let model = Model::new(tiny_config(), 11).unwrap();
    let mut trainer = Trainer::new(model, config(4, 50)).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let first = trainer.step(&batch, 0.005).unwrap() / 4.0;
    let mut last = first;
    for _ in 1..50 {
        last = trainer.step(&batch, 0.005).unwrap() / 4.0;
    }
    assert!(last < first);
    assert!(last < 0.01, "loss after 50 steps {last}");
}

#[test]
fn training_is_deterministic() {
    let data = clips(6, 4);
    let run = || {
        let model = Model::new(tiny_config(), 5).unwrap();
        let mut trainer = Trainer::new(model, config(3, 5)).unwrap();
        for epoch in 0..5 {
            trainer.run_epoch(&data, epoch).unwrap();
        }
        trainer.model
    };
    let (a, b) = (run(), run());
    for (pa, pb) in a.params.iter().zip(&b.params) {
        let bits_a: Vec<u64> = pa.tensor.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = pb.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{}", pa.name);
    }
}

#[test]
fn zero_gradient_without_decay_is_fixed_point() {
    let mut cfg = config(2, 1);
    cfg.weight_decay = 0.0;
    let model = Model::new(tiny_config(), 5).unwrap();
    let before = model.clone();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let zeros: Vec<Vec<f64>> = trainer
        .model
        .params
        .iter()
        .map(|p| vec![0.0; p.tensor.len()])
        .collect();
    let names: Vec<String> = trainer
        .model
        .params
        .iter()
        .map(|p| p.name.clone())
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut slices: Vec<&mut [f64]> = trainer
        .model
        .params
        .iter_mut()
        .map(|p| p.tensor.data_mut())
        .collect();
    trainer
        .optimizer
        .step(&mut slices, &zeros, &names, 0.005)
        .unwrap();
    assert_eq!(trainer.model.params, before.params);
}

#[test]
fn batch_loss_ignores_order() {
    let data = clips(4, 6);
    let model = Model::new(tiny_config(), 2).unwrap();
    let mut a = Trainer::new(model.clone(), config(4, 1)).unwrap();
    let mut b = Trainer::new(model, config(4, 1)).unwrap();
    let fwd: Vec<&Sample> = data.iter().collect();
    let rev: Vec<&Sample> = data.iter().rev().collect();
    let la = a.step(&fwd, 0.005).unwrap();
    let lb = b.step(&rev, 0.005).unwrap();
    assert!((la - lb).abs() < 1e-12);
}

#[test]
fn resume_matches_uninterrupted_step() {
    let data = clips(4, 8);
    let mut cfg = config(2, 2);
    cfg.storage = Storage::F32;
    let mut straight = Trainer::new(Model::new(tiny_config(), 9).unwrap(), cfg.clone()).unwrap();
    straight.run_epoch(&data, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    spikegrid::model::save_checkpoint(&straight.checkpoint(1), &path).unwrap();
    straight.run_epoch(&data, 1).unwrap();

    let ckpt = spikegrid::model::load_checkpoint(&path).unwrap();
    let mut resumed = Trainer::resume(ckpt, cfg).unwrap();
    resumed.run_epoch(&data, 1).unwrap();
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.optimizer.state, straight.optimizer.state);
}

#[test]
fn history_reproducible_and_best_is_earliest_max() {
    let data = clips(6, 10);
    let val = clips(4, 12);
    let run = |dir: &std::path::Path| {
        let model = Model::new(tiny_config(), 13).unwrap();
        train_loop(model, &data, &val, &config(3, 3), Some(dir)).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = run(d1.path());
    run(d2.path());
    let h1 = std::fs::read(d1.path().join("history.csv")).unwrap();
    let h2 = std::fs::read(d2.path().join("history.csv")).unwrap();
    assert_eq!(h1, h2);
    assert!(String::from_utf8(h1)
        .unwrap()
        .starts_with("epoch,lr,train_loss,val_tpr,val_tnr,val_f1,val_auroc\n"));
    assert!(d1.path().join("best.json").exists() && d1.path().join("final.json").exists());
    let max = out
        .history
        .iter()
        .map(|r| r.val_f1)
        .fold(f64::MIN, f64::max);
    let first = out.history.iter().find(|r| r.val_f1 == max).unwrap().epoch;
    assert_eq!(out.best_epoch, first);
}

#[test]
fn confusion_examples() {
    let r = confusion_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
    assert_eq!((r.tpr, r.tnr, r.f1), (1.0, 1.0, 1.0));

    // tp 2, fn 1, fp 1, tn 2
    let r = confusion_metrics(&[0.9, 0.8, 0.1, 0.7, 0.2, 0.3], &[1, 1, 1, 0, 0, 0], 0.5).unwrap();
    assert_eq!(
        (
            r.confusion.tp,
            r.confusion.fp,
            r.confusion.fn_,
            r.confusion.tn
        ),
        (2, 1, 1, 2)
    );
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);

    let r = confusion_metrics(&[0.2, 0.7], &[0, 0], 0.5).unwrap();
    assert_eq!(r.tpr, 0.0);
    assert!(r.undefined.contains(&"tpr".to_string()));
    assert!(r.auroc.is_none());
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    assert!(matches!(
        auroc(&[0.1, 0.2], &[1, 1]),
        Err(Error::UndefinedMetric(_))
    ));
}

#[test]
fn youden_picks_separating_threshold() {
    let t = youden_threshold(&[0.9, 0.8, 0.4, 0.3], &[1, 1, 0, 0]).unwrap();
    let r = confusion_metrics(&[0.9, 0.8, 0.4, 0.3], &[1, 1, 0, 0], t).unwrap();
    assert_eq!((r.tpr, r.tnr), (1.0, 1.0));
}

proptest! {
    #[test]
    fn threshold_extremes(scores in prop::collection::vec(0.0f64..=1.0, 2..40), seed in 0u64..1000) {
        let mut rng = rng_for(seed, "labels", 0);
        let labels: Vec<u8> = scores.iter().map(|_| rng.gen_range(0..2)).collect();
        let lo = confusion_metrics(&scores, &labels, 0.0).unwrap();
        let hi = confusion_metrics(&scores, &labels, 1.5).unwrap();
        if labels.contains(&1) {
            prop_assert_eq!(lo.tpr, 1.0);
        }
        if labels.contains(&0) {
            prop_assert_eq!(hi.tnr, 1.0);
        }
        let c = lo.confusion;
        prop_assert_eq!(c.total(), scores.len());
    }

    #[test]
    fn auroc_invariant_under_monotone_map(scores in prop::collection::vec(-3.0f64..3.0, 4..40)) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| (i % 2) as u8).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        let a = auroc(&scores, &labels).unwrap();
        let b = auroc(&mapped, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn report_matches_its_counts(scores in prop::collection::vec(0.0f64..1.0, 2..40)) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let r = confusion_metrics(&scores, &labels, 0.5).unwrap();
        let c = r.confusion;
        if c.tp + c.fn_ > 0 {
            prop_assert!((r.tpr - c.tp as f64 / (c.tp + c.fn_) as f64).abs() < 1e-15);
        }
        if c.tn + c.fp > 0 {
            prop_assert!((r.tnr - c.tn as f64 / (c.tn + c.fp) as f64).abs() < 1e-15);
        }
        if 2 * c.tp + c.fp + c.fn_ > 0 {
            prop_assert!((r.f1 - 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn normalization_keeps_zero_maps_zero() {
    let mut zeros = vec![0.0; 6];
    min_max_normalize(&mut zeros);
    assert_eq!(zeros, vec![0.0; 6]);
    let mut v = vec![0.0, 2.0, 1.0];
    min_max_normalize(&mut v);
    assert_eq!(v, vec![0.0, 1.0, 0.5]);
}

#[test]
fn cam_of_zero_gradient_is_zero() {
    let dims = [2, 2, 3, 4];
    let act: Vec<f64> = (0..48).map(|i| i as f64).collect();
    assert!(cam_from_activation(&act, &[0.0; 48], dims)
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn grad_cam_zero_head_gives_zero_map() {
    let mut model = Model::new(tiny_config(), 3).unwrap();
    model
        .param_mut("fc.w")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let sample = &clips(2, 3)[1];
    let map = grad_cam(&model, &sample.input, 1, &sample.id).unwrap();
    assert_eq!((map.g, map.l), (DIMS[0], DIMS[1]));
    assert!(map.heat.iter().all(|&v| v == 0.0));
}

#[test]
fn grad_cam_in_unit_range_and_scale_free() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let mut scaled = model.clone();
    scaled
        .param_mut("fc.w")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= 3.0);
    for sample in clips(4, 5) {
        let a = grad_cam(&model, &sample.input, 1, &sample.id).unwrap();
        assert!(a.heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let peak = a.heat.iter().cloned().fold(0.0, f64::max);
        assert!(peak == 0.0 || peak == 1.0);
        let b = grad_cam(&scaled, &sample.input, 1, &sample.id).unwrap();
        for (x, y) in a.heat.iter().zip(&b.heat) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn grad_cam_rejects_bad_class() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let sample = &clips(1, 5)[0];
    assert!(matches!(
        grad_cam(&model, &sample.input, 2, "x"),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluate_is_deterministic_and_consistent() {
    let model = Model::new(tiny_config(), 6).unwrap();
    let data = clips(8, 7);
    let (r1, rows1) = evaluate(&model, &data, 0.5).unwrap();
    let (r2, rows2) = evaluate(&model, &data, 0.5).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(rows1, rows2);
    assert_eq!(r1.confusion.total(), data.len());
    assert!(matches!(evaluate(&model, &[], 0.5), Err(Error::Config(_))));
}
