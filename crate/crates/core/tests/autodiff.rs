use proptest::prelude::*;
use rand::Rng;
use spikegrid::autodiff::{conv3d_reference, grad_check, Graph, Tensor, DEFAULT_EPS};
use spikegrid::encoder::PadSpec;
use spikegrid::seed::rng_for;
use spikegrid::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "autodiff-test", 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn relu_values_and_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn mul_broadcasts_slot_weights_over_time_and_depth() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 4, 5], 2.0));
    let w = g.constant(Tensor::new(&[2, 3, 1, 1], (0..6).map(f64::from).collect()).unwrap());
    let y = g.mul(x, w).unwrap();
    let v = g.value(y);
    for r in 0..2 {
        for s in 0..3 {
            for k in 0..20 {
                assert_eq!(v.data()[(r * 3 + s) * 20 + k], 2.0 * (r * 3 + s) as f64);
            }
        }
    }
    let bad = g.constant(Tensor::zeros(&[2, 2, 1, 1]));
    assert!(matches!(g.mul(x, bad), Err(Error::Shape(_))));
}

#[test]
fn add_passes_gradient_to_both_parents() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.param(Tensor::from_vec(vec![3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    let s = g.sum_all(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let m = g.mean_over(x, &[0]).unwrap();
    assert_eq!(g.value(m).item(), 2.0);

    let y = g.param(Tensor::from_vec(vec![3.0, 1.0, 3.0]));
    let mx = g.max_over(y, &[0]).unwrap();
    assert_eq!(g.value(mx).item(), 3.0);
    let grads = g.backward(mx).unwrap();
    assert_eq!(grads.get(y).unwrap(), &[1.0, 0.0, 0.0]);

    let z = g.constant(Tensor::zeros(&[2, 2, 4, 3]));
    let r = g.mean_over(z, &[2, 3]).unwrap();
    assert_eq!(g.shape(r), &[2, 2]);
    assert!(matches!(g.mean_over(z, &[]), Err(Error::Shape(_))));
    assert!(matches!(g.mean_over(z, &[4]), Err(Error::Shape(_))));
}

#[test]
fn sort_desc_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 3.0, 2.0]));
    let (sorted, perm) = g.sort_desc(x, 0).unwrap();
    assert_eq!(g.value(sorted).data(), &[3.0, 2.0, 1.0]);
    assert_eq!(perm, vec![1, 2, 0]);

    let ties = g.constant(Tensor::from_vec(vec![2.0, 2.0]));
    let (_, perm) = g.sort_desc(ties, 0).unwrap();
    assert_eq!(perm, vec![0, 1]);

    // gradient of a weighted sum of sorted values lands on the source slots
    let w = g.constant(Tensor::from_vec(vec![10.0, 20.0, 30.0]));
    let prod = g.mul(sorted, w).unwrap();
    let s = g.sum_all(prod);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[30.0, 10.0, 20.0]);
}

#[test]
fn sort_then_inverse_gather_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(random(&[4, 7], 3));
    let (sorted, perm) = g.sort_desc(x, 1).unwrap();
    let inv = spikegrid::model::invert_rows(&perm, 7);
    let back = g.gather_along(sorted, 1, inv).unwrap();
    assert_eq!(g.value(back), g.value(x));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4], 0.7));
    let y = g.softmax_along(x, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = g.constant(Tensor::from_vec(vec![0.0, 3f64.ln()]));
    let y = g.softmax_along(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn linear_and_pooling() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 4, 5], 1.5));
    let p = g.avg_pool_all(x).unwrap();
    assert_eq!(g.value(p).data(), &[1.5; 5]);

    let v = g.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let mut eye = vec![0.0; 9];
    (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
    let w = g.constant(Tensor::new(&[3, 3], eye).unwrap());
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(v, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);

    let pooled = g.constant(Tensor::zeros(&[512]));
    let fc = g.constant(Tensor::zeros(&[512, 2]));
    let fb = g.constant(Tensor::zeros(&[2]));
    let logits = g.linear(pooled, fc, fb).unwrap();
    assert_eq!(g.shape(logits), &[2]);
    assert!(matches!(g.linear(pooled, w, b), Err(Error::Shape(_))));
}

#[test]
fn non_finite_results_are_numeric_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![f64::MAX, f64::MAX]));
    assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
}

#[test]
fn shared_subexpression_gradients_accumulate() {
    // f(x) = sum(relu(x) * relu(x)) with relu(x) reused, against a graph
    // that computes relu twice
    let x0 = random(&[6], 11);
    let mut shared = Graph::new();
    let x = shared.param(x0.clone());
    let r = shared.relu(x);
    let sq = shared.mul(r, r).unwrap();
    let s = shared.sum_all(sq);
    let a = shared.backward(s).unwrap().get(x).unwrap().to_vec();

    let mut dup = Graph::new();
    let x = dup.param(x0.clone());
    let r1 = dup.relu(x);
    let r2 = dup.relu(x);
    let sq = dup.mul(r1, r2).unwrap();
    let s = dup.sum_all(sq);
    let b = dup.backward(s).unwrap().get(x).unwrap().to_vec();
    assert_eq!(a, b);
    for (v, d) in x0.data().iter().zip(&a) {
        assert_eq!(*d, if *v > 0.0 { 2.0 * v } else { 0.0 });
    }
}

#[test]
fn grad_check_polynomial() {
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum_all(sq))
        },
        &[Tensor::from_vec(vec![1.0, 2.0])],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_conv_with_bce() {
    let x = random(&[3, 3, 4, 2], 1);
    let w = random(&[3, 3, 3, 2, 2], 2);
    let b = random(&[2], 3);
    let err = grad_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [1, 1, 1], &PadSpec::spatial(1, 1, 1))?;
            let pooled = g.avg_pool_all(y)?;
            let probs = g.softmax_along(pooled, 0)?;
            let pick = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
            let p = g.mul(probs, pick)?;
            let p = g.sum_all(p);
            let p = g.reshape(p, &[1])?;
            g.bce(p, &[1.0], 1e-7)
        },
        &[x, w, b],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_every_op() {
    let x = random(&[3, 4, 5, 2], 5);
    let err = grad_check(
        |g, v| {
            let m = g.mean_over(v[0], &[2, 3])?;
            let mx = g.max_over(v[0], &[1, 2, 3])?;
            let mx = g.reshape(mx, &[3, 1])?;
            let s = g.softmax_along(m, 1)?;
            let p = g.mul(s, mx)?;
            let (sorted, _) = g.sort_desc(p, 1)?;
            let q = g.softmax_along(sorted, 0)?;
            let sc = g.shortcut(v[0], 2, 3)?;
            let pooled = g.avg_pool_all(sc)?;
            let a = g.sum_all(q);
            let b = g.sum_all(pooled);
            let t = g.add(a, b)?;
            let sq = g.mul(t, t)?;
            Ok(g.sum_all(sq))
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv3d_strided_matches_reference_with_grad_check() {
    let x = random(&[4, 3, 9, 2], 7);
    let w = random(&[3, 3, 3, 2, 3], 8);
    let b = random(&[3], 9);
    let pad = PadSpec::spatial(1, 1, 1);
    let mut g = Graph::new();
    let (vx, vw, vb) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let y = g.conv3d(vx, vw, vb, [1, 1, 2], &pad).unwrap();
    let (reference, shape) = conv3d_reference(
        x.data(),
        [4, 3, 9, 2],
        w.data(),
        [3, 3, 3, 2, 3],
        b.data(),
        [1, 1, 2],
        &pad,
    )
    .unwrap();
    assert_eq!(g.shape(y), &shape);
    for (a, r) in g.value(y).data().iter().zip(&reference) {
        assert!((a - r).abs() <= 1e-10 * r.abs().max(1.0));
    }
    let err = grad_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [1, 1, 2], &pad)?;
            let y = g.mul(y, y)?;
            Ok(g.sum_all(y))
        },
        &[x, w, b],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], values).unwrap());
        for dim in 0..2 {
            let y = g.softmax_along(x, dim).unwrap();
            let v = g.value(y).data();
            prop_assert!(v.iter().all(|&p| p > 0.0));
            if dim == 1 {
                for row in v.chunks(4) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..4 {
                    let s: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-5.0f64..5.0, 6), c in -100.0f64..100.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(values.clone()));
        let y = g.softmax_along(x, 0).unwrap();
        let xs = g.constant(Tensor::from_vec(values.iter().map(|v| v + c).collect()));
        let ys = g.softmax_along(xs, 0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn bce_logits_matches_clamped_bce_and_grad_checks() {
    for label in [0.0, 1.0] {
        let z = Tensor::from_vec(vec![0.3, -0.4]);
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let loss = g.bce_logits(zv, label, 1e-7).unwrap();
        let p1 = 1.0 / (1.0 + (0.3f64 - -0.4).exp());
        let want = -(label * p1.ln() + (1.0 - label) * (1.0 - p1).ln());
        assert!((g.value(loss).item() - want).abs() < 1e-12);
        let err = grad_check(|g, v| g.bce_logits(v[0], label, 1e-7), &[z], DEFAULT_EPS).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}

#[test]
fn bce_logits_gradient_survives_saturation() {
    let mut g = Graph::new();
    let z = g.param(Tensor::from_vec(vec![40.0, -40.0]));
    let loss = g.bce_logits(z, 1.0, 1e-7).unwrap();
    assert!((g.value(loss).item() - (1e7f64).ln()).abs() < 1e-6);
    let grads = g.backward(loss).unwrap();
    let d = grads.get(z).unwrap();
    assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
}
