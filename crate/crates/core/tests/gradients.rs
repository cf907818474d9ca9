mod common;

use common::{grad_check, random_model, random_sample, rng, tiny_hybrid_specs};
use htn_core::autodiff::{backward, forward, GradientSet};
use htn_core::metrics::{Loss, Target};
use htn_core::model::Model;
use htn_core::train::{batch_gradient, TensorDataset};

const H: f64 = 1e-5;

// Each parameter tensor's gradient must match norm-wise; single entries the
// relative rule rejects must still agree to within the rounding error of the
// loss evaluations.
#[test]
fn analytic_gradients_match_central_differences() {
    for (m, (spec, loss)) in tiny_hybrid_specs().into_iter().enumerate() {
        for seed in 0..3u64 {
            let model = random_model(&spec, 100 * m as u64 + seed);
            let (x, target) = random_sample(&spec, loss, &mut rng(7 + seed));
            let report = grad_check(&model, &x, &target, loss, H);
            assert_eq!(report.checked, model.param_count());
            assert!(report.tensors_pass(), "model {m} seed {seed}: {report:?}");
            assert_eq!(report.beyond_roundoff, 0, "model {m} seed {seed}: {report:?}");
        }
    }
}

fn dataset(spec: &htn_core::ModelSpec, loss: Loss, n: usize, seed: u64) -> TensorDataset {
    let mut r = rng(seed);
    let (inputs, targets) = (0..n).map(|_| random_sample(spec, loss, &mut r)).unzip();
    TensorDataset { inputs, targets }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    for (spec, loss) in tiny_hybrid_specs() {
        let model = Model::new(spec.clone(), 5);
        let data = dataset(&spec, loss, 13, 3);
        let indices: Vec<usize> = (0..13).rev().collect();
        let (mean_loss, grads) = batch_gradient(&model, &data, loss, &indices).unwrap();

        let mut expected = GradientSet::zeros_like(&model);
        let mut expected_loss = 0.0;
        for (x, t) in data.inputs.iter().zip(&data.targets) {
            let (y, tape) = forward(&model, x, true).unwrap();
            let (l, g) = loss.value_and_grad(&y, t).unwrap();
            expected_loss += l / 13.0;
            let mut single = backward(&model, tape.as_ref().unwrap(), &g).unwrap();
            single.scale(1.0 / 13.0);
            expected.add_assign(&single);
        }
        assert!((mean_loss - expected_loss).abs() < 1e-12);
        for (a, b) in grads.tensors().iter().zip(expected.tensors()) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-12);
        }
    }
}

#[test]
fn batch_gradient_is_independent_of_thread_count() {
    let (spec, loss) = tiny_hybrid_specs().remove(0);
    let model = Model::new(spec.clone(), 9);
    let data = dataset(&spec, loss, 37, 4);
    let indices: Vec<usize> = (0..37).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| batch_gradient(&model, &data, loss, &indices).unwrap())
    };
    let (l1, g1) = run(1);
    for threads in [2, 3, 8] {
        let (l, g) = run(threads);
        assert_eq!(l.to_bits(), l1.to_bits());
        assert_eq!(g, g1);
    }
}

#[test]
fn replay_reproduces_the_recorded_output_bitwise() {
    for (spec, loss) in tiny_hybrid_specs() {
        let model = Model::new(spec.clone(), 1);
        let (x, _) = random_sample(&spec, loss, &mut rng(2));
        let (y, tape) = forward(&model, &x, true).unwrap();
        let tape = tape.unwrap();
        assert_eq!(tape.replay(&model).unwrap(), y);
        assert_eq!(tape.output(), &y);
        assert_eq!(model.forward(&x).unwrap(), y);
    }
}

#[test]
fn gradients_are_linear_in_the_loss_gradient() {
    let (spec, _) = tiny_hybrid_specs().remove(2);
    let model = Model::new(spec.clone(), 4);
    let (x, _) = random_sample(&spec, Loss::MeanSquaredError, &mut rng(8));
    let (y, tape) = forward(&model, &x, true).unwrap();
    let tape = tape.unwrap();
    let mut r = rng(12);
    let g1 = common::random_tensor(y.shape(), &mut r);
    let g2 = common::random_tensor(y.shape(), &mut r);
    let combined = g1.scale(2.0).add(&g2.scale(-3.0)).unwrap();
    let lhs = backward(&model, &tape, &combined).unwrap();
    let mut rhs = backward(&model, &tape, &g1).unwrap();
    rhs.scale(2.0);
    let mut b = backward(&model, &tape, &g2).unwrap();
    b.scale(-3.0);
    rhs.add_assign(&b);
    for (a, b) in lhs.tensors().iter().zip(rhs.tensors()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-12);
    }
}

#[test]
fn classification_loss_gradient_points_downhill() {
    let (spec, loss) = tiny_hybrid_specs().remove(1);
    let mut model = Model::new(spec.clone(), 6);
    let (x, target) = random_sample(&spec, loss, &mut rng(3));
    assert!(matches!(target, Target::Class(_)));
    let (y, tape) = forward(&model, &x, true).unwrap();
    let (before, g) = loss.value_and_grad(&y, &target).unwrap();
    let grads = backward(&model, tape.as_ref().unwrap(), &g).unwrap();
    for (p, g) in model.params_mut().into_iter().zip(grads.tensors()) {
        p.axpy(-1e-3, g).unwrap();
    }
    let after = loss.value_and_grad(&model.forward(&x).unwrap(), &target).unwrap().0;
    assert!(after < before);
}
