//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use htn_core::layers::{Activation, ConvGeometry, InputSpec, LayerSpec, ModelSpec};
use htn_core::metrics::{Loss, Target};
use htn_core::model::Model;
use htn_core::tensor::Tensor;
use htn_core::{backward, forward};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Row-major multi-index iteration over `shape`, calling `f` for each index.
pub fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&n| n == 0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Pairwise contraction by explicit summation. Output axes are the free axes
/// of `a` then those of `b`, each in original order.
pub fn contract_oracle(a: &Tensor, b: &Tensor, axes_a: &[usize], axes_b: &[usize]) -> Tensor {
    let free_a: Vec<usize> = (0..a.rank()).filter(|k| !axes_a.contains(k)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|k| !axes_b.contains(k)).collect();
    let out_shape: Vec<usize> =
        free_a.iter().map(|&k| a.shape()[k]).chain(free_b.iter().map(|&k| b.shape()[k])).collect();
    let summed: Vec<usize> = axes_a.iter().map(|&k| a.shape()[k]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let mut ia = vec![0; a.rank()];
    let mut ib = vec![0; b.rank()];
    for_each_index(&out_shape, |o| {
        for (p, &k) in free_a.iter().enumerate() {
            ia[k] = o[p];
        }
        for (p, &k) in free_b.iter().enumerate() {
            ib[k] = o[free_a.len() + p];
        }
        let mut total = 0.0;
        for_each_index(&summed, |s| {
            for (p, (&ka, &kb)) in axes_a.iter().zip(axes_b).enumerate() {
                ia[ka] = s[p];
                ib[kb] = s[p];
            }
            total += a.get(&ia) * b.get(&ib);
        });
        out.set(o, total);
    });
    out
}

/// Tree layer by direct summation over the four child indices of every node.
pub fn ttn_oracle(weights: &Tensor, state: &Tensor) -> Tensor {
    let (oh, ow, d, o) = (weights.shape()[0], weights.shape()[1], weights.shape()[2], weights.shape()[6]);
    Tensor::from_fn(&[oh, ow, o], |idx| {
        let (i, j, k) = (idx[0], idx[1], idx[2]);
        let mut total = 0.0;
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    for e in 0..d {
                        total += weights.get(&[i, j, a, b, c, e, k])
                            * state.get(&[2 * i, 2 * j, a])
                            * state.get(&[2 * i, 2 * j + 1, b])
                            * state.get(&[2 * i + 1, 2 * j, c])
                            * state.get(&[2 * i + 1, 2 * j + 1, e]);
                    }
                }
            }
        }
        total
    })
}

/// Relative error tolerated for gradients of ordinary size.
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Gradients smaller than this are held to [`TINY_GRAD_TOLERANCE`].
pub const TINY_GRAD: f64 = 1e-8;
pub const TINY_GRAD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic and central-difference gradients over every
/// parameter entry.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Entries outside the relative tolerance rule.
    pub failures: usize,
    /// Entries outside both the rule and [`roundoff_bound`].
    pub beyond_roundoff: usize,
    pub max_rel_err: f64,
    /// Per parameter tensor, `|a - n| / |n|` in the Euclidean norm.
    pub tensor_rel_err: Vec<f64>,
    pub tensor_norm: Vec<f64>,
    /// `(tensor, entry, analytic, numeric)` of the entry with the largest
    /// relative error.
    pub worst: (usize, usize, f64, f64),
}

impl GradCheck {
    /// Every parameter tensor's gradient within [`GRAD_TOLERANCE`] relative
    /// (norm-wise), or [`TINY_GRAD_TOLERANCE`] where its norm is below
    /// [`TINY_GRAD`].
    pub fn tensors_pass(&self) -> bool {
        self.tensor_rel_err.iter().zip(&self.tensor_norm).all(|(&err, &norm)| {
            err < if norm < TINY_GRAD { TINY_GRAD_TOLERANCE } else { GRAD_TOLERANCE }
        })
    }
}

/// Absolute error a central difference with step `h` can carry from rounding
/// the loss alone.
pub fn roundoff_bound(loss: f64, h: f64) -> f64 {
    8.0 * f64::EPSILON * (loss.abs() + 1.0) / h
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

pub fn entry_ok(a: f64, n: f64) -> bool {
    let tol = if a.abs().max(n.abs()) < TINY_GRAD { TINY_GRAD_TOLERANCE } else { GRAD_TOLERANCE };
    rel_err(a, n) < tol
}

pub fn grad_check(model: &Model, x: &Tensor, target: &Target, loss: Loss, h: f64) -> GradCheck {
    let (y, tape) = forward(model, x, true).unwrap();
    let (value, g) = loss.value_and_grad(&y, target).unwrap();
    let noise = roundoff_bound(value, h);
    let analytic = backward(model, tape.as_ref().unwrap(), &g).unwrap();
    let eval = |m: &Model| loss.value_and_grad(&m.forward(x).unwrap(), target).unwrap().0;
    let mut probe = model.clone();
    let mut report = GradCheck { checked: 0, failures: 0, beyond_roundoff: 0, max_rel_err: 0.0, tensor_rel_err: Vec::new(), tensor_norm: Vec::new(), worst: (0, 0, 0.0, 0.0) };
    for (t, grad) in analytic.tensors().iter().enumerate() {
        let (mut diff, mut norm) = (0.0, 0.0);
        for e in 0..grad.len() {
            let original = probe.params()[t].data()[e];
            probe.params_mut()[t].data_mut()[e] = original + h;
            let plus = eval(&probe);
            probe.params_mut()[t].data_mut()[e] = original - h;
            let minus = eval(&probe);
            probe.params_mut()[t].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            diff += (a - numeric).powi(2);
            norm += numeric * numeric;
            report.checked += 1;
            if !entry_ok(a, numeric) {
                report.failures += 1;
                if (a - numeric).abs() > noise {
                    report.beyond_roundoff += 1;
                }
            }
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (t, e, a, numeric);
            }
        }
        report.tensor_norm.push(norm.sqrt());
        report.tensor_rel_err.push(if norm == 0.0 { diff.sqrt() } else { (diff / norm).sqrt() });
    }
    report
}

/// `spec` with every parameter drawn from U(-1, 1).
///
/// The training initialisation makes tree-layer gradients of order 1e-7,
/// where central differences at h = 1e-5 carry about 1e-12 of roundoff and
/// cannot resolve 1e-6 relative error.
pub fn random_model(spec: &ModelSpec, seed: u64) -> Model {
    let mut model = Model::new(spec.clone(), seed);
    let mut r = rng(seed ^ 0x5eed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    model
}

fn geometry(k: usize, s: usize, p: usize) -> ConvGeometry {
    ConvGeometry::square(k, s, p)
}

/// Three small hybrid architectures that between them use every layer kind.
pub fn tiny_hybrid_specs() -> Vec<(ModelSpec, Loss)> {
    let relu = LayerSpec::Activation { function: Activation::Relu };
    let sigmoid = LayerSpec::Activation { function: Activation::Sigmoid };
    vec![
        (
            ModelSpec::new(
                InputSpec::ProductState { height: 4, width: 4, d: 2 },
                vec![
                    LayerSpec::Ttn { out_dim: 2 },
                    LayerSpec::ToChannels,
                    LayerSpec::Conv2d { out_channels: 3, geometry: geometry(2, 1, 0) },
                    sigmoid.clone(),
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_features: 4 },
                    relu.clone(),
                    LayerSpec::Dense { out_features: 2 },
                ],
            )
            .unwrap(),
            Loss::MeanSquaredError,
        ),
        (
            ModelSpec::new(
                InputSpec::Image { channels: 1, height: 4, width: 4 },
                vec![
                    LayerSpec::Conv2d { out_channels: 2, geometry: geometry(3, 1, 1) },
                    relu.clone(),
                    LayerSpec::Deconv2d { out_channels: 1, geometry: geometry(4, 2, 1) },
                    sigmoid.clone(),
                    LayerSpec::Reshape { shape: vec![4, 4, 4] },
                    LayerSpec::Ttn { out_dim: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_features: 3 },
                ],
            )
            .unwrap(),
            Loss::SoftmaxCrossEntropy,
        ),
        (
            ModelSpec::new(
                InputSpec::ProductState { height: 8, width: 8, d: 3 },
                vec![
                    LayerSpec::Ttn { out_dim: 2 },
                    LayerSpec::Ttn { out_dim: 2 },
                    LayerSpec::ToChannels,
                    LayerSpec::Deconv2d { out_channels: 2, geometry: geometry(4, 2, 1) },
                    relu,
                    LayerSpec::Conv2d { out_channels: 1, geometry: geometry(3, 2, 1) },
                    sigmoid,
                ],
            )
            .unwrap(),
            Loss::MeanSquaredError,
        ),
    ]
}

/// A random input for `spec` (pixels in `[0, 1]`) and a random target suited to `loss`.
pub fn random_sample<R: Rng>(spec: &ModelSpec, loss: Loss, rng: &mut R) -> (Tensor, Target) {
    let input = spec.input();
    let pixels: usize = match *input {
        InputSpec::ProductState { height, width, .. } => height * width,
        InputSpec::Image { channels, height, width } => channels * height * width,
    };
    let raw: Vec<f64> = (0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = input.prepare(&raw).unwrap();
    let out = spec.output_shape();
    let target = match loss {
        Loss::SoftmaxCrossEntropy => Target::Class(rng.gen_range(0..out.iter().product::<usize>())),
        Loss::MeanSquaredError => Target::Values(Tensor::from_fn(&out, |_| rng.gen_range(0.0..1.0))),
    };
    (x, target)
}
