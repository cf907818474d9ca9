//! Gradient-descent updates.

use thiserror::Error;

use crate::autodiff::GradientSet;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("{params} parameter tensors but {grads} gradients")]
    Count { params: usize, grads: usize },
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    Shape { index: usize, param: Vec<usize>, grad: Vec<usize> },
    #[error("gradient {index} has a non-finite entry; step aborted")]
    NonFinite { index: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
}

fn check(params: &[&mut Tensor], grads: &[Tensor], lr: f64) -> Result<(), OptimError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(OptimError::LearningRate(lr));
    }
    if params.len() != grads.len() {
        return Err(OptimError::Count { params: params.len(), grads: grads.len() });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::Shape { index, param: p.shape().to_vec(), grad: g.shape().to_vec() });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFinite { index });
        }
    }
    Ok(())
}

/// `T ← T − η·g` for every parameter. Nothing is modified if any check fails.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<(), OptimError> {
    check(params, grads, lr)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `shapes`, with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        Self::with_hyperparameters(shapes, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(shapes: &[Vec<usize>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        AdamState { lr, beta1, beta2, eps, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), OptimError> {
    check(params, grads, state.lr)?;
    for (index, (m, g)) in state.first_moment.iter().zip(grads).enumerate() {
        if m.shape() != g.shape() {
            return Err(OptimError::Shape { index, param: m.shape().to_vec(), grad: g.shape().to_vec() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let slots = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pv, &gv), (mv, vv)) in slots {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn adam(model: &Model, lr: f64) -> Self {
        Optimizer::Adam(AdamState::new(&model.param_shapes(), lr))
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::Adam(state) => state.lr,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientSet) -> Result<(), OptimError> {
        let mut params = model.params_mut();
        match self {
            Optimizer::Sgd { lr } => sgd_step(&mut params, grads.tensors(), *lr),
            Optimizer::Adam(state) => adam_step(&mut params, grads.tensors(), state),
        }
    }
}

/// Rescales `grads` so that its global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(x: f64, g: f64, lr: f64) -> f64 {
        let mut p = Tensor::vector(&[x]);
        sgd_step(&mut [&mut p], &[Tensor::vector(&[g])], lr).unwrap();
        p.data()[0]
    }

    #[test]
    fn sgd_cases() {
        assert_eq!(scalar_step(3.0, 0.0, 0.5), 3.0);
        assert_eq!(scalar_step(2.0, 0.5, 1.0), 1.5);
        // x² from x = 1: gradient 2x
        assert!((scalar_step(1.0, 2.0, 0.1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_steps_without_touching_params() {
        let mut p = Tensor::vector(&[1.0, 2.0]);
        let before = p.clone();
        let g = Tensor::vector(&[0.1, f64::NAN]);
        assert_eq!(sgd_step(&mut [&mut p], &[g], 0.1), Err(OptimError::NonFinite { index: 0 }));
        assert_eq!(p, before);
        let g = Tensor::vector(&[0.1]);
        assert!(matches!(sgd_step(&mut [&mut p], &[g.clone()], 0.1), Err(OptimError::Shape { .. })));
        assert!(matches!(sgd_step(&mut [&mut p], &[], 0.1), Err(OptimError::Count { .. })));
        assert_eq!(
            sgd_step(&mut [&mut p], &[Tensor::vector(&[0.0, 0.0])], -1.0),
            Err(OptimError::LearningRate(-1.0))
        );
    }

    #[test]
    fn adam_zero_gradient_first_step_is_a_no_op() {
        let mut p = Tensor::vector(&[0.7]);
        let mut state = AdamState::new(&[vec![1]], 1e-3);
        adam_step(&mut [&mut p], &[Tensor::vector(&[0.0])], &mut state).unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        // m1 = (1-β1)g, v1 = (1-β2)g²; bias correction gives m̂ = g, v̂ = g²
        // update = η·g/(|g| + ε)
        let g = 0.03;
        let mut p = Tensor::vector(&[1.0]);
        let mut state = AdamState::new(&[vec![1]], 0.01);
        adam_step(&mut [&mut p], &[Tensor::vector(&[g])], &mut state).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let expected = 1.0 - 0.01 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - (1.0 - 0.01 * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let lr = 1e-3;
        let mut p = Tensor::vector(&[0.0]);
        let mut state = AdamState::new(&[vec![1]], lr);
        let g = [Tensor::vector(&[-4.2])];
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p.data()[0];
            adam_step(&mut [&mut p], &g, &mut state).unwrap();
            last = p.data()[0] - before;
        }
        assert!((last.abs() - lr).abs() / lr < 0.01, "last step {last}");
    }

    #[test]
    fn lr_scaling_invariance_is_exact() {
        let lr = 0.37;
        let g = Tensor::vector(&[0.5, -1.25, 3.0, 0.0]);
        let mut a = Tensor::vector(&[1.0, 2.0, -3.0, 4.0]);
        let mut b = a.clone();
        sgd_step(&mut [&mut a], &[g.clone()], lr).unwrap();
        sgd_step(&mut [&mut b], &[g.scale(lr)], 1.0).unwrap();
        assert_eq!(a, b);
    }
}
