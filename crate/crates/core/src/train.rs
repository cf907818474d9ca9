//! Mini-batch training and evaluation loops.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{backward_into, forward, AutodiffError, GradientSet};
use crate::data::{batch_iter, DataError, LabeledImageSet};
use crate::layers::{InputSpec, LayerError};
use crate::metrics::{argmax, psnr_from_mse, Loss, MetricError, Target};
use crate::model::{Model, ModelError};
use crate::optim::{clip_grad_norm, OptimError, Optimizer};
use crate::tensor::Tensor;

/// Samples per work unit. Fixed so that the reduction order, and therefore
/// every bit of the result, does not depend on the thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: LayerError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] MetricError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss {value} in batch {batch}; training aborted")]
    NonFiniteLoss { batch: usize, value: f64 },
}

/// Indexed samples. Implementations must be cheap to share across threads.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<(Tensor, Target), TrainError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held as tensors.
#[derive(Clone, Debug, Default)]
pub struct TensorDataset {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Target>,
}

impl Dataset for TensorDataset {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample(&self, index: usize) -> Result<(Tensor, Target), TrainError> {
        Ok((self.inputs[index].clone(), self.targets[index].clone()))
    }
}

/// What an image set is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageTask {
    Classify,
    /// The target is the padded image itself, shaped `[1, 32, 32]`.
    Reconstruct,
}

/// Converts padded images into model inputs on demand.
pub struct ImageDataset<'a> {
    pub set: &'a LabeledImageSet,
    pub input: InputSpec,
    pub task: ImageTask,
}

impl Dataset for ImageDataset<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn sample(&self, index: usize) -> Result<(Tensor, Target), TrainError> {
        let pixels = self.set.images.image(index);
        let x = self.input.prepare(&pixels).map_err(|source| TrainError::Sample { index, source })?;
        let target = match self.task {
            ImageTask::Classify => Target::Class(self.set.labels[index] as usize),
            ImageTask::Reconstruct => {
                let side = crate::data::PADDED_SIDE;
                Target::Values(Tensor::from_vec(vec![1, side, side], pixels).expect("padded image size"))
            }
        };
        Ok((x, target))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Global gradient-norm ceiling applied before each update.
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean over batches of the batch-mean loss.
    pub mean_loss: f64,
    pub batches: usize,
}

/// Loss and parameter gradients averaged over `indices`.
///
/// Samples are processed in fixed chunks of [`CHUNK`] and the partial sums are
/// combined in chunk order.
pub fn batch_gradient(
    model: &Model,
    data: &dyn Dataset,
    loss: Loss,
    indices: &[usize],
) -> Result<(f64, GradientSet), TrainError> {
    let partials: Vec<Result<(f64, GradientSet), TrainError>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = GradientSet::zeros_like(model);
            let mut total = 0.0;
            for &i in chunk {
                let (x, target) = data.sample(i)?;
                let (y, tape) = forward(model, &x, true)?;
                let (value, g) = loss.value_and_grad(&y, &target)?;
                total += value;
                backward_into(model, tape.as_ref().expect("recorded"), &g, &mut grads)?;
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = GradientSet::zeros_like(model);
    for partial in partials {
        let (value, g) = partial?;
        total += value;
        grads.add_assign(&g);
    }
    let n = indices.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// One pass over `data` in batches drawn from a permutation seeded by `seed`.
pub fn train_epoch(
    model: &mut Model,
    data: &dyn Dataset,
    loss: Loss,
    optimizer: &mut Optimizer,
    config: &TrainConfig,
    seed: u64,
) -> Result<EpochStats, TrainError> {
    let batches = batch_iter(data.len(), config.batch_size, seed)?;
    let mut sum = 0.0;
    for (batch, indices) in batches.iter().enumerate() {
        let (value, mut grads) = batch_gradient(model, data, loss, indices)?;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { batch, value });
        }
        if let Some(max) = config.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        optimizer.step(model, &grads)?;
        sum += value;
    }
    Ok(EpochStats { mean_loss: sum / batches.len() as f64, batches: batches.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub mean_loss: f64,
    /// Fraction of class targets whose output argmax matches.
    pub accuracy: Option<f64>,
    /// Mean per-sample PSNR over value targets, peak taken as the target's
    /// maximum (1 for an all-zero target).
    pub mean_psnr: Option<f64>,
    /// Mean per-sample MSE over value targets.
    pub mean_mse: Option<f64>,
}

#[derive(Default)]
struct EvalSums {
    loss: f64,
    classified: usize,
    correct: usize,
    valued: usize,
    psnr: f64,
    mse: f64,
}

/// Forward-only pass over all of `data`.
pub fn evaluate(model: &Model, data: &dyn Dataset, loss: Loss) -> Result<EvalStats, TrainError> {
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let partials: Vec<Result<EvalSums, TrainError>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sums = EvalSums::default();
            for &i in chunk {
                let (x, target) = data.sample(i)?;
                let y = model.forward(&x)?;
                sums.loss += loss.value_and_grad(&y, &target)?.0;
                match &target {
                    Target::Class(c) => {
                        sums.classified += 1;
                        if argmax(y.data()) == *c {
                            sums.correct += 1;
                        }
                    }
                    Target::Values(t) => {
                        let mse = crate::metrics::mse(&y, t)?;
                        let peak = t.data().iter().cloned().fold(0.0, f64::max);
                        let peak = if peak > 0.0 { peak } else { 1.0 };
                        sums.valued += 1;
                        sums.mse += mse;
                        sums.psnr += psnr_from_mse(mse, peak);
                    }
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total = EvalSums::default();
    for partial in partials {
        let s = partial?;
        total.loss += s.loss;
        total.classified += s.classified;
        total.correct += s.correct;
        total.valued += s.valued;
        total.psnr += s.psnr;
        total.mse += s.mse;
    }
    let ratio = |num: f64, den: usize| (den > 0).then(|| num / den as f64);
    Ok(EvalStats {
        mean_loss: total.loss / data.len() as f64,
        accuracy: ratio(total.correct as f64, total.classified),
        mean_psnr: ratio(total.psnr, total.valued),
        mean_mse: ratio(total.mse, total.valued),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, ModelSpec};

    fn line_data() -> TensorDataset {
        // y = 2x - 1
        let xs = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
        TensorDataset {
            inputs: xs.iter().map(|&x| Tensor::from_vec(vec![1, 1, 1], vec![x]).unwrap()).collect(),
            targets: xs.iter().map(|&x| Target::Values(Tensor::vector(&[2.0 * x - 1.0]))).collect(),
        }
    }

    fn line_model() -> Model {
        let spec = ModelSpec::new(
            InputSpec::Image { channels: 1, height: 1, width: 1 },
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 1 }],
        )
        .unwrap();
        Model::new(spec, 3)
    }

    #[test]
    fn fits_a_line() {
        let data = line_data();
        let mut model = line_model();
        let mut opt = Optimizer::Sgd { lr: 0.1 };
        let config = TrainConfig { batch_size: 6, clip_norm: None };
        for epoch in 0..500 {
            train_epoch(&mut model, &data, Loss::MeanSquaredError, &mut opt, &config, epoch).unwrap();
        }
        let stats = evaluate(&model, &data, Loss::MeanSquaredError).unwrap();
        assert!(stats.mean_loss < 1e-12, "{stats:?}");
        assert!(stats.accuracy.is_none());
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_index() {
        let mut data = line_data();
        data.targets[4] = Target::Values(Tensor::vector(&[f64::INFINITY]));
        let mut model = line_model();
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let mut opt = Optimizer::Sgd { lr: 0.1 };
        let config = TrainConfig { batch_size: 6, clip_norm: None };
        let err = train_epoch(&mut model, &data, Loss::MeanSquaredError, &mut opt, &config, 0).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { batch: 0, .. }), "{err}");
        let after: Vec<Tensor> = model.params().into_iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let data = line_data();
        let mut model = line_model();
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let mut opt = Optimizer::Sgd { lr: 1.0 };
        let config = TrainConfig { batch_size: 6, clip_norm: Some(1e-3) };
        train_epoch(&mut model, &data, Loss::MeanSquaredError, &mut opt, &config, 0).unwrap();
        let moved: f64 = model
            .params()
            .iter()
            .zip(&before)
            .map(|(a, b)| a.sub(b).unwrap().norm().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved <= 1e-3 * (1.0 + 1e-12), "{moved}");
    }
}
