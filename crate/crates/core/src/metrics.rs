//! Losses, evaluation metrics and the per-epoch metrics record.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::Tensor;

/// Floor applied to probabilities inside the logarithm of the cross entropy.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("label is not one-hot")]
    NotOneHot,
    #[error("lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("class {class} out of range for {classes} outputs")]
    Class { class: usize, classes: usize },
    #[error("peak value must be positive, got {0}")]
    Peak(f64),
    #[error("compression ratio needs positive counts, got {input}/{bottleneck}")]
    Counts { input: usize, bottleneck: usize },
    #[error("metric over an empty set")]
    Empty,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-Σ L_i log P_i` for a one-hot label `L`.
pub fn cross_entropy(label: &[f64], probs: &[f64]) -> Result<f64, MetricError> {
    if label.len() != probs.len() {
        return Err(MetricError::Length(label.len(), probs.len()));
    }
    let ones = label.iter().filter(|&&v| v == 1.0).count();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(MetricError::NotOneHot);
    }
    let class = label.iter().position(|&v| v == 1.0).unwrap();
    Ok(-probs[class].max(PROBABILITY_FLOOR).ln())
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in decibels; `+∞` for identical images.
pub fn psnr(original: &Tensor, reconstruction: &Tensor, peak: f64) -> Result<f64, MetricError> {
    if !(peak > 0.0) {
        return Err(MetricError::Peak(peak));
    }
    Ok(psnr_from_mse(mse(original, reconstruction)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Input scalars per bottleneck scalar.
pub fn compression_ratio(input_elems: usize, bottleneck_elems: usize) -> Result<f64, MetricError> {
    if input_elems == 0 || bottleneck_elems == 0 {
        return Err(MetricError::Counts { input: input_elems, bottleneck: bottleneck_elems });
    }
    Ok(input_elems as f64 / bottleneck_elems as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::Length(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// What a training sample is compared against.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Tensor),
}

/// Training objective on the raw model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Softmax over the output logits followed by cross entropy.
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl Loss {
    /// Loss value and its gradient with respect to `output`.
    pub fn value_and_grad(&self, output: &Tensor, target: &Target) -> Result<(f64, Tensor), MetricError> {
        match (self, target) {
            (Loss::SoftmaxCrossEntropy, Target::Class(class)) => {
                if *class >= output.len() {
                    return Err(MetricError::Class { class: *class, classes: output.len() });
                }
                let probs = softmax(output.data());
                let label = one_hot(*class, output.len());
                let value = cross_entropy(&label, &probs)?;
                let grad: Vec<f64> = probs.iter().zip(&label).map(|(p, l)| p - l).collect();
                Ok((value, Tensor::from_vec(output.shape().to_vec(), grad).unwrap()))
            }
            (Loss::MeanSquaredError, Target::Values(t)) => {
                let value = mse(output, t)?;
                let n = output.len() as f64;
                let grad = output.zip_map(t, |o, y| 2.0 * (o - y) / n).unwrap();
                Ok((value, grad))
            }
            (Loss::MeanSquaredError, Target::Class(c)) => {
                // regression onto the class index as a scalar
                let t = Tensor::filled(output.shape(), *c as f64);
                self.value_and_grad(output, &Target::Values(t))
            }
            (Loss::SoftmaxCrossEntropy, Target::Values(t)) => {
                Err(MetricError::Shape(output.shape().to_vec(), t.shape().to_vec()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    Psnr,
    Mse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Psnr => "psnr",
            MetricKind::Mse => "mse",
        }
    }
}

/// One epoch of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub metric: MetricKind,
    pub metric_value: f64,
    pub seconds: f64,
    pub param_count: usize,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss,metric_name,metric_value,seconds,param_count";

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{}",
            self.epoch,
            self.loss,
            self.metric.name(),
            self.metric_value,
            self.seconds,
            self.param_count
        )
    }
}

/// Header plus one LF-terminated row per epoch.
pub fn metrics_csv(rows: &[RunMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.csv_row());
    }
    out
}
