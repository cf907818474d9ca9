use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layers::{init_layers, Layer, LayerError, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: LayerError,
    },
    #[error("input shape {got:?} does not match the model input {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter {index}: shape {got:?}, expected {expected:?}")]
    Parameter { index: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} parameter tensors, got {got}")]
    ParameterCount { expected: usize, got: usize },
}

/// A [`ModelSpec`] together with its trainable parameters.
///
/// `generation` increases on every parameter update so that tapes recorded
/// before an update can be recognised as stale.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    generation: u64,
}

impl Model {
    /// Parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = init_layers(&spec, &mut rng);
        Model { spec, layers, generation: 0 }
    }

    /// Rebuilds a model from explicit parameter tensors in [`Model::params`] order.
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let mut model = Model::new(spec, 0);
        let expected = model.param_shapes();
        if expected.len() != params.len() {
            return Err(ModelError::ParameterCount { expected: expected.len(), got: params.len() });
        }
        for (index, (slot, value)) in model.params_mut().into_iter().zip(params).enumerate() {
            if slot.shape() != value.shape() {
                return Err(ModelError::Parameter {
                    index,
                    expected: slot.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mutable access to the parameters; counts as an update.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected = self.spec.input().shape();
        if x.shape() != expected.as_slice() {
            return Err(ModelError::Input { expected, got: x.shape().to_vec() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, l) in self.layers.iter().enumerate() {
            h = l.forward(&h).map_err(|source| ModelError::Layer { layer, source })?;
        }
        Ok(h)
    }
}
