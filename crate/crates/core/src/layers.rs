//! Layer kinds of a hybrid stack and their forward maps.
//!
//! Tensor-network layers are tree nodes that merge each 2×2 block of site
//! vectors into one parent vector. They are linear in every input site and
//! carry no activation; nonlinearity lives on the neural side of the stack.
//!
//! Activation layout conventions:
//!
//! * site grid: `[height, width, bond]`
//! * image / feature map: `[channels, height, width]`
//! * dense features: `[n]`

use std::fmt;

use rayon::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_image, EmbeddingError, FeatureMap};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("layer {layer} ({kind}): {message}")]
    Shape { layer: usize, kind: String, message: String },
    #[error("input has shape {got:?}, model expects {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid layer hyperparameter: {0}")]
    Hyperparameter(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, LayerError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(LayerError::Hyperparameter(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Identity => x.clone(),
        _ => x.map(|v| kind.apply(v)),
    }
}

/// What the model consumes. Pixel images are converted by [`InputSpec::prepare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Embedded product state, `[height, width, d]`.
    ProductState { height: usize, width: usize, d: usize },
    /// Raw pixels, `[channels, height, width]`.
    Image { channels: usize, height: usize, width: usize },
}

impl InputSpec {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            InputSpec::ProductState { height, width, d } => vec![height, width, d],
            InputSpec::Image { channels, height, width } => vec![channels, height, width],
        }
    }

    /// Turns a row-major single-channel image with pixels in `[0, 1]` into a
    /// model input.
    pub fn prepare(&self, pixels: &[f64]) -> Result<Tensor, LayerError> {
        match *self {
            InputSpec::ProductState { height, width, d } => {
                let map = FeatureMap::new(d)?;
                Ok(embed_image(pixels, height, width, &map)?.into_tensor())
            }
            InputSpec::Image { channels, height, width } => {
                if channels != 1 || pixels.len() != height * width {
                    return Err(LayerError::Input {
                        expected: self.shape(),
                        got: vec![pixels.len()],
                    });
                }
                Ok(Tensor::from_vec(self.shape(), pixels.to_vec()).expect("sized above"))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel_h: kernel, kernel_w: kernel, stride, padding }
    }

    /// Output extent of a cross-correlation, `None` if the kernel does not fit.
    pub fn conv_out(&self, extent: usize, kernel: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution: `(in - 1)·stride + kernel - 2·padding`.
    pub fn deconv_out(&self, extent: usize, kernel: usize) -> Option<usize> {
        let full = (extent - 1) * self.stride + kernel;
        if self.stride == 0 || full <= 2 * self.padding {
            return None;
        }
        Some(full - 2 * self.padding)
    }
}

/// Declarative description of one layer; concrete extents are inferred from
/// the previous layer's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Ttn { out_dim: usize },
    Dense { out_features: usize },
    Conv2d { out_channels: usize, geometry: ConvGeometry },
    Deconv2d { out_channels: usize, geometry: ConvGeometry },
    Activation { function: Activation },
    /// Any shape to a vector (the TN→NN boundary).
    Flatten,
    /// Site grid `[h, w, bond]` to feature map `[bond, h, w]`.
    ToChannels,
    Reshape { shape: Vec<usize> },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Ttn { .. } => "ttn",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Activation { function: Activation::Relu } => "relu",
            LayerSpec::Activation { function: Activation::Sigmoid } => "sigmoid",
            LayerSpec::Activation { function: Activation::Identity } => "identity",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ToChannels => "to_channels",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Output shape for the given input shape.
    fn infer(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, LayerError> {
        let fail = |message: String| LayerError::Shape {
            layer: index,
            kind: self.kind().to_string(),
            message,
        };
        match self {
            LayerSpec::Ttn { out_dim } => {
                let [h, w, _] = input else {
                    return Err(fail(format!("expects a site grid [h, w, bond], got {input:?}")));
                };
                if *out_dim == 0 {
                    return Err(fail("out_dim must be at least 1".into()));
                }
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(fail(format!("grid {h}x{w} has an odd extent")));
                }
                Ok(vec![h / 2, w / 2, *out_dim])
            }
            LayerSpec::Dense { out_features } => {
                let [_] = input else {
                    return Err(fail(format!("expects a vector, got {input:?}")));
                };
                if *out_features == 0 {
                    return Err(fail("out_features must be at least 1".into()));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv2d { out_channels, geometry } => {
                let [_, h, w] = input else {
                    return Err(fail(format!("expects [channels, h, w], got {input:?}")));
                };
                let (oh, ow) = (
                    geometry.conv_out(*h, geometry.kernel_h),
                    geometry.conv_out(*w, geometry.kernel_w),
                );
                match (oh, ow) {
                    (Some(oh), Some(ow)) if *out_channels > 0 => Ok(vec![*out_channels, oh, ow]),
                    _ => Err(fail(format!("invalid geometry {geometry:?} for {input:?}"))),
                }
            }
            LayerSpec::Deconv2d { out_channels, geometry } => {
                let [_, h, w] = input else {
                    return Err(fail(format!("expects [channels, h, w], got {input:?}")));
                };
                let (oh, ow) = (
                    geometry.deconv_out(*h, geometry.kernel_h),
                    geometry.deconv_out(*w, geometry.kernel_w),
                );
                match (oh, ow) {
                    (Some(oh), Some(ow)) if *out_channels > 0 => Ok(vec![*out_channels, oh, ow]),
                    _ => Err(fail(format!("invalid geometry {geometry:?} for {input:?}"))),
                }
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::ToChannels => {
                let [h, w, b] = input else {
                    return Err(fail(format!("expects a site grid [h, w, bond], got {input:?}")));
                };
                Ok(vec![*b, *h, *w])
            }
            LayerSpec::Reshape { shape } => {
                if shape.contains(&0)
                    || shape.iter().product::<usize>() != input.iter().product::<usize>()
                {
                    return Err(fail(format!("cannot reshape {input:?} into {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Trainable scalars of this layer given its input shape.
    fn param_count(&self, input: &[usize]) -> usize {
        match self {
            LayerSpec::Ttn { out_dim } => {
                let (h, w, b) = (input[0], input[1], input[2]);
                (h / 2) * (w / 2) * b.pow(4) * out_dim
            }
            LayerSpec::Dense { out_features } => out_features * (input[0] + 1),
            LayerSpec::Conv2d { out_channels, geometry }
            | LayerSpec::Deconv2d { out_channels, geometry } => {
                out_channels * input[0] * geometry.kernel_h * geometry.kernel_w + out_channels
            }
            _ => 0,
        }
    }
}

/// An input descriptor plus an ordered layer list, validated for shape
/// compatibility at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    input: InputSpec,
    layers: Vec<LayerSpec>,
}

/// One row of a parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub params: usize,
}

impl ModelSpec {
    pub fn new(input: InputSpec, layers: Vec<LayerSpec>) -> Result<Self, LayerError> {
        let spec = ModelSpec { input, layers };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// `shapes[0]` is the input shape, `shapes[i + 1]` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, LayerError> {
        let input = self.input.shape();
        if input.contains(&0) {
            return Err(LayerError::Hyperparameter(format!("input shape {input:?}")));
        }
        if let InputSpec::ProductState { d, .. } = self.input {
            if d < 2 {
                return Err(EmbeddingError::Dimension(d).into());
            }
        }
        let mut shapes = vec![input];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.infer(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().expect("validated").pop().unwrap()
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        let shapes = self.shapes().expect("validated");
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| LayerSummary {
                index: i,
                kind: layer.kind(),
                input: shapes[i].clone(),
                output: shapes[i + 1].clone(),
                params: layer.param_count(&shapes[i]),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.summary().iter().map(|s| s.params).sum()
    }
}

/// Total trainable scalars of `spec`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_count()
}

/// A layer of 2×2 → 1 tree nodes with no weight sharing.
///
/// Multiply-adds above which a tree layer spreads its nodes over threads.
pub const PARALLEL_WORK: usize = 1 << 16;

/// `weights` has shape `[h/2, w/2, in, in, in, in, out]`; node `(i, j)` merges
/// the children at `(2i, 2j)`, `(2i, 2j+1)`, `(2i+1, 2j)`, `(2i+1, 2j+1)`,
/// in that axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct TtnLayer {
    pub in_height: usize,
    pub in_width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Tensor,
}

impl TtnLayer {
    pub fn new(in_height: usize, in_width: usize, in_dim: usize, out_dim: usize, weights: Tensor) -> Result<Self, LayerError> {
        let expected = [in_height / 2, in_width / 2, in_dim, in_dim, in_dim, in_dim, out_dim];
        if in_height % 2 != 0 || in_width % 2 != 0 || in_height == 0 || in_width == 0 {
            return Err(LayerError::Hyperparameter(format!(
                "tree layer needs even grid extents, got {in_height}x{in_width}"
            )));
        }
        if weights.shape() != expected {
            return Err(LayerError::Hyperparameter(format!(
                "tree weights {:?}, expected {expected:?}",
                weights.shape()
            )));
        }
        Ok(TtnLayer { in_height, in_width, in_dim, out_dim, weights })
    }

    pub fn out_height(&self) -> usize {
        self.in_height / 2
    }

    pub fn out_width(&self) -> usize {
        self.in_width / 2
    }

    pub(crate) fn node_len(&self) -> usize {
        self.in_dim.pow(4) * self.out_dim
    }

    pub(crate) fn node_weights(&self, i: usize, j: usize) -> &[f64] {
        let n = self.node_len();
        let start = (i * self.out_width() + j) * n;
        &self.weights.data()[start..start + n]
    }

    /// Flat offsets (into a `[h, w, in]` grid) of the four children of node `(i, j)`.
    pub(crate) fn child_offsets(&self, i: usize, j: usize) -> [usize; 4] {
        let d = self.in_dim;
        let w = self.in_width;
        let at = |r: usize, c: usize| (r * w + c) * d;
        [at(2 * i, 2 * j), at(2 * i, 2 * j + 1), at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1)]
    }

    pub fn forward(&self, state: &Tensor) -> Result<Tensor, LayerError> {
        let expected = [self.in_height, self.in_width, self.in_dim];
        if state.shape() != expected {
            return Err(LayerError::Input { expected: expected.to_vec(), got: state.shape().to_vec() });
        }
        let (oh, ow, o) = (self.out_height(), self.out_width(), self.out_dim);
        let d = self.in_dim;
        let x = state.data();
        let mut out = vec![0.0; oh * ow * o];
        let node = |product: &mut Vec<f64>, (n, y): (usize, &mut [f64])| {
            let (i, j) = (n / ow, n % ow);
            let [c0, c1, c2, c3] = self.child_offsets(i, j);
            outer4(&x[c0..c0 + d], &x[c1..c1 + d], &x[c2..c2 + d], &x[c3..c3 + d], product);
            let w = self.node_weights(i, j);
            for (p, &coeff) in product.iter().enumerate() {
                // embedded background pixels make most products exactly zero
                if coeff == 0.0 {
                    continue;
                }
                for (yo, &wo) in y.iter_mut().zip(&w[p * o..(p + 1) * o]) {
                    *yo += coeff * wo;
                }
            }
        };
        // nodes are independent, so splitting them across threads is exact
        if oh * ow * self.node_len() >= PARALLEL_WORK {
            out.par_chunks_mut(o).enumerate().for_each_init(|| vec![0.0; d.pow(4)], node);
        } else {
            let mut product = vec![0.0; d.pow(4)];
            out.chunks_mut(o).enumerate().for_each(|item| node(&mut product, item));
        }
        Ok(Tensor::from_vec(vec![oh, ow, o], out).expect("sized above"))
    }
}

/// `out[a,b,c,e] = v0[a]·v1[b]·v2[c]·v3[e]`, row-major.
pub(crate) fn outer4(v0: &[f64], v1: &[f64], v2: &[f64], v3: &[f64], out: &mut [f64]) {
    let d = v0.len();
    let mut k = 0;
    for &a in v0 {
        for &b in v1 {
            let ab = a * b;
            for &c in v2 {
                let abc = ab * c;
                for &e in v3 {
                    out[k] = abc * e;
                    k += 1;
                }
            }
        }
    }
    debug_assert_eq!(k, d.pow(4));
}

pub fn ttn_forward(layer: &TtnLayer, state: &Tensor) -> Result<Tensor, LayerError> {
    layer.forward(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(LayerError::Hyperparameter(format!(
                "dense weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let n = self.in_features();
        if x.shape() != [n] {
            return Err(LayerError::Input { expected: vec![n], got: x.shape().to_vec() });
        }
        let w = self.weight.data();
        let y = self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(r, &b)| b + dot(&w[r * n..(r + 1) * n], x.data()))
            .collect();
        Ok(Tensor::from_vec(vec![self.out_features()], y).expect("sized above"))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dense_forward(layer: &DenseLayer, x: &Tensor) -> Result<Tensor, LayerError> {
    layer.forward(x)
}

/// Cross-correlation with kernel `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub geometry: ConvGeometry,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Transposed convolution with kernel `[in, out, kh, kw]`; the adjoint of
/// [`Conv2dLayer`] for the same kernel array.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv2dLayer {
    pub geometry: ConvGeometry,
    pub kernel: Tensor,
    pub bias: Tensor,
}

fn check_kernel(kernel: &Tensor, bias: &Tensor, geometry: &ConvGeometry, bias_axis: usize) -> Result<(), LayerError> {
    let ok = kernel.rank() == 4
        && kernel.shape()[2] == geometry.kernel_h
        && kernel.shape()[3] == geometry.kernel_w
        && geometry.stride >= 1
        && bias.shape() == [kernel.shape()[bias_axis]];
    if ok {
        Ok(())
    } else {
        Err(LayerError::Hyperparameter(format!(
            "kernel {:?} / bias {:?} / geometry {geometry:?}",
            kernel.shape(),
            bias.shape()
        )))
    }
}

/// Iterates `(output position, input position)` pairs along one axis that the
/// kernel tap `k` connects: `input = output·stride + k - padding`.
#[inline]
pub(crate) fn tap_range(k: usize, stride: usize, padding: usize, out_len: usize, in_len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..out_len).filter_map(move |o| {
        let pos = (o * stride + k).checked_sub(padding)?;
        (pos < in_len).then_some((o, pos))
    })
}

impl Conv2dLayer {
    pub fn new(geometry: ConvGeometry, kernel: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        check_kernel(&kernel, &bias, &geometry, 0)?;
        Ok(Conv2dLayer { geometry, kernel, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub(crate) fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let g = &self.geometry;
        Some((g.conv_out(h, g.kernel_h)?, g.conv_out(w, g.kernel_w)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let (ci, co) = (self.in_channels(), self.out_channels());
        let geometry_err = || LayerError::Input { expected: vec![ci, 0, 0], got: x.shape().to_vec() };
        let &[c, h, w] = x.shape() else { return Err(geometry_err()) };
        if c != ci {
            return Err(geometry_err());
        }
        let (oh, ow) = self.out_hw(h, w).ok_or_else(geometry_err)?;
        let g = self.geometry;
        let (kh, kw) = (g.kernel_h, g.kernel_w);
        let k = self.kernel.data();
        let xs = x.data();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias.data()[o]);
            for i in 0..ci {
                let xin = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[((o * ci + i) * kh + ky) * kw + kx];
                        for (oy, iy) in tap_range(ky, g.stride, g.padding, oh, h) {
                            for (ox, ix) in tap_range(kx, g.stride, g.padding, ow, w) {
                                plane[oy * ow + ox] += kv * xin[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(vec![co, oh, ow], out).expect("sized above"))
    }
}

impl Deconv2dLayer {
    pub fn new(geometry: ConvGeometry, kernel: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        check_kernel(&kernel, &bias, &geometry, 1)?;
        Ok(Deconv2dLayer { geometry, kernel, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub(crate) fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let g = &self.geometry;
        Some((g.deconv_out(h, g.kernel_h)?, g.deconv_out(w, g.kernel_w)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let (ci, co) = (self.in_channels(), self.out_channels());
        let geometry_err = || LayerError::Input { expected: vec![ci, 0, 0], got: x.shape().to_vec() };
        let &[c, h, w] = x.shape() else { return Err(geometry_err()) };
        if c != ci {
            return Err(geometry_err());
        }
        let (oh, ow) = self.out_hw(h, w).ok_or_else(geometry_err)?;
        let g = self.geometry;
        let (kh, kw) = (g.kernel_h, g.kernel_w);
        let k = self.kernel.data();
        let xs = x.data();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias.data()[o]);
            for i in 0..ci {
                let xin = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[((i * co + o) * kh + ky) * kw + kx];
                        // input pixel (iy, ix) lands on output (iy·s + ky - p, ix·s + kx - p)
                        for (iy, oy) in tap_range(ky, g.stride, g.padding, h, oh) {
                            for (ix, ox) in tap_range(kx, g.stride, g.padding, w, ow) {
                                plane[oy * ow + ox] += kv * xin[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(vec![co, oh, ow], out).expect("sized above"))
    }
}

pub fn conv2d_forward(layer: &Conv2dLayer, x: &Tensor) -> Result<Tensor, LayerError> {
    layer.forward(x)
}

pub fn deconv2d_forward(layer: &Deconv2dLayer, x: &Tensor) -> Result<Tensor, LayerError> {
    layer.forward(x)
}

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Ttn(TtnLayer),
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Deconv2d(Deconv2dLayer),
    Activation(Activation),
    Flatten,
    ToChannels,
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        match self {
            Layer::Ttn(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Deconv2d(l) => l.forward(x),
            Layer::Activation(kind) => Ok(activation(*kind, x)),
            Layer::Flatten => Ok(x.reshape(&[x.len()]).expect("same count")),
            Layer::ToChannels => {
                if x.rank() != 3 {
                    return Err(LayerError::Input { expected: vec![0, 0, 0], got: x.shape().to_vec() });
                }
                Ok(x.permute(&[2, 0, 1]).expect("rank 3"))
            }
            Layer::Reshape(shape) => x.reshape(shape).map_err(|_| LayerError::Input {
                expected: shape.clone(),
                got: x.shape().to_vec(),
            }),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Ttn(l) => vec![&l.weights],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.kernel, &l.bias],
            Layer::Deconv2d(l) => vec![&l.kernel, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Ttn(l) => vec![&mut l.weights],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Deconv2d(l) => vec![&mut l.kernel, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Ttn { out_dim } => write!(f, "ttn(out_dim={out_dim})"),
            LayerSpec::Dense { out_features } => write!(f, "dense({out_features})"),
            LayerSpec::Conv2d { out_channels, geometry: g } | LayerSpec::Deconv2d { out_channels, geometry: g } => write!(
                f,
                "{}({out_channels}, k={}x{}, s={}, p={})",
                self.kind(),
                g.kernel_h,
                g.kernel_w,
                g.stride,
                g.padding
            ),
            LayerSpec::Reshape { shape } => write!(f, "reshape({shape:?})"),
            other => f.write_str(other.kind()),
        }
    }
}

/// Standard deviation of the Gaussian used for tree-node weights.
pub fn ttn_init_std(in_dim: usize) -> f64 {
    (in_dim as f64).powi(-2)
}

fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// Concrete parameters for every layer of `spec`, drawn from `rng`.
pub fn init_layers<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Vec<Layer> {
    let shapes = spec.shapes().expect("validated spec");
    spec.layers
        .iter()
        .zip(&shapes)
        .map(|(layer, input)| match layer {
            LayerSpec::Ttn { out_dim } => {
                let (h, w, d) = (input[0], input[1], input[2]);
                let normal = Normal::new(0.0, ttn_init_std(d)).expect("positive std");
                let mut weights = Tensor::zeros(&[h / 2, w / 2, d, d, d, d, *out_dim]);
                weights.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
                Layer::Ttn(TtnLayer::new(h, w, d, *out_dim, weights).expect("shape from spec"))
            }
            LayerSpec::Dense { out_features } => {
                let bound = 1.0 / (input[0] as f64).sqrt();
                let weight = uniform_tensor(&[*out_features, input[0]], bound, rng);
                let bias = uniform_tensor(&[*out_features], bound, rng);
                Layer::Dense(DenseLayer { weight, bias })
            }
            LayerSpec::Conv2d { out_channels, geometry } => {
                let fan_in = input[0] * geometry.kernel_h * geometry.kernel_w;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let kernel = uniform_tensor(&[*out_channels, input[0], geometry.kernel_h, geometry.kernel_w], bound, rng);
                let bias = uniform_tensor(&[*out_channels], bound, rng);
                Layer::Conv2d(Conv2dLayer { geometry: *geometry, kernel, bias })
            }
            LayerSpec::Deconv2d { out_channels, geometry } => {
                let fan_in = input[0] * geometry.kernel_h * geometry.kernel_w;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let kernel = uniform_tensor(&[input[0], *out_channels, geometry.kernel_h, geometry.kernel_w], bound, rng);
                let bias = uniform_tensor(&[*out_channels], bound, rng);
                Layer::Deconv2d(Deconv2dLayer { geometry: *geometry, kernel, bias })
            }
            LayerSpec::Activation { function } => Layer::Activation(*function),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::ToChannels => Layer::ToChannels,
            LayerSpec::Reshape { shape } => Layer::Reshape(shape.clone()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_tensor(&[h, w, d], 1.0, &mut rng)
    }

    #[test]
    fn delta_tree_node_picks_one_amplitude() {
        let mut weights = Tensor::zeros(&[1, 1, 2, 2, 2, 2, 1]);
        weights.set(&[0, 0, 0, 0, 0, 0, 0], 1.0);
        let layer = TtnLayer::new(2, 2, 2, 1, weights).unwrap();
        let mut state = Tensor::zeros(&[2, 2, 2]);
        for r in 0..2 {
            for c in 0..2 {
                state.set(&[r, c, 0], 1.0);
            }
        }
        let out = layer.forward(&state).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.item(), 1.0);
    }

    #[test]
    fn zero_tree_weights_give_zero_output() {
        let layer = TtnLayer::new(4, 4, 2, 3, Tensor::zeros(&[2, 2, 2, 2, 2, 2, 3])).unwrap();
        let out = layer.forward(&grid(4, 4, 2, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tree_layer_rejects_bad_inputs() {
        let layer = TtnLayer::new(4, 4, 2, 3, Tensor::zeros(&[2, 2, 2, 2, 2, 2, 3])).unwrap();
        assert!(matches!(layer.forward(&grid(4, 2, 2, 1)), Err(LayerError::Input { .. })));
        assert!(TtnLayer::new(3, 4, 2, 1, Tensor::zeros(&[1, 2, 2, 2, 2, 2, 1])).is_err());
        let spec = ModelSpec::new(
            InputSpec::ProductState { height: 6, width: 6, d: 2 },
            vec![LayerSpec::Ttn { out_dim: 2 }, LayerSpec::Ttn { out_dim: 1 }],
        );
        match spec {
            Err(LayerError::Shape { layer: 1, .. }) => {}
            other => panic!("expected odd-grid error at layer 1, got {other:?}"),
        }
    }

    #[test]
    fn dense_identity_and_bias() {
        let layer = DenseLayer::new(Tensor::eye(3), Tensor::zeros(&[3])).unwrap();
        let x = Tensor::vector(&[1.0, -2.0, 3.0]);
        assert_eq!(layer.forward(&x).unwrap(), x);
        let b = Tensor::vector(&[0.5, 0.25]);
        let layer = DenseLayer::new(Tensor::filled(&[2, 3], 7.0), b.clone()).unwrap();
        assert_eq!(layer.forward(&Tensor::zeros(&[3])).unwrap(), b);
        assert!(matches!(layer.forward(&Tensor::zeros(&[4])), Err(LayerError::Input { .. })));
    }

    #[test]
    fn one_by_one_conv_scales() {
        let layer = Conv2dLayer::new(
            ConvGeometry::square(1, 1, 0),
            Tensor::filled(&[1, 1, 1, 1], 2.5),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let x = grid(1, 3, 4, 5);
        assert_eq!(layer.forward(&x).unwrap(), x.scale(2.5));
    }

    #[test]
    fn delta_through_3x3_conv_stamps_flipped_kernel() {
        let kernel = Tensor::from_fn(&[1, 1, 3, 3], |ix| (ix[2] * 3 + ix[3] + 1) as f64);
        let layer = Conv2dLayer::new(ConvGeometry::square(3, 1, 1), kernel.clone(), Tensor::zeros(&[1])).unwrap();
        let mut x = Tensor::zeros(&[1, 5, 5]);
        x.set(&[0, 2, 2], 1.0);
        let y = layer.forward(&x).unwrap();
        // cross-correlation stamps the kernel rotated by 180 degrees
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(y.get(&[0, 1 + dy, 1 + dx]), kernel.get(&[0, 0, 2 - dy, 2 - dx]));
            }
        }
        // the transposed convolution stamps it upright
        let deconv = Deconv2dLayer::new(ConvGeometry::square(3, 1, 1), kernel.clone(), Tensor::zeros(&[1])).unwrap();
        let z = deconv.forward(&x).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(z.get(&[0, 1 + dy, 1 + dx]), kernel.get(&[0, 0, dy, dx]));
            }
        }
        assert_eq!(y.sum(), kernel.sum());
    }

    #[test]
    fn deconv_extent_arithmetic() {
        let g = ConvGeometry::square(4, 2, 1);
        assert_eq!(g.deconv_out(8, 4), Some(16));
        assert_eq!(g.deconv_out(2, 4), Some(4));
        assert_eq!(g.conv_out(16, 4), Some(8));
        assert_eq!(ConvGeometry::square(5, 1, 0).conv_out(3, 5), None);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!(Activation::Sigmoid.apply(-800.0) >= 0.0);
        assert_eq!(Activation::Sigmoid.apply(800.0), 1.0);
        let x = grid(2, 2, 2, 9);
        assert_eq!(activation(Activation::Identity, &x), x);
    }

    #[test]
    fn param_counts() {
        let dense = ModelSpec::new(
            InputSpec::Image { channels: 1, height: 8, width: 8 },
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 10 }],
        )
        .unwrap();
        assert_eq!(param_count(&dense), 650);

        let ttn = ModelSpec::new(
            InputSpec::ProductState { height: 32, width: 32, d: 2 },
            vec![LayerSpec::Ttn { out_dim: 4 }],
        )
        .unwrap();
        // 16x16 output nodes, 2^4 input amplitudes, 4 outputs each
        assert_eq!(param_count(&ttn), 16 * 16 * 16 * 4);

        let conv = ModelSpec::new(
            InputSpec::Image { channels: 3, height: 8, width: 8 },
            vec![LayerSpec::Conv2d { out_channels: 5, geometry: ConvGeometry::square(3, 1, 1) }],
        )
        .unwrap();
        assert_eq!(param_count(&conv), 5 * 3 * 9 + 5);
    }

    #[test]
    fn two_tree_layers_reach_an_8x8_boundary() {
        let spec = ModelSpec::new(
            InputSpec::ProductState { height: 32, width: 32, d: 2 },
            vec![LayerSpec::Ttn { out_dim: 4 }, LayerSpec::Ttn { out_dim: 1 }, LayerSpec::Flatten],
        )
        .unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[2], vec![8, 8, 1]);
        assert_eq!(shapes[3], vec![64]);
    }

    #[test]
    fn incompatible_stack_reports_layer_index() {
        let err = ModelSpec::new(
            InputSpec::ProductState { height: 4, width: 4, d: 2 },
            vec![LayerSpec::Ttn { out_dim: 2 }, LayerSpec::Dense { out_features: 3 }],
        )
        .unwrap_err();
        assert!(matches!(err, LayerError::Shape { layer: 1, .. }), "{err}");
    }
}
