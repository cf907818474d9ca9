//! Layer-granular tape and reverse-mode differentiation.
//!
//! A forward pass records one [`TapeNode`] per layer. [`backward`] walks the
//! tape in reverse, applying each layer's vector-Jacobian product; full
//! Jacobians are never formed. For a tree node the derivative of its output
//! with respect to its weight tensor is the environment of that weight, which
//! for a 2×2 node is the outer product of its four child vectors, so the
//! weight gradient is that outer product times the upstream output-bond
//! gradient.

use thiserror::Error;

use crate::layers::{
    dot, outer4, tap_range, Activation, Conv2dLayer, Deconv2dLayer, DenseLayer, Layer, TtnLayer,
};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tape was recorded at model generation {tape}, model is at {model}")]
    StaleTape { tape: u64, model: u64 },
    #[error("loss gradient has shape {got:?}, model output is {expected:?}")]
    LossGradShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("gradient set does not match the model parameters")]
    GradientShape,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapeNode {
    pub layer: usize,
    pub kind: &'static str,
    pub input: Tensor,
    pub output: Tensor,
}

/// Recorded forward pass, nodes in execution order.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    input: Tensor,
    generation: u64,
}

impl Tape {
    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn output(&self) -> &Tensor {
        self.nodes.last().map(|n| &n.output).unwrap_or(&self.input)
    }

    /// Re-executes the recorded layers starting from the recorded model input.
    pub fn replay(&self, model: &Model) -> Result<Tensor, AutodiffError> {
        self.check_fresh(model)?;
        let mut out = self.input.clone();
        for node in &self.nodes {
            out = model.layers()[node.layer]
                .forward(&out)
                .map_err(|source| ModelError::Layer { layer: node.layer, source })?;
        }
        Ok(out)
    }

    fn check_fresh(&self, model: &Model) -> Result<(), AutodiffError> {
        if self.generation != model.generation() {
            return Err(AutodiffError::StaleTape { tape: self.generation, model: model.generation() });
        }
        Ok(())
    }
}

fn layer_kind(layer: &Layer) -> &'static str {
    match layer {
        Layer::Ttn(_) => "ttn",
        Layer::Dense(_) => "dense",
        Layer::Conv2d(_) => "conv2d",
        Layer::Deconv2d(_) => "deconv2d",
        Layer::Activation(Activation::Relu) => "relu",
        Layer::Activation(Activation::Sigmoid) => "sigmoid",
        Layer::Activation(Activation::Identity) => "identity",
        Layer::Flatten => "flatten",
        Layer::ToChannels => "to_channels",
        Layer::Reshape(_) => "reshape",
    }
}

/// Runs the model, optionally recording a tape for [`backward`].
pub fn forward(model: &Model, input: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>), ModelError> {
    if !record {
        return Ok((model.forward(input)?, None));
    }
    model.check_input(input)?;
    let mut nodes = Vec::with_capacity(model.layers().len());
    let mut h = input.clone();
    for (index, layer) in model.layers().iter().enumerate() {
        let out = layer.forward(&h).map_err(|source| ModelError::Layer { layer: index, source })?;
        nodes.push(TapeNode { layer: index, kind: layer_kind(layer), input: h, output: out.clone() });
        h = out;
    }
    let tape = Tape { nodes, input: input.clone(), generation: model.generation() };
    Ok((h, Some(tape)))
}

/// One gradient tensor per model parameter, in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradientSet { grads: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        GradientSet { grads }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn matches(&self, model: &Model) -> bool {
        let params = model.params();
        params.len() == self.grads.len()
            && params.iter().zip(&self.grads).all(|(p, g)| p.shape() == g.shape())
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(1.0, b).expect("matching gradient sets");
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the model output.
pub fn backward(model: &Model, tape: &Tape, loss_grad: &Tensor) -> Result<GradientSet, AutodiffError> {
    let mut grads = GradientSet::zeros_like(model);
    backward_into(model, tape, loss_grad, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing gradient set.
pub fn backward_into(
    model: &Model,
    tape: &Tape,
    loss_grad: &Tensor,
    grads: &mut GradientSet,
) -> Result<(), AutodiffError> {
    tape.check_fresh(model)?;
    if loss_grad.shape() != tape.output().shape() {
        return Err(AutodiffError::LossGradShape {
            expected: tape.output().shape().to_vec(),
            got: loss_grad.shape().to_vec(),
        });
    }
    if !grads.matches(model) {
        return Err(AutodiffError::GradientShape);
    }
    let layers = model.layers();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut next = 0;
    for layer in layers {
        offsets.push(next);
        next += layer.params().len();
    }
    // nothing upstream of the first parameterised layer needs a gradient
    let Some(first) = layers.iter().position(|l| !l.params().is_empty()) else {
        return Ok(());
    };

    let mut upstream = loss_grad.clone();
    for node in tape.nodes.iter().rev() {
        if node.layer < first {
            break;
        }
        let layer = &layers[node.layer];
        let slots = &mut grads.grads[offsets[node.layer]..offsets[node.layer] + layer.params().len()];
        let need_input_grad = node.layer > first;
        match vjp(layer, &node.input, &node.output, &upstream, slots, need_input_grad) {
            Some(g) => upstream = g,
            None => break,
        }
    }
    Ok(())
}

/// Accumulates parameter gradients into `slots` and returns the gradient with
/// respect to the layer input when `need_input_grad` is set.
fn vjp(layer: &Layer, x: &Tensor, y: &Tensor, gy: &Tensor, slots: &mut [Tensor], need_input_grad: bool) -> Option<Tensor> {
    match layer {
        Layer::Ttn(l) => ttn_vjp(l, x, gy, &mut slots[0], need_input_grad),
        Layer::Dense(l) => dense_vjp(l, x, gy, slots, need_input_grad),
        Layer::Conv2d(l) => conv_vjp(l, x, gy, slots, need_input_grad),
        Layer::Deconv2d(l) => deconv_vjp(l, x, gy, slots, need_input_grad),
        Layer::Activation(kind) => need_input_grad.then(|| match kind {
            Activation::Relu => x.zip_map(gy, |xv, g| if xv > 0.0 { g } else { 0.0 }).unwrap(),
            Activation::Sigmoid => y.zip_map(gy, |yv, g| g * yv * (1.0 - yv)).unwrap(),
            Activation::Identity => gy.clone(),
        }),
        Layer::Flatten | Layer::Reshape(_) => need_input_grad.then(|| gy.reshape(x.shape()).unwrap()),
        Layer::ToChannels => need_input_grad.then(|| gy.permute(&[1, 2, 0]).unwrap()),
    }
}

fn ttn_vjp(l: &TtnLayer, x: &Tensor, gy: &Tensor, gw: &mut Tensor, need_input_grad: bool) -> Option<Tensor> {
    let (oh, ow, o, d) = (l.out_height(), l.out_width(), l.out_dim, l.in_dim);
    let node = l.node_len();
    let xs = x.data();
    let mut gx = need_input_grad.then(|| vec![0.0; xs.len()]);
    let mut product = vec![0.0; d.pow(4)];
    let mut contracted = vec![0.0; d.pow(4)];
    for i in 0..oh {
        for j in 0..ow {
            let cell = i * ow + j;
            let g = &gy.data()[cell * o..(cell + 1) * o];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let offsets = l.child_offsets(i, j);
            let [v0, v1, v2, v3] = offsets.map(|c| &xs[c..c + d]);
            // environment of the node weights: outer product of the children
            outer4(v0, v1, v2, v3, &mut product);
            let gw_node = &mut gw.data_mut()[cell * node..(cell + 1) * node];
            for (p, &coeff) in product.iter().enumerate() {
                if coeff == 0.0 {
                    continue;
                }
                for (slot, &gv) in gw_node[p * o..(p + 1) * o].iter_mut().zip(g) {
                    *slot += coeff * gv;
                }
            }
            let Some(gx) = gx.as_mut() else { continue };
            // weights with the output bond closed against the upstream gradient
            let w = l.node_weights(i, j);
            for (p, c) in contracted.iter_mut().enumerate() {
                *c = dot(&w[p * o..(p + 1) * o], g);
            }
            let mut g_children = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            let mut p = 0;
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        for e in 0..d {
                            let t = contracted[p];
                            p += 1;
                            g_children[0][a] += t * v1[b] * v2[c] * v3[e];
                            g_children[1][b] += t * v0[a] * v2[c] * v3[e];
                            g_children[2][c] += t * v0[a] * v1[b] * v3[e];
                            g_children[3][e] += t * v0[a] * v1[b] * v2[c];
                        }
                    }
                }
            }
            for (offset, gc) in offsets.iter().zip(&g_children) {
                for (slot, v) in gx[*offset..*offset + d].iter_mut().zip(gc) {
                    *slot += v;
                }
            }
        }
    }
    gx.map(|data| Tensor::from_vec(x.shape().to_vec(), data).unwrap())
}

fn dense_vjp(l: &DenseLayer, x: &Tensor, gy: &Tensor, slots: &mut [Tensor], need_input_grad: bool) -> Option<Tensor> {
    let (n_out, n_in) = (l.out_features(), l.in_features());
    let (gw, gb) = slots.split_at_mut(1);
    let gw = gw[0].data_mut();
    for (r, &g) in gy.data().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (slot, &xv) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(x.data()) {
            *slot += g * xv;
        }
    }
    gb[0].axpy(1.0, gy).unwrap();
    need_input_grad.then(|| {
        let w = l.weight.data();
        let mut gx = vec![0.0; n_in];
        for r in 0..n_out {
            let g = gy.data()[r];
            for (slot, &wv) in gx.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                *slot += g * wv;
            }
        }
        Tensor::from_vec(vec![n_in], gx).unwrap()
    })
}

fn conv_vjp(l: &Conv2dLayer, x: &Tensor, gy: &Tensor, slots: &mut [Tensor], need_input_grad: bool) -> Option<Tensor> {
    let (ci, co) = (l.in_channels(), l.out_channels());
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let geo = l.geometry;
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    let (gk, gb) = slots.split_at_mut(1);
    let gk = gk[0].data_mut();
    let k = l.kernel.data();
    let xs = x.data();
    let mut gx = need_input_grad.then(|| vec![0.0; xs.len()]);
    for o in 0..co {
        let g_plane = &gy.data()[o * oh * ow..(o + 1) * oh * ow];
        gb[0].data_mut()[o] += g_plane.iter().sum::<f64>();
        for i in 0..ci {
            let xin = &xs[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((o * ci + i) * kh + ky) * kw + kx;
                    let mut acc = 0.0;
                    for (oy, iy) in tap_range(ky, geo.stride, geo.padding, oh, h) {
                        for (ox, ix) in tap_range(kx, geo.stride, geo.padding, ow, w) {
                            acc += g_plane[oy * ow + ox] * xin[iy * w + ix];
                        }
                    }
                    gk[kidx] += acc;
                    if let Some(gx) = gx.as_mut() {
                        let kv = k[kidx];
                        let gx_plane = &mut gx[i * h * w..(i + 1) * h * w];
                        for (oy, iy) in tap_range(ky, geo.stride, geo.padding, oh, h) {
                            for (ox, ix) in tap_range(kx, geo.stride, geo.padding, ow, w) {
                                gx_plane[iy * w + ix] += kv * g_plane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx.map(|data| Tensor::from_vec(x.shape().to_vec(), data).unwrap())
}

fn deconv_vjp(l: &Deconv2dLayer, x: &Tensor, gy: &Tensor, slots: &mut [Tensor], need_input_grad: bool) -> Option<Tensor> {
    let (ci, co) = (l.in_channels(), l.out_channels());
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let geo = l.geometry;
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    let (gk, gb) = slots.split_at_mut(1);
    let gk = gk[0].data_mut();
    let k = l.kernel.data();
    let xs = x.data();
    let mut gx = need_input_grad.then(|| vec![0.0; xs.len()]);
    for o in 0..co {
        let g_plane = &gy.data()[o * oh * ow..(o + 1) * oh * ow];
        gb[0].data_mut()[o] += g_plane.iter().sum::<f64>();
        for i in 0..ci {
            let xin = &xs[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((i * co + o) * kh + ky) * kw + kx;
                    let mut acc = 0.0;
                    for (iy, oy) in tap_range(ky, geo.stride, geo.padding, h, oh) {
                        for (ix, ox) in tap_range(kx, geo.stride, geo.padding, w, ow) {
                            acc += g_plane[oy * ow + ox] * xin[iy * w + ix];
                        }
                    }
                    gk[kidx] += acc;
                    if let Some(gx) = gx.as_mut() {
                        let kv = k[kidx];
                        let gx_plane = &mut gx[i * h * w..(i + 1) * h * w];
                        for (iy, oy) in tap_range(ky, geo.stride, geo.padding, h, oh) {
                            for (ix, ox) in tap_range(kx, geo.stride, geo.padding, w, ow) {
                                gx_plane[iy * w + ix] += kv * g_plane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx.map(|data| Tensor::from_vec(x.shape().to_vec(), data).unwrap())
}
