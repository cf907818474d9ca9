//! Dense row-major real tensors.
//!
//! Everything in the network (embedded states, weights, gradients, images) is
//! a [`Tensor`]. Pairwise contraction goes through a single kernel: both
//! operands are permuted so that the summed axes sit together, viewed as
//! matrices, and multiplied. Multi-operand networks are contracted as a
//! left-to-right chain of pairwise steps described by a [`ContractionPlan`],
//! and [`contract_environment`] returns the derivative of such a chain with
//! respect to one of its operands.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

/// Work (in multiply-adds) below which `matmul` stays on the calling thread.
const PARALLEL_MATMUL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} out of range for a rank-{rank} operand")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("axis {0} appears twice in a pairing list")]
    DuplicateAxis(usize),
    #[error("paired axes have different extents ({a} vs {b})")]
    ExtentMismatch { a: usize, b: usize },
    #[error("pairing lists have different lengths ({0} vs {1})")]
    PairingLength(usize, usize),
    #[error("{0:?} is not a permutation of the axes")]
    NotAPermutation(Vec<usize>),
    #[error("cannot reshape {from:?} into {to:?}: element counts differ")]
    ElementCount { from: Vec<usize>, to: Vec<usize> },
    #[error("operand {index} out of range for {count} operands")]
    OperandOutOfRange { index: usize, count: usize },
    #[error("inconsistent contraction plan: {0}")]
    InvalidPlan(String),
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("malformed tensor encoding: {0}")]
    Encoding(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if data.len() != element_count(&shape) {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.contains(&0), "zero extent in {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; element_count(shape)] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut index = vec![0; shape.len()];
        for value in t.data.iter_mut() {
            *value = f(&index);
            increment(&mut index, shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.contains(&0) || element_count(new_shape) != self.data.len() {
            return Err(TensorError::ElementCount { from: self.shape, to: new_shape.to_vec() });
        }
        Ok(Tensor { shape: new_shape.to_vec(), data: self.data })
    }

    /// Output axis `k` is input axis `order[k]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank
            || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::NotAPermutation(order.to_vec()));
        }
        if order.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer over the output index, tracking the input offset
            for k in (0..rank).rev() {
                index[k] += 1;
                offset += strides[k];
                if index[k] < out_shape[k] {
                    break;
                }
                offset -= strides[k] * out_shape[k];
                index[k] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (y, &x) in self.data.iter_mut().zip(&other.data) {
            *y += alpha * x;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes `u32 rank`, `u64 extents[rank]`, `f64 data[..]`, all little-endian.
    pub fn write_le<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &n in &self.shape {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_le<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 64 {
            return Err(TensorError::Encoding(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            r.read_exact(&mut ext)?;
            let n = usize::try_from(u64::from_le_bytes(ext))
                .map_err(|_| TensorError::Encoding("extent overflows usize".into()))?;
            count = count
                .checked_mul(n)
                .ok_or_else(|| TensorError::Encoding("element count overflow".into()))?;
            shape.push(n);
        }
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let data =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(shape, data)
    }
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        index[k] += 1;
        if index[k] < shape[k] {
            return;
        }
        index[k] = 0;
    }
}

/// `(m×k) · (k×n)` on row-major slices. Rows of the output are independent, so
/// large products are split across the current rayon pool; each element is
/// always reduced in the same `k` order, so the result does not depend on the
/// number of threads.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PARALLEL_MATMUL_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Which axes of two operands are summed together. The result carries the
/// uncontracted axes of the first operand followed by those of the second.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ContractionSpec {
    pub axes_a: Vec<usize>,
    pub axes_b: Vec<usize>,
}

impl ContractionSpec {
    pub fn new(axes_a: &[usize], axes_b: &[usize]) -> Self {
        ContractionSpec { axes_a: axes_a.to_vec(), axes_b: axes_b.to_vec() }
    }

    /// No shared axes: the contraction is an outer product.
    pub fn outer() -> Self {
        ContractionSpec::default()
    }

    pub fn validate(&self, a: &[usize], b: &[usize]) -> Result<()> {
        if self.axes_a.len() != self.axes_b.len() {
            return Err(TensorError::PairingLength(self.axes_a.len(), self.axes_b.len()));
        }
        for (axes, shape) in [(&self.axes_a, a), (&self.axes_b, b)] {
            let mut seen = vec![false; shape.len()];
            for &axis in axes {
                if axis >= shape.len() {
                    return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
                }
                if std::mem::replace(&mut seen[axis], true) {
                    return Err(TensorError::DuplicateAxis(axis));
                }
            }
        }
        for (&i, &j) in self.axes_a.iter().zip(&self.axes_b) {
            if a[i] != b[j] {
                return Err(TensorError::ExtentMismatch { a: a[i], b: b[j] });
            }
        }
        Ok(())
    }
}

fn free_axes(rank: usize, contracted: &[usize]) -> Vec<usize> {
    (0..rank).filter(|k| !contracted.contains(k)).collect()
}

/// Pairwise contraction of `a` and `b` over the axes paired in `spec`.
pub fn contract(a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
    spec.validate(&a.shape, &b.shape)?;
    let free_a = free_axes(a.rank(), &spec.axes_a);
    let free_b = free_axes(b.rank(), &spec.axes_b);

    let order_a: Vec<usize> = free_a.iter().chain(&spec.axes_a).copied().collect();
    let order_b: Vec<usize> = spec.axes_b.iter().chain(&free_b).copied().collect();
    let a_mat = a.permute(&order_a)?;
    let b_mat = b.permute(&order_b)?;

    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let inner: usize = spec.axes_a.iter().map(|&k| a.shape[k]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let data = matmul(&a_mat.data, &b_mat.data, m, inner, n);

    let shape = free_a.iter().map(|&k| a.shape[k]).chain(free_b.iter().map(|&k| b.shape[k]));
    Tensor::from_vec(shape.collect(), data)
}

/// A multi-operand network evaluated left to right: step `i` contracts the
/// running result with operand `i + 1`, with `axes_a` indexing the running
/// result's axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionPlan {
    pub steps: Vec<ContractionSpec>,
}

type Label = usize;

/// Bond labels assigned by simulating a plan over operand shapes.
#[derive(Debug)]
struct Labelling {
    operands: Vec<Vec<Label>>,
    result: Vec<Label>,
}

impl ContractionPlan {
    pub fn new(steps: Vec<ContractionSpec>) -> Self {
        ContractionPlan { steps }
    }

    fn label(&self, shapes: &[&[usize]]) -> Result<Labelling> {
        if shapes.len() != self.steps.len() + 1 {
            return Err(TensorError::InvalidPlan(format!(
                "{} operands need {} steps, plan has {}",
                shapes.len(),
                shapes.len().saturating_sub(1),
                self.steps.len()
            )));
        }
        let mut next: Label = 0;
        let mut fresh = |rank: usize| -> Vec<Label> {
            let labels = (next..next + rank).collect();
            next += rank;
            labels
        };
        let mut operands = vec![fresh(shapes[0].len())];
        let mut running = operands[0].clone();
        let mut running_shape = shapes[0].to_vec();
        for (step, shape) in self.steps.iter().zip(&shapes[1..]) {
            step.validate(&running_shape, shape)?;
            let mut labels = fresh(shape.len());
            for (&ra, &bb) in step.axes_a.iter().zip(&step.axes_b) {
                labels[bb] = running[ra];
            }
            let keep_a = free_axes(running.len(), &step.axes_a);
            let keep_b = free_axes(shape.len(), &step.axes_b);
            let new_running: Vec<Label> =
                keep_a.iter().map(|&k| running[k]).chain(keep_b.iter().map(|&k| labels[k])).collect();
            running_shape = keep_a
                .iter()
                .map(|&k| running_shape[k])
                .chain(keep_b.iter().map(|&k| shape[k]))
                .collect();
            running = new_running;
            operands.push(labels);
        }
        Ok(Labelling { operands, result: running })
    }
}

/// Contracts every operand of `plan` into one tensor.
pub fn contract_chain(operands: &[Tensor], plan: &ContractionPlan) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = operands.iter().map(|t| t.shape()).collect();
    plan.label(&shapes)?;
    let mut acc = operands[0].clone();
    for (step, operand) in plan.steps.iter().zip(&operands[1..]) {
        acc = contract(&acc, operand, step)?;
    }
    Ok(acc)
}

/// Contraction of every operand of a network except one.
///
/// The tensor carries one axis per bond that touched the removed operand and
/// one per open index of the full result owned by another operand. Contracting
/// it with any tensor shaped like the removed operand gives the corresponding
/// directional derivative of the full result.
#[derive(Clone, Debug)]
pub struct Environment {
    tensor: Tensor,
    labels: Vec<Label>,
    operand_labels: Vec<Label>,
    operand_shape: Vec<usize>,
    result_labels: Vec<Label>,
    result_shape: Vec<usize>,
}

impl Environment {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn result_shape(&self) -> &[usize] {
        &self.result_shape
    }

    /// `∂result · direction`, laid out like the full contraction result.
    pub fn apply(&self, direction: &Tensor) -> Result<Tensor> {
        if direction.shape() != self.operand_shape.as_slice() {
            return Err(TensorError::ShapeMismatch(
                direction.shape().to_vec(),
                self.operand_shape.clone(),
            ));
        }
        let mut spec = ContractionSpec::default();
        for (k, label) in self.operand_labels.iter().enumerate() {
            if let Some(e) = self.labels.iter().position(|l| l == label) {
                spec.axes_a.push(k);
                spec.axes_b.push(e);
            }
        }
        let out = contract(direction, &self.tensor, &spec)?;
        let out_labels: Vec<Label> = free_axes(self.operand_labels.len(), &spec.axes_a)
            .into_iter()
            .map(|k| self.operand_labels[k])
            .chain(free_axes(self.labels.len(), &spec.axes_b).into_iter().map(|k| self.labels[k]))
            .collect();
        let order: Vec<usize> = self
            .result_labels
            .iter()
            .map(|l| out_labels.iter().position(|m| m == l).expect("result label"))
            .collect();
        out.permute(&order)
    }

    /// Full Jacobian with shape `result_shape ++ operand_shape`.
    pub fn jacobian(&self) -> Result<Tensor> {
        let cols = element_count(&self.operand_shape);
        let rows = element_count(&self.result_shape);
        let mut jac = vec![0.0; rows * cols];
        let mut basis = Tensor::zeros(&self.operand_shape);
        for c in 0..cols {
            basis.data[c] = 1.0;
            let column = self.apply(&basis)?;
            for r in 0..rows {
                jac[r * cols + c] = column.data[r];
            }
            basis.data[c] = 0.0;
        }
        let shape = self.result_shape.iter().chain(&self.operand_shape).copied().collect();
        Tensor::from_vec(shape, jac)
    }
}

/// Environment of operand `j` in the network described by `plan`.
pub fn contract_environment(
    operands: &[Tensor],
    plan: &ContractionPlan,
    j: usize,
) -> Result<Environment> {
    if j >= operands.len() {
        return Err(TensorError::OperandOutOfRange { index: j, count: operands.len() });
    }
    let shapes: Vec<&[usize]> = operands.iter().map(|t| t.shape()).collect();
    let labelling = plan.label(&shapes)?;
    let result_shape = contract_chain(operands, plan)?.shape().to_vec();

    let mut env = Tensor::scalar(1.0);
    let mut env_labels: Vec<Label> = Vec::new();
    for (k, operand) in operands.iter().enumerate().filter(|&(k, _)| k != j) {
        let labels = &labelling.operands[k];
        let mut spec = ContractionSpec::default();
        for (e, label) in env_labels.iter().enumerate() {
            if let Some(b) = labels.iter().position(|l| l == label) {
                spec.axes_a.push(e);
                spec.axes_b.push(b);
            }
        }
        env = contract(&env, operand, &spec)?;
        env_labels = free_axes(env_labels.len(), &spec.axes_a)
            .into_iter()
            .map(|e| env_labels[e])
            .chain(free_axes(labels.len(), &spec.axes_b).into_iter().map(|b| labels[b]))
            .collect();
    }
    Ok(Environment {
        tensor: env,
        labels: env_labels,
        operand_labels: labelling.operands[j].clone(),
        operand_shape: operands[j].shape().to_vec(),
        result_labels: labelling.result,
        result_shape,
    })
}
