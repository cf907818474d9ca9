//! Binary checkpoints: model spec, parameters and optimiser state.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` length of the
//! JSON-encoded spec followed by the JSON, `u32` tensor count and the
//! parameter tensors, then a one-byte optimiser tag with its state.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::layers::{LayerError, ModelSpec};
use crate::model::{Model, ModelError};
use crate::optim::{AdamState, Optimizer};
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"HTNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    Version(u32),
    #[error("spec: {0}")]
    Spec(#[from] serde_json::Error),
    #[error("spec: {0}")]
    InvalidSpec(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown optimiser tag {0}")]
    OptimizerTag(u8),
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[&Tensor]) -> io::Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        t.write_le(w)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>, CheckpointError> {
    let n = read_u32(r)?;
    (0..n).map(|_| Tensor::read_le(r).map_err(CheckpointError::from)).collect()
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    optimizer: Option<&Optimizer>,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(model.spec())?;
    w.write_all(&(spec.len() as u64).to_le_bytes())?;
    w.write_all(&spec)?;
    write_tensors(w, &model.params())?;
    match optimizer {
        None => w.write_all(&[0])?,
        Some(Optimizer::Sgd { lr }) => {
            w.write_all(&[1])?;
            w.write_all(&lr.to_le_bytes())?;
        }
        Some(Optimizer::Adam(s)) => {
            w.write_all(&[2])?;
            for x in [s.lr, s.beta1, s.beta2, s.eps] {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&s.step.to_le_bytes())?;
            write_tensors(w, &s.first_moment.iter().collect::<Vec<_>>())?;
            write_tensors(w, &s.second_moment.iter().collect::<Vec<_>>())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Model, Option<Optimizer>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = read_u64(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let parsed: ModelSpec = serde_json::from_slice(&json)?;
    let spec = ModelSpec::new(parsed.input().clone(), parsed.layers().to_vec())?;
    let model = Model::from_params(spec, read_tensors(r)?)?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let optimizer = match tag[0] {
        0 => None,
        1 => Some(Optimizer::Sgd { lr: read_f64(r)? }),
        2 => {
            let lr = read_f64(r)?;
            let beta1 = read_f64(r)?;
            let beta2 = read_f64(r)?;
            let eps = read_f64(r)?;
            let step = read_u64(r)?;
            let first_moment = read_tensors(r)?;
            let second_moment = read_tensors(r)?;
            Some(Optimizer::Adam(AdamState { lr, beta1, beta2, eps, step, first_moment, second_moment }))
        }
        t => return Err(CheckpointError::OptimizerTag(t)),
    };
    Ok((model, optimizer))
}

pub fn save(path: impl AsRef<Path>, model: &Model, optimizer: Option<&Optimizer>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, optimizer)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Option<Optimizer>), CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
