//! MNIST-family IDX files and the padded image sets built from them.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const RAW_SIDE: usize = 28;
pub const PADDED_SIDE: usize = 32;
const BORDER: usize = (PADDED_SIDE - RAW_SIDE) / 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file is {actual} bytes, header implies {expected}")]
    Length { expected: usize, actual: usize },
    #[error("header too short ({0} bytes)")]
    Header(usize),
    #[error("image dimensions {rows}x{cols}, expected 28x28")]
    Dimensions { rows: usize, cols: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not a digit class")]
    LabelRange { index: usize, label: u8 },
    #[error("empty data set")]
    Empty,
    #[error("batch size must be at least 1")]
    BatchSize,
}

/// Raw 28×28 images as stored in the file, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn be_u32(bytes: &[u8], word: usize) -> u32 {
    u32::from_be_bytes(bytes[4 * word..4 * word + 4].try_into().unwrap())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    if bytes.len() < 16 {
        return Err(DataError::Header(bytes.len()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IMAGES_MAGIC, found: magic });
    }
    let (count, rows, cols) =
        (be_u32(bytes, 1) as usize, be_u32(bytes, 2) as usize, be_u32(bytes, 3) as usize);
    if rows != RAW_SIDE || cols != RAW_SIDE {
        return Err(DataError::Dimensions { rows, cols });
    }
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(DataError::Length { expected, actual: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    if bytes.len() < 8 {
        return Err(DataError::Header(bytes.len()));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: LABELS_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 1) as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(DataError::Length { expected, actual: bytes.len() });
    }
    Ok(bytes[8..].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages, DataError> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, DataError> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// 28×28 images centred in a 32×32 zero frame. Pixels are kept as bytes and
/// divided by 255 on access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedImages {
    count: usize,
    bytes: Vec<u8>,
}

impl PaddedImages {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = PADDED_SIDE * PADDED_SIDE;
        &self.bytes[i * n..(i + 1) * n]
    }

    /// Row-major 32×32 image with values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw(i).iter().map(|&b| f64::from(b) / 255.0).collect()
    }
}

pub fn pad_and_normalize(raw: &IdxImages) -> PaddedImages {
    let n = PADDED_SIDE * PADDED_SIDE;
    let mut bytes = vec![0u8; raw.count * n];
    for i in 0..raw.count {
        let src = raw.image(i);
        let dst = &mut bytes[i * n..(i + 1) * n];
        for r in 0..RAW_SIDE {
            let row = (r + BORDER) * PADDED_SIDE + BORDER;
            dst[row..row + RAW_SIDE].copy_from_slice(&src[r * RAW_SIDE..(r + 1) * RAW_SIDE]);
        }
    }
    PaddedImages { count: raw.count, bytes }
}

/// Padded images with digit-class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImageSet {
    pub images: PaddedImages,
    pub labels: Vec<u8>,
    /// SHA-256 of the image and label files the set was read from.
    pub provenance: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(raw: &IdxImages, labels: Vec<u8>) -> Result<Self, DataError> {
        if raw.count != labels.len() {
            return Err(DataError::CountMismatch { images: raw.count, labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(DataError::LabelRange { index, label });
        }
        Ok(LabeledImageSet { images: pad_and_normalize(raw), labels, provenance: Vec::new() })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self, DataError> {
        let image_bytes = read_file(images.as_ref())?;
        let label_bytes = read_file(labels.as_ref())?;
        let mut set = LabeledImageSet::new(&parse_idx_images(&image_bytes)?, parse_idx_labels(&label_bytes)?)?;
        set.provenance = vec![sha256_hex(&image_bytes), sha256_hex(&label_bytes)];
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn truncated(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        let per = PADDED_SIDE * PADDED_SIDE;
        LabeledImageSet {
            images: PaddedImages { count: n, bytes: self.images.bytes[..n * per].to_vec() },
            labels: self.labels[..n].to_vec(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Seeded shuffle of `0..len` cut into batches; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if len == 0 {
        return Err(DataError::Empty);
    }
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
