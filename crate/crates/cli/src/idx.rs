//! Big-endian IDX files, the MNIST distribution format.

use std::path::{Path, PathBuf};

use adjmove::network::Dataset;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{}: bad magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated, need {expected} bytes but the file has {got}", path.display())]
    Truncated { path: PathBuf, expected: usize, got: usize },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Dataset(#[from] adjmove::Error),
}

/// Decoded image file, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Images {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

fn header(bytes: &[u8], path: &Path, magic: u32, words: usize) -> Result<Vec<usize>, IdxError> {
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("four bytes"));
    if bytes.len() >= 4 && word(0) != magic {
        return Err(IdxError::BadMagic { path: path.into(), expected: magic, found: word(0) });
    }
    let need = 4 * words;
    if bytes.len() < need {
        return Err(IdxError::Truncated { path: path.into(), expected: need, got: bytes.len() });
    }
    Ok((1..words).map(|i| word(i) as usize).collect())
}

fn body<'a>(bytes: &'a [u8], path: &Path, offset: usize, len: usize) -> Result<&'a [u8], IdxError> {
    bytes.get(offset..offset + len).ok_or(IdxError::Truncated { path: path.into(), expected: offset + len, got: bytes.len() })
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Images, IdxError> {
    let h = header(bytes, path, IMAGES_MAGIC, 4)?;
    let (count, rows, cols) = (h[0], h[1], h[2]);
    let raw = body(bytes, path, 16, count * rows * cols)?;
    Ok(Images { count, rows, cols, pixels: raw.iter().map(|&b| b as f32 / 255.0).collect() })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    let count = header(bytes, path, LABELS_MAGIC, 2)?[0];
    Ok(body(bytes, path, 8, count)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io { path: path.into(), source })
}

/// Reads an image file and its label file into a dataset.
pub fn ingest_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let im = parse_images(&read(images)?, images)?;
    let lb = parse_labels(&read(labels)?, labels)?;
    if im.count != lb.len() {
        return Err(IdxError::CountMismatch { images: im.count, labels: lb.len() });
    }
    Ok(Dataset::new(im.rows, im.cols, im.pixels, lb)?)
}

/// Train and test sets from a directory holding the four uncompressed
/// MNIST files under their standard names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), IdxError> {
    Ok((
        ingest_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
        ingest_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
    ))
}

/// Encodes images as an IDX file. Pixels are rescaled to bytes.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    let count = pixels.len() / (rows * cols).max(1);
    for w in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
