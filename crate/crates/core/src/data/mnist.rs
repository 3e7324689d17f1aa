//! MNIST IDX files. Images carry magic 2051 and dimensions `N, 28, 28`;
//! labels carry magic 2049 and `N`. All integers are big-endian. Files may
//! be stored gzip-compressed with a `.gz` suffix.

use std::io::Read;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetPair, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;

fn format_err(file: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(file, bytes.len(), "truncated header"))
}

/// Decodes an image file into `(pixels, count, rows, cols)`.
pub fn decode_images(bytes: &[u8], file: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = read_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(file, 0, format!("bad magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = read_u32(bytes, 4, file)? as usize;
    let rows = read_u32(bytes, 8, file)? as usize;
    let cols = read_u32(bytes, 12, file)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(
            file,
            bytes.len(),
            format!("truncated: {n} images of {rows}x{cols} need {need} bytes"),
        ));
    }
    Ok((bytes[16..need].to_vec(), n, rows, cols))
}

pub fn decode_labels(bytes: &[u8], file: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(file, 0, format!("bad magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = read_u32(bytes, 4, file)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(file, bytes.len(), format!("truncated: {n} labels need {} bytes", 8 + n)));
    }
    let labels = bytes[8..8 + n].to_vec();
    if let Some(i) = labels.iter().position(|&y| y as usize >= CLASSES) {
        return Err(format_err(file, 8 + i, format!("label {} is not in 0..{CLASSES}", labels[i])));
    }
    Ok(labels)
}

pub fn encode_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads `dir/name`, falling back to `dir/name.gz`.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<(Vec<u8>, PathBuf)> {
    let plain = dir.join(name);
    if plain.exists() {
        let bytes = std::fs::read(&plain).map_err(|e| Error::io(&plain, e))?;
        return Ok((bytes, plain));
    }
    let gz = dir.join(format!("{name}.gz"));
    let file = std::fs::File::open(&gz).map_err(|e| Error::io(&plain, e))?;
    let mut bytes = Vec::new();
    flate2::read::GzDecoder::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&gz, e))?;
    Ok((bytes, gz))
}

fn read_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let (img_bytes, img_path) = read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lab_bytes, lab_path) = read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (pixels, n, rows, cols) = decode_images(&img_bytes, &img_path)?;
    let labels = decode_labels(&lab_bytes, &lab_path)?;
    if labels.len() != n {
        return Err(format_err(&lab_path, 4, format!("{} labels for {n} images", labels.len())));
    }
    Dataset::new(pixels, labels, [1, rows, cols], CLASSES, split)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<DatasetPair> {
    let dir = dir.as_ref();
    let train = read_split(dir, "train", Split::Train)?;
    let test = read_split(dir, "t10k", Split::Test)?.with_stats(train.stats.clone());
    Ok(DatasetPair { train, test })
}
