//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::path::Path;

use super::{Dataset, DatasetPair, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const CLASSES: usize = 10;
pub const RECORD_LEN: usize = 1 + CHANNELS * SIDE * SIDE;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Decodes one batch file's bytes into `(images, labels)`.
pub fn decode_records(bytes: &[u8], file: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let whole = bytes.len() / RECORD_LEN * RECORD_LEN;
    if whole != bytes.len() || bytes.is_empty() {
        return Err(Error::Format {
            file: file.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "truncated record: {} bytes is not a positive multiple of {RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut images = Vec::with_capacity(n * (RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::Format {
                file: file.to_path_buf(),
                offset: (i * RECORD_LEN) as u64,
                message: format!("label byte {} is not in 0..{CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

/// Inverse of [`decode_records`].
pub fn encode_records(images: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * RECORD_LEN);
    for (img, &y) in images.chunks_exact(RECORD_LEN - 1).zip(labels) {
        out.push(y);
        out.extend_from_slice(img);
    }
    out
}

fn read_split(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (img, lab) = decode_records(&bytes, &path)?;
        images.extend(img);
        labels.extend(lab);
    }
    Dataset::new(images, labels, [CHANNELS, SIDE, SIDE], CLASSES, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`. The test
/// split carries the training split's normalization constants.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<DatasetPair> {
    let dir = dir.as_ref();
    let train = read_split(dir, &TRAIN_FILES, Split::Train)?;
    let test = read_split(dir, &[TEST_FILE], Split::Test)?.with_stats(train.stats.clone());
    Ok(DatasetPair { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.push((i % 10) as u8);
            bytes.extend((0..RECORD_LEN - 1).map(|j| ((i * 7919 + j * 31) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = records(7);
        let (img, lab) = decode_records(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(lab, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(encode_records(&img, &lab), bytes);
    }

    #[test]
    fn truncated_file_names_offset() {
        let mut bytes = records(3);
        bytes.truncate(2 * RECORD_LEN + 100);
        let msg = decode_records(&bytes, Path::new("data_batch_9.bin"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("data_batch_9.bin") && msg.contains("offset 6146"), "{msg}");
    }

    #[test]
    fn bad_label_names_record_offset() {
        let mut bytes = records(3);
        bytes[RECORD_LEN] = 42;
        let msg = decode_records(&bytes, Path::new("b.bin")).unwrap_err().to_string();
        assert!(msg.contains("offset 3073"), "{msg}");
    }
}
