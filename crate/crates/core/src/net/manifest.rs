//! Parameter manifests: a plain-text header listing every tensor followed by
//! the concatenated little-endian values.
//!
//! ```text
//! dcm-manifest v1
//! dtype f32
//! entries 3
//! stem.conv.weight param 16x3x3x3
//! stem.bn.running_mean buffer 16
//! classifier.bias param 10
//! end
//! <binary payload>
//! ```
//!
//! `param` entries are trainable; `buffer` entries are batch-norm running
//! statistics. Values appear in header order, row-major.

use std::fs;
use std::path::Path;

use crate::autograd::Float;
use crate::error::{Error, Result};

const MAGIC: &str = "dcm-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<F: Float>() -> Self {
        if F::BYTES == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dtype: Dtype,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.values.len())
            .sum()
    }

    /// Same entries stored at another precision.
    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        if dtype == Dtype::F32 {
            for e in &mut self.entries {
                e.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        self.dtype = dtype;
        self
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\ndtype {}\nentries {}\n", self.dtype.name(), self.entries.len());
        for e in &self.entries {
            let kind = match e.kind {
                EntryKind::Param => "param",
                EntryKind::Buffer => "buffer",
            };
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("{} {kind} {}\n", e.name, dims.join("x")));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for e in &self.entries {
            for v in &e.values {
                match self.dtype {
                    Dtype::F32 => (*v as f32).write_le(&mut out),
                    Dtype::F64 => v.write_le(&mut out),
                }
            }
        }
        out
    }

    /// Parses a manifest; `source` names the input in error messages.
    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Format {
            file: source.to_path_buf(),
            offset: offset as u64,
            message,
        };
        let mut pos = 0usize;
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            let rest = &bytes[pos.min(bytes.len())..];
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| err(pos, format!("truncated header while reading {what}")))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| err(pos, "header is not UTF-8".into()))?
                .to_string();
            let at = pos;
            pos += nl + 1;
            Ok((at, line))
        };

        let (at, magic) = next_line("magic")?;
        if magic != MAGIC {
            return Err(err(at, format!("bad magic {magic:?}")));
        }
        let (at, dtype_line) = next_line("dtype")?;
        let dtype = match dtype_line.as_str() {
            "dtype f32" => Dtype::F32,
            "dtype f64" => Dtype::F64,
            other => return Err(err(at, format!("unsupported dtype line {other:?}"))),
        };
        let (at, count_line) = next_line("entry count")?;
        let count: usize = count_line
            .strip_prefix("entries ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(at, format!("bad entry count line {count_line:?}")))?;

        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (at, line) = next_line("entry")?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, kind, dims] = parts[..] else {
                return Err(err(at, format!("bad entry line {line:?}")));
            };
            let kind = match kind {
                "param" => EntryKind::Param,
                "buffer" => EntryKind::Buffer,
                _ => return Err(err(at, format!("bad entry kind {kind:?}"))),
            };
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(at, format!("bad shape {dims:?}")))?
            };
            headers.push((name.to_string(), kind, shape));
        }
        let (at, end) = next_line("end marker")?;
        if end != "end" {
            return Err(err(at, format!("expected end marker, got {end:?}")));
        }

        let width = dtype.bytes();
        let mut entries = Vec::with_capacity(headers.len());
        for (name, kind, shape) in headers {
            let n: usize = shape.iter().product();
            let len = n * width;
            let raw = bytes
                .get(pos..pos + len)
                .ok_or_else(|| err(pos, format!("payload truncated in {name}")))?;
            let values = raw
                .chunks(width)
                .map(|c| match dtype {
                    Dtype::F32 => f32::read_le(c) as f64,
                    Dtype::F64 => f64::read_le(c),
                })
                .collect();
            pos += len;
            entries.push(ManifestEntry {
                name,
                kind,
                shape,
                values,
            });
        }
        if pos != bytes.len() {
            return Err(err(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Manifest { dtype, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            dtype: Dtype::F32,
            entries: vec![
                ManifestEntry {
                    name: "w".into(),
                    kind: EntryKind::Param,
                    shape: vec![2, 3],
                    values: vec![0.5, -1.0, 2.0, 3.25, 0.0, 1.0],
                },
                ManifestEntry {
                    name: "s".into(),
                    kind: EntryKind::Buffer,
                    shape: vec![1],
                    values: vec![7.0],
                },
            ],
        }
    }

    #[test]
    fn header_is_plain_text() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("dcm-manifest v1\ndtype f32\nentries 2\nw param 2x3\ns buffer 1\nend\n"));
        assert_eq!(bytes.len(), text.find("end\n").unwrap() + 4 + 7 * 4);
    }

    #[test]
    fn round_trip_and_counts() {
        let m = sample();
        let back = Manifest::from_bytes(&m.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.param_count(), 6);
    }

    #[test]
    fn truncated_payload_is_error() {
        let bytes = sample().to_bytes();
        let err = Manifest::from_bytes(&bytes[..bytes.len() - 1], Path::new("m.bin")).unwrap_err();
        assert!(err.to_string().contains("m.bin"), "{err}");
    }
}
