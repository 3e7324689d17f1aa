use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Audit record of a label corruption: `(index, old_label, new_label)`
/// triples sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionPlan {
    pub ratio: f64,
    pub seed: u64,
    pub entries: Vec<(usize, u8, u8)>,
}

/// Replaces exactly `round(ratio * N)` labels with a label drawn uniformly
/// from the other `M - 1` classes.
pub fn corrupt_labels(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, CorruptionPlan)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("corruption ratio {ratio} is not in [0, 1]")));
    }
    if ds.classes < 2 {
        return Err(Error::InvalidArgument("label corruption needs at least 2 classes".into()));
    }
    let n = ds.len();
    let count = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    let mut out = ds.clone();
    let entries = picked
        .into_iter()
        .map(|i| {
            let old = ds.labels[i];
            let r = rng.random_range(0..ds.classes as u8 - 1);
            let new = if r >= old { r + 1 } else { r };
            out.labels[i] = new;
            (i, old, new)
        })
        .collect();
    Ok((out, CorruptionPlan { ratio, seed, entries }))
}

impl CorruptionPlan {
    pub fn to_text(&self) -> String {
        let mut s = format!("# ratio {} seed {}\n", self.ratio, self.seed);
        for (i, old, new) in &self.entries {
            writeln!(s, "{i} {old} {new}").unwrap();
        }
        s
    }

    /// Parses [`CorruptionPlan::to_text`] output; errors carry the byte
    /// offset of the offending line.
    pub fn from_text(text: &str, file: &Path) -> Result<Self> {
        let bad = |offset: usize, message: String| Error::Format {
            file: file.to_path_buf(),
            offset: offset as u64,
            message,
        };
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').map(|l| {
            let start = offset;
            offset += l.len();
            (start, l.trim_end_matches(['\n', '\r']))
        });
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        let words: Vec<&str> = header.split_whitespace().collect();
        let (ratio, seed) = match words.as_slice() {
            ["#", "ratio", r, "seed", s] => (
                r.parse().map_err(|_| bad(0, format!("bad ratio {r:?}")))?,
                s.parse().map_err(|_| bad(0, format!("bad seed {s:?}")))?,
            ),
            _ => return Err(bad(0, "expected '# ratio <r> seed <s>' header".into())),
        };
        let mut entries = Vec::new();
        for (at, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [i, o, n] => i.parse().ok().zip(o.parse().ok()).zip(n.parse().ok()),
                _ => None,
            };
            let ((i, o), n) = parsed.ok_or_else(|| bad(at, format!("expected 'index old new', got {line:?}")))?;
            entries.push((i, o, n));
        }
        Ok(CorruptionPlan { ratio, seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
