use std::path::{Path, PathBuf};

use super::{mean_std, ExperimentConfig, METRICS_COLUMNS};
use crate::error::{Error, Result};

/// One run's final top-1 error per network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub mode: String,
    pub seeds: usize,
    /// `(mean, population std)` for networks 1 and 2.
    pub error: [(f64, f64); 2],
    /// `mean(baseline) − mean(this run)` per network; positive when this
    /// run has lower error.
    pub margin: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<CompareRow>,
}

fn format_err(file: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_hash(text: &str, file: &Path) -> Result<String> {
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash: "))
        .map(str::to_string)
        .ok_or_else(|| format_err(file, 0, "missing '# config_hash:' line"))
}

/// Final-epoch top-1 error of each network in one per-seed metrics file.
fn final_errors(path: &Path, expected_hash: &str, force: bool) -> Result<[f64; 2]> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let hash = read_hash(&text, path)?;
    if hash != expected_hash && !force {
        return Err(format_err(
            path,
            0,
            format!("config hash {hash} differs from the run's {expected_hash}"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    if reader.headers()?.iter().collect::<Vec<_>>() != METRICS_COLUMNS {
        return Err(format_err(path, 0, "unexpected metrics columns"));
    }
    let mut last = [(0usize, f64::NAN); 2];
    for rec in reader.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |what: &str| format_err(path, offset, format!("bad {what}"));
        let epoch: usize = rec[1].parse().map_err(|_| bad("epoch"))?;
        let net: usize = rec[3].parse().map_err(|_| bad("net"))?;
        let top1: f64 = rec[9].parse().map_err(|_| bad("test_top1"))?;
        if !(1..=2).contains(&net) {
            return Err(bad("net"));
        }
        if last[net - 1].1.is_nan() || epoch >= last[net - 1].0 {
            last[net - 1] = (epoch, top1);
        }
    }
    if last.iter().any(|(_, e)| e.is_nan()) {
        return Err(format_err(path, 0, "no rows for one of the networks"));
    }
    Ok([last[0].1, last[1].1])
}

struct Loaded {
    label: String,
    dir_name: String,
    config: ExperimentConfig,
    errors: Vec<[f64; 2]>,
}

fn load(dir: &Path, force: bool) -> Result<Loaded> {
    let path = dir.join("resolved.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let hash = read_hash(&text, &path)?;
    let config = ExperimentConfig::from_toml(&text)?;
    let errors = config
        .seeds
        .iter()
        .map(|s| final_errors(&dir.join(format!("seed-{s}/metrics.csv")), &hash, force))
        .collect::<Result<Vec<_>>>()?;
    let dir_name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let label = if config.name.is_empty() {
        dir_name.clone()
    } else {
        config.name.clone()
    };
    Ok(Loaded {
        label,
        dir_name,
        config,
        errors,
    })
}

/// Final top-1 error of several runs, recomputed from their per-seed
/// metrics files, with margins against the run named `baseline` (matched
/// against labels, then directory names, then modes; the first run when
/// `None`). Runs must share the dataset and the number of
/// epochs. A metrics file whose config hash differs from its run's
/// `resolved.toml` is refused unless `force` is set.
pub fn compare(dirs: &[PathBuf], baseline: Option<&str>, force: bool) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    let mut runs = dirs.iter().map(|d| load(d, force)).collect::<Result<Vec<_>>>()?;
    // runs sharing a config name (e.g. after a mode override) are told
    // apart by directory
    let names: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    for r in &mut runs {
        if names.iter().filter(|n| **n == r.label).count() > 1 {
            r.label = r.dir_name.clone();
        }
    }
    let first = &runs[0];
    for (r, d) in runs.iter().zip(dirs) {
        if r.config.dataset != first.config.dataset {
            return Err(Error::InvalidArgument(format!(
                "{} uses a different dataset than {}",
                d.display(),
                dirs[0].display()
            )));
        }
        if r.config.schedule.epochs != first.config.schedule.epochs {
            return Err(Error::InvalidArgument(format!(
                "{} trains {} epochs, {} trains {}",
                d.display(),
                r.config.schedule.epochs,
                dirs[0].display(),
                first.config.schedule.epochs
            )));
        }
    }
    let summary = |r: &Loaded| -> [(f64, f64); 2] {
        [0, 1].map(|i| mean_std(&r.errors.iter().map(|e| e[i]).collect::<Vec<_>>()))
    };
    let base = match baseline {
        Some(name) => runs
            .iter()
            .find(|r| r.label == name)
            .or_else(|| runs.iter().find(|r| r.dir_name == name))
            .or_else(|| runs.iter().find(|r| r.config.mode.name() == name))
            .ok_or_else(|| Error::InvalidArgument(format!("no run labelled {name:?}")))?,
        None => first,
    };
    let base_err = summary(base);
    let rows = runs
        .iter()
        .map(|r| {
            let error = summary(r);
            CompareRow {
                label: r.label.clone(),
                mode: r.config.mode.to_string(),
                seeds: r.errors.len(),
                error,
                margin: [base_err[0].0 - error[0].0, base_err[1].0 - error[1].0],
            }
        })
        .collect();
    Ok(Comparison {
        baseline: base.label.clone(),
        rows,
    })
}

impl Comparison {
    /// One line per run: Net1 and Net2 error as `mean(std)` in percent,
    /// then the margins.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
        let mut s = format!(
            "top-1 error %, mean(std) over seeds; margin = {} minus run\n{:w$}  {:8}  {:>13}  {:>13}  {:>8}  {:>8}\n",
            self.baseline, "run", "mode", "Net1", "Net2", "margin1", "margin2"
        );
        let cell = |(m, sd): (f64, f64)| format!("{:.2}({:.2})", 100.0 * m, 100.0 * sd);
        for r in &self.rows {
            s.push_str(&format!(
                "{:w$}  {:8}  {:>13}  {:>13}  {:>+8.2}  {:>+8.2}\n",
                r.label,
                r.mode,
                cell(r.error[0]),
                cell(r.error[1]),
                100.0 * r.margin[0],
                100.0 * r.margin[1]
            ));
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run", "mode", "seeds", "net1_mean", "net1_std", "net2_mean", "net2_std", "margin1", "margin2",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.mode.clone(),
                r.seeds.to_string(),
                r.error[0].0.to_string(),
                r.error[0].1.to_string(),
                r.error[1].0.to_string(),
                r.error[1].1.to_string(),
                r.margin[0].to_string(),
                r.margin[1].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
