//! Multi-seed experiment runs, metrics files and run comparison.
//!
//! A run directory holds:
//!
//! ```text
//! resolved.toml            the exact configuration used
//! subset.txt               training indices, when a subset is drawn
//! corruption.txt           corruption triples, when labels are corrupted
//! seed-<s>/metrics.csv     one row per epoch per network
//! seed-<s>/checkpoint.bin  state after the latest epoch
//! seed-<s>/net1.manifest   exported backbones (no auxiliary heads)
//! seed-<s>/net2.manifest
//! seed-<s>/FAILED          error message, if the seed failed
//! summary.csv, summary.txt final and best error, mean and population std
//! ```
//!
//! CSV files start with a `# config_hash: <sha256>` line.

mod compare;
mod config;

use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Float;
use crate::data::{cifar, corrupt_labels, mnist, stratified_subset, synthetic_pair, CorruptionPlan, DatasetPair};
use crate::error::{Error, Result};
use crate::net::{Dtype, Manifest, SupervisedNet};
use crate::trainer::{train_joint, EpochControl, HistoryRow, TrainState};

pub use compare::{compare, CompareRow, Comparison};
pub use config::{BackboneRef, DatasetConfig, DatasetKind, ExperimentConfig, NetConfig, Overrides, Precision};

pub const METRICS_COLUMNS: [&str; 10] = [
    "seed", "epoch", "lr", "net", "loss_total", "loss_c", "loss_ds", "loss_dcm1", "loss_dcm2", "test_top1",
];

/// Datasets after subset selection and label corruption.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub pair: DatasetPair,
    pub subset: Option<Vec<usize>>,
    pub corruption: Option<CorruptionPlan>,
}

pub fn prepare_data(cfg: &DatasetConfig) -> Result<PreparedData> {
    let missing = |what: &str| Error::Config(vec![crate::ConfigIssue {
        path: format!("dataset.{what}"),
        message: "required for this dataset kind".into(),
    }]);
    let mut pair = match cfg.kind {
        DatasetKind::Cifar10 => cifar::load_cifar10(cfg.dir.as_ref().ok_or_else(|| missing("dir"))?)?,
        DatasetKind::Mnist => mnist::load_mnist(cfg.dir.as_ref().ok_or_else(|| missing("dir"))?)?,
        DatasetKind::Synthetic => synthetic_pair(cfg.synthetic.as_ref().ok_or_else(|| missing("synthetic"))?)?,
    };
    let mut subset = None;
    if let Some(n) = cfg.subset {
        let (train, idx) = stratified_subset(&pair.train, n, cfg.subset_seed)?;
        pair.test.stats = train.stats.clone();
        pair.train = train;
        subset = Some(idx);
    }
    let mut corruption = None;
    if let Some(ratio) = cfg.corrupt_ratio {
        let (train, plan) = corrupt_labels(&pair.train, ratio, cfg.corrupt_seed)?;
        pair.train = train;
        corruption = Some(plan);
    }
    Ok(PreparedData { pair, subset, corruption })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue seeds from `checkpoint.bin` where one exists.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    pub final_top1: [f64; 2],
    pub best_top1: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSummary {
    pub net: usize,
    pub seeds: usize,
    pub final_mean: f64,
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<NetSummary>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_bytes(hash: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut out = format!("# config_hash: {hash}\n").into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    drop(w);
    Ok(out)
}

pub fn metrics_csv(hash: &str, seed: u64, history: &[HistoryRow]) -> Result<Vec<u8>> {
    let rows = history
        .iter()
        .map(|r| {
            let t = &r.terms;
            vec![
                seed.to_string(),
                r.epoch.to_string(),
                r.lr.to_string(),
                r.net.to_string(),
                t.total.to_string(),
                t.classification.to_string(),
                t.deep_supervision.to_string(),
                t.same_staged.to_string(),
                t.cross_staged.to_string(),
                r.test_top1.to_string(),
            ]
        })
        .collect();
    csv_bytes(hash, &METRICS_COLUMNS, rows)
}

/// Seed for network `i` (0 or 1) of a run seed.
pub fn net_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 + 1)
}

/// Builds network `i` of a resolved configuration, heads and initial
/// weights included.
pub fn build_net<F: Float>(config: &ExperimentConfig, i: usize, seed: u64) -> Result<SupervisedNet<F>> {
    let spec = config.backbone(i)?;
    let nc = &config.nets[i];
    let s = net_seed(seed, i);
    let mut net = SupervisedNet::build(&spec, s)?;
    if !nc.locations.is_empty() {
        net = net.attach_heads(&nc.locations, nc.head_style, s)?;
    }
    if let Some(path) = &nc.init {
        net.load_backbone(&Manifest::load(path)?)?;
    }
    Ok(net)
}

fn run_seed<F: Float>(
    config: &ExperimentConfig,
    hash: &str,
    data: &PreparedData,
    seed: u64,
    opts: &RunOptions,
    log: &mut dyn FnMut(&str),
) -> Result<SeedResult> {
    let dir = config.out_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    let ckpt = dir.join("checkpoint.bin");
    let metrics = dir.join("metrics.csv");
    let (a, b) = (build_net::<F>(config, 0, seed)?, build_net::<F>(config, 1, seed)?);
    let mut state = if opts.resume && ckpt.exists() {
        let s = TrainState::load(&ckpt, a, b)?;
        log(&format!("seed {seed}: resuming at epoch {}", s.epoch));
        s
    } else {
        TrainState::new(a, b, config.optimizer, seed)?
    };
    let mut tc = config.train_config();
    tc.divergence_checkpoint = Some(dir.join("diverged.bin"));

    let epochs = config.schedule.epochs;
    let outcome = train_joint(&mut state, &data.pair.train, &data.pair.test, &tc, &mut |s, rows| {
        write(&metrics, metrics_csv(hash, seed, &s.history)?)?;
        s.save(&ckpt)?;
        let errs: Vec<String> = rows.iter().map(|r| format!("{:.2}%", 100.0 * r.test_top1)).collect();
        log(&format!(
            "seed {seed} epoch {}/{epochs} lr {} loss {:.4}/{:.4} top-1 error {}",
            s.epoch,
            rows[0].lr,
            rows[0].terms.total,
            rows[1].terms.total,
            errs.join("/")
        ));
        Ok(EpochControl::Continue)
    });
    if let Err(e) = outcome {
        write(&failed, format!("{e}\n"))?;
        return Err(e);
    }
    // Also covers resuming an already finished seed.
    write(&metrics, metrics_csv(hash, seed, &state.history)?)?;
    for (i, net) in state.nets.iter().enumerate() {
        let path = dir.join(format!("net{}.manifest", i + 1));
        net.export_backbone().with_dtype(Dtype::F32).save(&path)?;
    }
    let last = |net: usize| {
        state
            .history
            .iter()
            .rev()
            .find(|r| r.net == net)
            .map_or(f64::NAN, |r| r.test_top1)
    };
    let best = |net: usize| {
        state
            .history
            .iter()
            .filter(|r| r.net == net)
            .map(|r| r.test_top1)
            .fold(f64::INFINITY, f64::min)
    };
    Ok(SeedResult {
        seed,
        final_top1: [last(1), last(2)],
        best_top1: [best(1), best(2)],
        history: state.history,
    })
}

fn summarize(seeds: &[SeedResult]) -> Vec<NetSummary> {
    (0..2)
        .map(|i| {
            let finals: Vec<f64> = seeds.iter().map(|s| s.final_top1[i]).collect();
            let bests: Vec<f64> = seeds.iter().map(|s| s.best_top1[i]).collect();
            let (final_mean, final_std) = mean_std(&finals);
            let (best_mean, best_std) = mean_std(&bests);
            NetSummary {
                net: i + 1,
                seeds: seeds.len(),
                final_mean,
                final_std,
                best_mean,
                best_std,
            }
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 6] = ["net", "seeds", "final_top1_mean", "final_top1_std", "best_top1_mean", "best_top1_std"];

fn write_summary(dir: &Path, hash: &str, config: &ExperimentConfig, summary: &[NetSummary]) -> Result<()> {
    let rows = summary
        .iter()
        .map(|s| {
            vec![
                s.net.to_string(),
                s.seeds.to_string(),
                s.final_mean.to_string(),
                s.final_std.to_string(),
                s.best_mean.to_string(),
                s.best_std.to_string(),
            ]
        })
        .collect();
    write(&dir.join("summary.csv"), csv_bytes(hash, &SUMMARY_COLUMNS, rows)?)?;
    let mut text = format!(
        "mode {}  seeds {:?}  epochs {}\ntop-1 error %, mean(std) over seeds\n",
        config.mode, config.seeds, config.schedule.epochs
    );
    for s in summary {
        text.push_str(&format!(
            "net{}  final {:.2}({:.2})  best {:.2}({:.2})\n",
            s.net,
            100.0 * s.final_mean,
            100.0 * s.final_std,
            100.0 * s.best_mean,
            100.0 * s.best_std
        ));
    }
    write(&dir.join("summary.txt"), text)
}

/// Trains every seed of `config` and writes the run directory. The first
/// failing seed stops the run; its directory keeps the metrics written so
/// far and a `FAILED` marker.
pub fn run(config: &ExperimentConfig, opts: &RunOptions, log: &mut dyn FnMut(&str)) -> Result<RunRecord> {
    let config = config.resolve()?;
    let hash = config.hash();
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(
        &dir.join("resolved.toml"),
        format!("# config_hash: {hash}\n{}", config.to_toml()),
    )?;

    let data = prepare_data(&config.dataset)?;
    if let Some(idx) = &data.subset {
        let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
        write(&dir.join("subset.txt"), text)?;
    }
    if let Some(plan) = &data.corruption {
        plan.save(&dir.join("corruption.txt"))?;
    }
    log(&format!(
        "{} train / {} test samples, {} classes, config {}",
        data.pair.train.len(),
        data.pair.test.len(),
        data.pair.train.classes,
        &hash[..12]
    ));

    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let result = match config.precision {
            Precision::F32 => run_seed::<f32>(&config, &hash, &data, seed, opts, log)?,
            Precision::F64 => run_seed::<f64>(&config, &hash, &data, seed, opts, log)?,
        };
        seeds.push(result);
    }
    let summary = summarize(&seeds);
    write_summary(&dir, &hash, &config, &summary)?;
    Ok(RunRecord {
        config_hash: hash,
        config,
        seeds,
        summary,
    })
}

/// Exports the backbone of network `net` (1 or 2) from a checkpoint, as an
/// f32 manifest without auxiliary heads.
pub fn export(config: &ExperimentConfig, checkpoint: &Path, net: usize, out: &Path) -> Result<Manifest> {
    if !(1..=2).contains(&net) {
        return Err(Error::InvalidArgument(format!("network must be 1 or 2, got {net}")));
    }
    let config = config.resolve()?;
    let manifest = match config.precision {
        Precision::F32 => export_as::<f32>(&config, checkpoint, net)?,
        Precision::F64 => export_as::<f64>(&config, checkpoint, net)?,
    };
    manifest.save(out)?;
    Ok(manifest)
}

fn export_as<F: Float>(config: &ExperimentConfig, checkpoint: &Path, net: usize) -> Result<Manifest> {
    let (a, b) = (build_net::<F>(config, 0, 0)?, build_net::<F>(config, 1, 0)?);
    let state = TrainState::load(checkpoint, a, b)?;
    Ok(state.nets[net - 1].export_backbone().with_dtype(Dtype::F32))
}

/// Seed directories of a run, in seed order.
pub fn seed_dirs(run_dir: &Path, config: &ExperimentConfig) -> Vec<PathBuf> {
    config.seeds.iter().map(|s| run_dir.join(format!("seed-{s}"))).collect()
}
