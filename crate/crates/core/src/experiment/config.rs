use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::SgdConfig;
use crate::data::SyntheticSpec;
use crate::distill::{LossWeights, Measure, Mode, ObjectiveConfig};
use crate::error::{ConfigIssue, Error, Result};
use crate::net::{BackboneSpec, HeadStyle};
use crate::trainer::{Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// CIFAR-10 binary batches in `dir`.
    Cifar10,
    /// MNIST IDX files (optionally gzipped) in `dir`.
    Mnist,
    /// Generated data described by `synthetic`.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Stratified training subset size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    /// Fraction of training labels replaced by wrong labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_ratio: Option<f64>,
    #[serde(default)]
    pub corrupt_seed: u64,
}

impl DatasetConfig {
    /// `(channels, side, classes)` known without reading any file.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            DatasetKind::Cifar10 => Some((3, 32, 10)),
            DatasetKind::Mnist => Some((1, 28, 10)),
            DatasetKind::Synthetic => self.synthetic.as_ref().map(|s| (s.channels, s.side, s.classes)),
        }
    }
}

/// A preset name (`tinyres8`, `tinyres14`) or a full inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneRef {
    Preset(String),
    Inline(BackboneSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: BackboneRef,
    /// Auxiliary classifier locations (stage outputs, 0 = stem).
    #[serde(default)]
    pub locations: Vec<usize>,
    #[serde(default)]
    pub head_style: HeadStyle,
    /// Backbone manifest to start from, e.g. a trained KD teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_eval_batch() -> usize {
    500
}
fn yes() -> bool {
    true
}

/// One experiment: a dataset, a network pair, an objective and a training
/// recipe, repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub precision: Precision,
    /// Overrides the mode's default measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<Measure>,
    /// In `dcm-2`, keep the default-classifier pair weighted by β.
    #[serde(default = "yes")]
    pub dcm2_last_pair: bool,
    pub dataset: DatasetConfig,
    pub nets: Vec<NetConfig>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: SgdConfig,
    pub schedule: Schedule,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub subset: Option<usize>,
    pub corrupt_ratio: Option<f64>,
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            let path = line.map_or_else(|| "<toml>".to_string(), |l| format!("<toml line {l}>"));
            Error::Config(vec![issue(path, e.message().to_string())])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
            // switching to a mode without auxiliary classifiers drops them
            if !m.uses_heads() {
                self.nets.iter_mut().for_each(|n| n.locations.clear());
            }
        }
        if let Some(n) = o.subset {
            self.dataset.subset = Some(n);
        }
        if let Some(r) = o.corrupt_ratio {
            self.dataset.corrupt_ratio = Some(r);
        }
    }

    /// Backbone of net `i` with the dataset's input geometry.
    pub fn backbone(&self, i: usize) -> Result<BackboneSpec> {
        let (c, side, classes) = self
            .dataset
            .geometry()
            .ok_or_else(|| Error::InvalidArgument("dataset geometry is unknown".into()))?;
        match &self.nets[i].backbone {
            BackboneRef::Preset(name) => BackboneSpec::preset(name, c, classes)
                .map(|s| s.with_input_side(side))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown backbone preset {name:?}"))),
            BackboneRef::Inline(spec) => Ok(spec.clone()),
        }
    }

    /// Every violated invariant, each addressed by its field path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push(issue("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            out.push(issue("seeds", "seeds must be distinct"));
        }
        if self.batch_size == 0 {
            out.push(issue("batch_size", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            out.push(issue("eval_batch_size", "must be at least 1"));
        }
        if let Err(e) = self.weights.validate() {
            out.push(issue("weights", e.to_string()));
        }
        if let Err(e) = self.optimizer.validate() {
            out.push(issue("optimizer", e.to_string()));
        }
        if let Err(e) = self.schedule.validate() {
            out.push(issue("schedule", e.to_string()));
        }

        let d = &self.dataset;
        match d.kind {
            DatasetKind::Cifar10 | DatasetKind::Mnist if d.dir.is_none() => {
                out.push(issue("dataset.dir", "required for this dataset kind"));
            }
            DatasetKind::Synthetic if d.synthetic.is_none() => {
                out.push(issue("dataset.synthetic", "required when kind = \"synthetic\""));
            }
            _ => {}
        }
        if let Some(s) = &d.synthetic {
            if s.classes < 2 || s.train == 0 || s.test == 0 || s.channels == 0 || s.side == 0 {
                out.push(issue(
                    "dataset.synthetic",
                    "needs at least 2 classes and non-empty splits and images",
                ));
            }
        }
        if d.subset == Some(0) {
            out.push(issue("dataset.subset", "must be at least 1"));
        }
        if let Some(r) = d.corrupt_ratio {
            if !(0.0..=1.0).contains(&r) {
                out.push(issue("dataset.corrupt_ratio", format!("{r} is not in [0, 1]")));
            }
        }

        if self.nets.len() != 2 {
            out.push(issue("nets", format!("exactly 2 networks are required, got {}", self.nets.len())));
            return out;
        }
        let geometry = d.geometry();
        let mut ks = Vec::new();
        for i in 0..2 {
            let path = format!("nets[{i}]");
            let spec = match self.backbone(i) {
                Ok(s) => s,
                Err(e) => {
                    out.push(issue(format!("{path}.backbone"), e.to_string()));
                    continue;
                }
            };
            if let Err(e) = spec.validate() {
                out.push(issue(format!("{path}.backbone"), e.to_string()));
            }
            if let Some((c, side, classes)) = geometry {
                if (spec.in_channels, spec.input_side, spec.classes) != (c, side, classes) {
                    out.push(issue(
                        format!("{path}.backbone"),
                        format!(
                            "expects {}x{}x{} inputs and {} classes, dataset has {c}x{side}x{side} and {classes}",
                            spec.in_channels, spec.input_side, spec.input_side, spec.classes
                        ),
                    ));
                }
            }
            let valid = spec.attachment_points();
            for &loc in &self.nets[i].locations {
                if !valid.contains(&loc) {
                    out.push(issue(
                        format!("{path}.locations"),
                        format!("{loc} is not a down-sampling boundary (valid: {valid:?})"),
                    ));
                }
            }
            let mut locs = self.nets[i].locations.clone();
            locs.sort_unstable();
            locs.dedup();
            if locs.len() != self.nets[i].locations.len() {
                out.push(issue(format!("{path}.locations"), "locations must be distinct"));
            }
            ks.push(locs.len());
        }
        if !self.mode.uses_heads() {
            for (i, &k) in ks.iter().enumerate() {
                if k > 0 {
                    out.push(issue(
                        format!("nets[{i}].locations"),
                        format!("mode {} uses no auxiliary classifiers; locations must be empty", self.mode),
                    ));
                }
            }
        } else if ks.len() == 2 {
            if ks.contains(&0) {
                out.push(issue(
                    "nets",
                    format!("mode {} needs auxiliary classifiers on both networks", self.mode),
                ));
            } else if self.mode.couples() && ks[0] != ks[1] {
                out.push(issue(
                    "nets",
                    format!("both networks need the same number of classifiers, got {} and {}", ks[0], ks[1]),
                ));
            }
        }
        out
    }

    /// Validated copy with mode-implied settings made explicit: weights the
    /// mode does not read are zero and the measure is filled in.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let issues = self.issues();
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let mut r = self.clone();
        r.weights = self.weights.restricted_to(self.mode, self.dcm2_last_pair);
        r.measure = Some(self.measure.unwrap_or(self.mode.default_measure()));
        for n in &mut r.nets {
            n.locations.sort_unstable();
        }
        Ok(r)
    }

    /// SHA-256 of the configuration with seeds and output directory
    /// removed. Runs with equal hashes are comparable.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            mode: self.mode,
            weights: self.weights,
            measure: self.measure.unwrap_or(self.mode.default_measure()),
            dcm2_last_pair: self.dcm2_last_pair,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective(),
            sgd: self.optimizer,
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            augment: self.augment,
            divergence_checkpoint: None,
        }
    }
}
