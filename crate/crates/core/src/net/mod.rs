//! Backbone construction, auxiliary classifier heads and parameter export.
//!
//! A [`SupervisedNet`] is a backbone plus `K` auxiliary heads. Heads attach
//! at stage outputs that are followed by a down-sampling stage, and each
//! head rebuilds the remaining stages with the backbone's block type, so
//! every input-to-classifier path crosses the same number of down-sampling
//! layers. Heads are training-only: [`SupervisedNet::export_backbone`] drops
//! them.

mod layers;
pub mod manifest;
mod spec;

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Float, Tensor};
use crate::error::{Error, Result};
use layers::{ConvBn, Linear, Stage};

pub use layers::Phase;
pub use manifest::{Dtype, EntryKind, Manifest, ManifestEntry};
pub use spec::{BackboneSpec, BlockKind, HeadSpec, HeadStyle, StageSpec};

struct AuxHead<F: Float> {
    spec: HeadSpec,
    stages: Vec<Stage<F>>,
    /// Average-pool kernel for the `apfc` style.
    pool: Option<usize>,
    classifier: Linear<F>,
}

impl<F: Float> AuxHead<F> {
    fn prefix(&self) -> String {
        format!("head{}", self.spec.location)
    }

    fn forward(&self, features: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        if let Some(k) = self.pool {
            let pooled = features.avg_pool(k)?;
            let n = pooled.shape()[0];
            let flat = pooled.reshape(&[n, pooled.numel() / n])?;
            return self.classifier.forward(&flat);
        }
        let mut h = features.clone();
        for s in &self.stages {
            h = s.forward(&h, phase)?;
        }
        self.classifier.forward(&h.global_avg_pool()?)
    }

    fn visit(&self, f: &mut layers::Visitor<'_, F>) {
        let prefix = self.prefix();
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("{prefix}.stage{}", self.spec.location + i + 1), f);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }
}

/// Backbone with `K` auxiliary classifiers plus the default classifier.
pub struct SupervisedNet<F: Float = f32> {
    spec: BackboneSpec,
    stem: ConvBn<F>,
    stages: Vec<Stage<F>>,
    classifier: Linear<F>,
    heads: Vec<AuxHead<F>>,
}

impl<F: Float> std::fmt::Debug for SupervisedNet<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SupervisedNet")
            .field("backbone", &self.spec.name)
            .field("locations", &self.locations())
            .field("params", &self.param_count())
            .finish()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<F: Float> SupervisedNet<F> {
    /// Bare backbone (`K = 0`), initialised deterministically from `seed`.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, 0);
        let stem = ConvBn::new(&mut rng, spec.in_channels, spec.stem_channels, 1)?;
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut c = spec.stem_channels;
        for s in &spec.stages {
            stages.push(Stage::new(&mut rng, s, c)?);
            c = s.channels;
        }
        let classifier = Linear::new(&mut rng, c, spec.classes)?;
        Ok(SupervisedNet {
            spec: spec.clone(),
            stem,
            stages,
            classifier,
            heads: Vec::new(),
        })
    }

    /// Adds one auxiliary head per location. Head weights depend only on
    /// `(seed, location)`, so the order of `locations` does not matter.
    pub fn attach_heads(mut self, locations: &[usize], style: HeadStyle, seed: u64) -> Result<Self> {
        let valid = self.spec.attachment_points();
        let mut seen: BTreeSet<usize> = self.locations().into_iter().collect();
        for &loc in locations {
            if !valid.contains(&loc) {
                return Err(Error::InvalidArgument(format!(
                    "location {loc} is not a down-sampling boundary of {} (valid: {valid:?})",
                    self.spec.name
                )));
            }
            if !seen.insert(loc) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate auxiliary classifier location {loc}"
                )));
            }
        }
        for &loc in locations {
            let spec = HeadSpec::for_location(&self.spec, loc, style);
            let mut rng = stream_rng(seed, 1 + loc as u64);
            let mut c = self.spec.channels_at(loc);
            let mut stages = Vec::with_capacity(spec.stages.len());
            for s in &spec.stages {
                stages.push(Stage::new(&mut rng, s, c)?);
                c = s.channels;
            }
            let (pool, fan_in) = if style == HeadStyle::Apfc {
                let side = self.spec.side_at(loc);
                let out = (1..=4).rev().find(|d| side.is_multiple_of(*d)).unwrap_or(1);
                (Some(side / out), c * out * out)
            } else {
                (None, c)
            };
            let classifier = Linear::new(&mut rng, fan_in, self.spec.classes)?;
            self.heads.push(AuxHead {
                spec,
                stages,
                pool,
                classifier,
            });
        }
        self.heads.sort_by_key(|h| h.spec.location);
        Ok(self)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Number of auxiliary classifiers.
    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn locations(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.spec.location).collect()
    }

    pub fn head_specs(&self) -> Vec<&HeadSpec> {
        self.heads.iter().map(|h| &h.spec).collect()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        match *x.shape() {
            [_, c, h, w]
                if c == self.spec.in_channels && h == self.spec.input_side && w == h =>
            {
                Ok(())
            }
            _ => Err(Error::shape(
                "forward",
                x.shape(),
                &[0, self.spec.in_channels, self.spec.input_side, self.spec.input_side],
            )),
        }
    }

    /// Logits of all `K + 1` classifiers, auxiliary heads shallow to deep,
    /// default classifier last. The trunk runs once and heads reuse its
    /// stage outputs.
    pub fn forward_all_heads(&self, x: &Tensor<F>, phase: Phase) -> Result<Vec<Tensor<F>>> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(self.stages.len() + 1);
        features.push(self.stem.forward(x, phase)?.relu());
        for s in &self.stages {
            let h = s.forward(features.last().expect("stem output"), phase)?;
            features.push(h);
        }
        let mut out = Vec::with_capacity(self.heads.len() + 1);
        for head in &self.heads {
            out.push(head.forward(&features[head.spec.location], phase)?);
        }
        let last = features.last().expect("stage output");
        out.push(self.classifier.forward(&last.global_avg_pool()?)?);
        Ok(out)
    }

    /// Default-classifier logits only.
    pub fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, phase)?.relu();
        for s in &self.stages {
            h = s.forward(&h, phase)?;
        }
        self.classifier.forward(&h.global_avg_pool()?)
    }

    fn visit_backbone(&self, f: &mut layers::Visitor<'_, F>) {
        self.stem.visit("stem", f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stage{}", i + 1), f);
        }
        self.classifier.visit("classifier", f);
    }

    fn collect(&self, include_heads: bool) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor<F>| out.push((name, t.clone()));
        self.visit_backbone(&mut push);
        if include_heads {
            for h in &self.heads {
                h.visit(&mut push);
            }
        }
        out
    }

    /// Every named tensor, heads included, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.collect(true)
    }

    /// Trainable tensors, heads included.
    pub fn parameters(&self) -> Vec<Tensor<F>> {
        self.collect(true)
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    fn manifest_of(entries: Vec<(String, Tensor<F>)>) -> Manifest {
        Manifest {
            dtype: Dtype::of::<F>(),
            entries: entries
                .into_iter()
                .map(|(name, t)| ManifestEntry {
                    name,
                    kind: if t.requires_grad() {
                        EntryKind::Param
                    } else {
                        EntryKind::Buffer
                    },
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.to_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Backbone-only manifest: no auxiliary-head tensors.
    pub fn export_backbone(&self) -> Manifest {
        Self::manifest_of(self.collect(false))
    }

    /// Manifest of every tensor including heads (used by checkpoints).
    pub fn full_manifest(&self) -> Manifest {
        Self::manifest_of(self.collect(true))
    }

    fn load_entries(&self, targets: Vec<(String, Tensor<F>)>, manifest: &Manifest) -> Result<()> {
        if targets.len() != manifest.entries.len() {
            return Err(Error::Manifest(format!(
                "expected {} tensors, manifest has {}",
                targets.len(),
                manifest.entries.len()
            )));
        }
        let by_name: HashMap<&str, &ManifestEntry> =
            manifest.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut staged = Vec::with_capacity(targets.len());
        for (name, t) in &targets {
            let e = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))?;
            if e.shape != t.shape() {
                return Err(Error::Manifest(format!(
                    "{name}: shape {:?} does not match network shape {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            staged.push(e.values.iter().map(|v| F::from_f64(*v)).collect::<Vec<F>>());
        }
        for ((_, t), values) in targets.iter().zip(staged) {
            t.assign(&values)?;
        }
        Ok(())
    }

    /// Loads backbone tensors; all names and shapes must match exactly.
    /// Nothing is written unless the whole manifest validates.
    pub fn load_backbone(&self, manifest: &Manifest) -> Result<()> {
        self.load_entries(self.collect(false), manifest)
    }

    pub fn load_full(&self, manifest: &Manifest) -> Result<()> {
        self.load_entries(self.collect(true), manifest)
    }
}

/// Numbers of down-sampling layers over all graph paths from `input` to
/// `output`. A layer counts when it is a strided convolution, a subsample
/// or an average pool whose output is spatially smaller than its operand.
/// `input` must require grad so that the graph is recorded.
pub fn path_downsamplings<F: Float>(output: &Tensor<F>, input: &Tensor<F>) -> BTreeSet<usize> {
    fn walk<F: Float>(
        t: &Tensor<F>,
        input: u64,
        memo: &mut HashMap<u64, BTreeSet<usize>>,
    ) -> BTreeSet<usize> {
        if t.id() == input {
            return BTreeSet::from([0]);
        }
        if let Some(s) = memo.get(&t.id()) {
            return s.clone();
        }
        let mut out = BTreeSet::new();
        let reducing = matches!(t.op_name(), "conv2d" | "subsample" | "avg_pool");
        for p in t.parents() {
            let below = walk(&p, input, memo);
            let step = usize::from(
                reducing && t.shape().len() == 4 && p.shape().len() == 4 && t.shape()[2] < p.shape()[2],
            );
            out.extend(below.into_iter().map(|c| c + step));
        }
        memo.insert(t.id(), out.clone());
        out
    }
    walk(output, input.id(), &mut HashMap::new())
}
