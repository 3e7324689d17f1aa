//! Joint training of two networks, evaluation and checkpoints.
//!
//! Every iteration draws one batch that both networks see. Each network
//! builds its knowledge set from the current parameters, each objective is
//! formed against the other network's detached knowledge, both losses are
//! back-propagated and only then are both optimizers stepped.

mod checkpoint;
mod schedule;

use std::path::PathBuf;

use crate::autograd::{Float, OptimizerState, SgdConfig, Tensor};
use crate::data::{eval_batches, make_batch, BatchIter, Dataset};
use crate::distill::{classification_loss, dcm_objective, KnowledgeSet, LossTerms, ObjectiveConfig};
use crate::error::{Error, Result};
use crate::net::{Phase, SupervisedNet};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{Schedule, ScheduleKind};

/// Settings shared by both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Random crop and flip on training batches.
    pub augment: bool,
    /// Written with the last finite state when a loss turns non-finite.
    pub divergence_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig, schedule: Schedule, batch_size: usize) -> Self {
        TrainConfig {
            objective,
            sgd: SgdConfig::default(),
            schedule,
            batch_size,
            eval_batch_size: 500,
            augment: true,
            divergence_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.weights.validate()?;
        self.sgd.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One network's record for one epoch. Losses are sample-weighted means
/// over the epoch's training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    /// 1 or 2.
    pub net: usize,
    pub terms: LossTerms,
    pub test_top1: f64,
    pub test_top5: Option<f64>,
}

/// Error rates of the default classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub top1_error: f64,
    /// Present when there are at least 5 classes.
    pub top5_error: Option<f64>,
}

/// Everything needed to continue a run. Batch order and augmentation are
/// functions of `(seed, epoch, batch)`, so the epoch counter is the whole
/// random state.
#[derive(Debug)]
pub struct TrainState<F: Float = f32> {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    pub seed: u64,
    pub nets: [SupervisedNet<F>; 2],
    pub optimizers: [OptimizerState<F>; 2],
    pub history: Vec<HistoryRow>,
    /// Lowest top-1 error seen so far per network.
    pub best_error: [f64; 2],
}

impl<F: Float> TrainState<F> {
    pub fn new(net1: SupervisedNet<F>, net2: SupervisedNet<F>, sgd: SgdConfig, seed: u64) -> Result<Self> {
        if net1.spec().classes != net2.spec().classes {
            return Err(Error::InvalidArgument(format!(
                "networks disagree on classes: {} vs {}",
                net1.spec().classes,
                net2.spec().classes
            )));
        }
        let optimizers = [
            OptimizerState::new(&net1.parameters(), sgd)?,
            OptimizerState::new(&net2.parameters(), sgd)?,
        ];
        Ok(TrainState {
            epoch: 0,
            iteration: 0,
            seed,
            nets: [net1, net2],
            optimizers,
            history: Vec::new(),
            best_error: [f64::INFINITY; 2],
        })
    }
}

/// Whether training continues after an epoch callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

/// Top-1 and top-5 error of row-major logits `[N, M]`.
pub fn error_rates(logits: &[f64], classes: usize, labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::shape("error_rates", &[logits.len()], &[labels.len(), classes]));
    }
    let (mut wrong1, mut wrong5) = (0usize, 0usize);
    for (row, &y) in logits.chunks(classes).zip(labels) {
        // rank = number of classes scoring strictly higher, ties broken by index
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
            .count();
        wrong1 += usize::from(rank >= 1);
        wrong5 += usize::from(rank >= 5);
    }
    let n = labels.len() as f64;
    Ok(EvalResult {
        top1_error: wrong1 as f64 / n,
        top5_error: (classes >= 5).then(|| wrong5 as f64 / n),
    })
}

/// Error of the default classifier on `ds`, unaugmented, in evaluation
/// mode. Auxiliary heads are ignored.
pub fn evaluate<F: Float>(net: &SupervisedNet<F>, ds: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let mut logits = Vec::with_capacity(ds.len() * ds.classes);
    let mut labels = Vec::with_capacity(ds.len());
    for idx in eval_batches(ds.len(), batch_size) {
        let batch = make_batch::<F>(ds, &idx, None)?;
        let out = net.forward(&batch.images, Phase::Eval)?;
        logits.extend(out.data().iter().map(|v| v.to_f64()));
        labels.extend(batch.labels);
    }
    error_rates(&logits, ds.classes, &labels)
}

/// Writes the snapshot taken before the failing iteration, when
/// configured, and builds the error to return.
fn diverge<F: Float>(state: &TrainState<F>, config: &TrainConfig, snapshot: Option<&[u8]>, loss: f64) -> Error {
    if let (Some(path), Some(bytes)) = (&config.divergence_checkpoint, snapshot) {
        if let Err(e) = checkpoint::write_atomic(bytes, path) {
            return e;
        }
    }
    Error::Divergence {
        epoch: state.epoch,
        iteration: state.iteration,
        loss,
    }
}

fn accumulate(acc: &mut LossTerms, t: &LossTerms, w: f64) {
    acc.total += w * t.total;
    acc.classification += w * t.classification;
    acc.deep_supervision += w * t.deep_supervision;
    acc.same_staged += w * t.same_staged;
    acc.cross_staged += w * t.cross_staged;
}

/// Runs epochs `state.epoch .. schedule.epochs`.
///
/// `on_epoch` sees the state after each epoch's evaluation together with
/// that epoch's two history rows, and may stop the run early. A non-finite
/// loss aborts with [`Error::Divergence`]; when configured, the parameters
/// from before the failing iteration are checkpointed first.
pub fn train_joint<F: Float>(
    state: &mut TrainState<F>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState<F>, &[HistoryRow]) -> Result<EpochControl>,
) -> Result<()> {
    config.validate()?;
    for (i, net) in state.nets.iter().enumerate() {
        if net.spec().classes != train.classes {
            return Err(Error::InvalidArgument(format!(
                "network {} has {} classes, dataset has {}",
                i + 1,
                net.spec().classes,
                train.classes
            )));
        }
    }
    let params = [state.nets[0].parameters(), state.nets[1].parameters()];
    let mode = config.objective.mode;
    let temperature = F::from_f64(config.objective.weights.temperature);

    while state.epoch < config.schedule.epochs {
        let epoch = state.epoch;
        let lr = config.schedule.lr_at(epoch)?;
        let mut sums = [LossTerms::default(), LossTerms::default()];
        let batches = BatchIter::<F>::new(train, config.batch_size, state.seed, epoch, config.augment)?;
        for batch in batches {
            let batch = batch?;
            let tag = state.iteration as u64;
            let snapshot = config.divergence_checkpoint.as_ref().map(|_| checkpoint::to_bytes(state));
            state.nets[0].zero_grad();
            state.nets[1].zero_grad();

            // In KD mode network 1 is a fixed teacher.
            let phase1 = if mode.freezes_peer() { Phase::Eval } else { Phase::Train };
            let logits = [
                state.nets[0].forward_all_heads(&batch.images, phase1)?,
                state.nets[1].forward_all_heads(&batch.images, Phase::Train)?,
            ];
            if logits.iter().flatten().any(|z| z.data().iter().any(|v| !v.is_finite())) {
                return Err(diverge(state, config, snapshot.as_deref(), f64::NAN));
            }
            let knowledge = [
                KnowledgeSet::from_logits(&logits[0], temperature, tag)?,
                KnowledgeSet::from_logits(&logits[1], temperature, tag)?,
            ];

            let mut losses: Vec<Option<Tensor<F>>> = Vec::with_capacity(2);
            let mut terms = [LossTerms::default(); 2];
            for own in 0..2 {
                let peer = knowledge[1 - own].detached();
                if own == 0 && mode.freezes_peer() {
                    let lc = classification_loss(logits[0].last().expect("default head"), &batch.labels)?;
                    let v = lc.item().to_f64();
                    terms[0] = LossTerms { total: v, classification: v, ..LossTerms::default() };
                    losses.push(None);
                    continue;
                }
                let obj = dcm_objective(&logits[own], &batch.labels, &knowledge[own], &peer, &config.objective)?;
                terms[own] = obj.terms;
                losses.push(Some(obj.loss));
            }

            if let Some(bad) = terms.iter().find(|t| !t.total.is_finite()) {
                return Err(diverge(state, config, snapshot.as_deref(), bad.total));
            }
            for loss in losses.iter().flatten() {
                loss.backward()?;
            }
            let finite = |p: &Tensor<F>| p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite()));
            if !params.iter().flatten().all(finite) {
                return Err(diverge(state, config, snapshot.as_deref(), f64::NAN));
            }
            for i in 0..2 {
                if !(i == 0 && mode.freezes_peer()) {
                    state.optimizers[i].step(&params[i], lr)?;
                }
            }
            let all_finite = state.nets.iter().all(|n| {
                n.named_tensors().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
            });
            if !all_finite {
                return Err(diverge(state, config, snapshot.as_deref(), f64::NAN));
            }
            let w = batch.labels.len() as f64 / train.len() as f64;
            accumulate(&mut sums[0], &terms[0], w);
            accumulate(&mut sums[1], &terms[1], w);
            state.iteration += 1;
        }
        state.nets[0].zero_grad();
        state.nets[1].zero_grad();

        let mut rows = Vec::with_capacity(2);
        for i in 0..2 {
            let eval = evaluate(&state.nets[i], test, config.eval_batch_size)?;
            state.best_error[i] = state.best_error[i].min(eval.top1_error);
            rows.push(HistoryRow {
                epoch,
                lr,
                net: i + 1,
                terms: sums[i],
                test_top1: eval.top1_error,
                test_top5: eval.top5_error,
            });
        }
        state.history.extend(rows.iter().cloned());
        state.epoch += 1;
        if on_epoch(state, &rows)? == EpochControl::Stop {
            break;
        }
    }
    Ok(())
}

impl<F: Float> TrainState<F> {
    /// Writes the state as a checksummed binary checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    /// Reads a checkpoint into freshly built networks of the same
    /// structure. On error nothing is returned and the inputs are dropped.
    pub fn load(path: &std::path::Path, net1: SupervisedNet<F>, net2: SupervisedNet<F>) -> Result<Self> {
        checkpoint::load(path, net1, net2)
    }
}
