//! Loss terms for joint two-network training.
//!
//! Each network's objective is
//!
//! ```text
//! L = L_c + α·L_ds + β·L_same + γ·L_cross
//! ```
//!
//! where `L_c` is cross-entropy of the default classifier, `L_ds` sums the
//! cross-entropy of the `K` auxiliary classifiers, `L_same` sums the soft
//! cross-entropy between peer and own classifiers at equal indices
//! (`K + 1` terms, default classifier included) and `L_cross` sums it over
//! every ordered pair of distinct indices (`K·(K + 1)` terms). The peer's
//! probabilities are constants inside an objective.
//!
//! With no auxiliary classifiers this reduces to mutual learning
//! (`L_c + λ·m(peer, own)`) and, with the peer frozen, to classic
//! distillation.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

thread_local! {
    static KD_TERMS: Cell<u64> = const { Cell::new(0) };
}

/// Number of pairwise distillation terms built on this thread since the last
/// [`reset_kd_term_count`].
pub fn kd_term_count() -> u64 {
    KD_TERMS.with(|c| c.get())
}

pub fn reset_kd_term_count() {
    KD_TERMS.with(|c| c.set(0));
}

/// Measure used to match a peer distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    /// `−(1/N) Σ t·log p`
    CrossEntropy,
    /// `(1/N) Σ t·log(t/p)`; same gradient as cross-entropy.
    Kl,
}

/// Training objective composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Each network trained alone on its default classifier.
    Baseline,
    /// Deep supervision: default plus auxiliary cross-entropy.
    Ds,
    /// Distillation from a frozen peer.
    Kd,
    /// Mutual learning between default classifiers.
    Dml,
    #[serde(rename = "dml+ds")]
    DmlDs,
    /// Deep supervision plus same-staged exchange.
    #[serde(rename = "dcm-1")]
    Dcm1,
    /// Deep supervision plus cross-staged exchange.
    #[serde(rename = "dcm-2")]
    Dcm2,
    /// Deep supervision plus same- and cross-staged exchange.
    Dcm,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Baseline,
        Mode::Ds,
        Mode::Kd,
        Mode::Dml,
        Mode::DmlDs,
        Mode::Dcm1,
        Mode::Dcm2,
        Mode::Dcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ds => "ds",
            Mode::Kd => "kd",
            Mode::Dml => "dml",
            Mode::DmlDs => "dml+ds",
            Mode::Dcm1 => "dcm-1",
            Mode::Dcm2 => "dcm-2",
            Mode::Dcm => "dcm",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn default_measure(self) -> Measure {
        match self {
            Mode::Dml | Mode::DmlDs => Measure::Kl,
            _ => Measure::CrossEntropy,
        }
    }

    /// Whether the auxiliary cross-entropy term is active.
    pub fn uses_ds(self) -> bool {
        matches!(self, Mode::Ds | Mode::DmlDs | Mode::Dcm1 | Mode::Dcm2 | Mode::Dcm)
    }

    /// Whether the networks exchange knowledge at all.
    pub fn couples(self) -> bool {
        !matches!(self, Mode::Baseline | Mode::Ds)
    }

    /// Whether the peer network is frozen (not trained).
    pub fn freezes_peer(self) -> bool {
        self == Mode::Kd
    }

    /// Whether auxiliary heads take part in the objective.
    pub fn uses_heads(self) -> bool {
        matches!(self, Mode::Ds | Mode::DmlDs | Mode::Dcm1 | Mode::Dcm2 | Mode::Dcm)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss weights. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Deep-supervision weight.
    pub alpha: f64,
    /// Same-staged weight.
    pub beta: f64,
    /// Cross-staged weight.
    pub gamma: f64,
    /// Last-layer distillation weight for the KD and DML modes.
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    /// Copy with every weight the mode does not read set to zero.
    pub fn restricted_to(self, mode: Mode, dcm2_last_pair: bool) -> Self {
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        LossWeights {
            alpha: keep(mode.uses_ds(), self.alpha),
            beta: keep(
                matches!(mode, Mode::Dcm1 | Mode::Dcm) || (mode == Mode::Dcm2 && dcm2_last_pair),
                self.beta,
            ),
            gamma: keep(matches!(mode, Mode::Dcm2 | Mode::Dcm), self.gamma),
            lambda: keep(matches!(mode, Mode::Kd | Mode::Dml | Mode::DmlDs), self.lambda),
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Objective settings for one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub measure: Measure,
    /// In `dcm-2`, also keep the default-classifier pair (weighted by β).
    pub dcm2_last_pair: bool,
}

impl ObjectiveConfig {
    pub fn new(mode: Mode, weights: LossWeights) -> Self {
        ObjectiveConfig {
            mode,
            weights,
            measure: mode.default_measure(),
            dcm2_last_pair: true,
        }
    }
}

/// Probabilities of every classifier of one network on one batch,
/// auxiliary heads first, default classifier last.
#[derive(Debug, Clone)]
pub struct KnowledgeSet<F: Float = f32> {
    probs: Vec<Tensor<F>>,
    batch_tag: u64,
}

impl<F: Float> KnowledgeSet<F> {
    /// Softened probabilities of each logit tensor. Gradients flow back
    /// into the logits.
    pub fn from_logits(logits: &[Tensor<F>], temperature: F, batch_tag: u64) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidArgument("knowledge set needs at least one classifier".into()));
        }
        let probs = logits
            .iter()
            .map(|z| softened_softmax(z, temperature))
            .collect::<Result<Vec<_>>>()?;
        let set = KnowledgeSet { probs, batch_tag };
        set.check_shapes()?;
        Ok(set)
    }

    /// Constant copy, cut from the graph.
    pub fn detached(&self) -> Self {
        KnowledgeSet {
            probs: self.probs.iter().map(Tensor::detach).collect(),
            batch_tag: self.batch_tag,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let first = self.probs[0].shape();
        if first.len() != 2 {
            return Err(Error::shape("knowledge_set", first, &[0, 0]));
        }
        for p in &self.probs[1..] {
            if p.shape() != first {
                return Err(Error::shape("knowledge_set", first, p.shape()));
            }
        }
        Ok(())
    }

    /// Number of auxiliary classifiers `K`.
    pub fn k(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[Tensor<F>] {
        &self.probs
    }

    /// Default-classifier probabilities.
    pub fn last(&self) -> &Tensor<F> {
        self.probs.last().expect("non-empty knowledge set")
    }

    pub fn batch_tag(&self) -> u64 {
        self.batch_tag
    }

    /// Every row sums to one within `tol`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.probs.iter().all(|p| {
            let c = p.shape()[1];
            p.data()
                .chunks(c)
                .all(|row| (row.iter().map(|v| v.to_f64()).sum::<f64>() - 1.0).abs() <= tol)
        })
    }
}

/// Row-wise softmax of `logits / temperature`.
pub fn softened_softmax<F: Float>(logits: &Tensor<F>, temperature: F) -> Result<Tensor<F>> {
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    logits.softmax(temperature)
}

fn check_pair<F: Float>(op: &'static str, target: &Tensor<F>, pred: &Tensor<F>) -> Result<usize> {
    if target.shape() != pred.shape() || pred.shape().len() != 2 {
        return Err(Error::shape(op, target.shape(), pred.shape()));
    }
    Ok(pred.shape()[0])
}

/// `−(1/N) Σ_n Σ_m target·log(pred)`. The target is a constant.
pub fn soft_cross_entropy<F: Float>(target: &Tensor<F>, pred: &Tensor<F>) -> Result<Tensor<F>> {
    let n = check_pair("soft_cross_entropy", target, pred)?;
    Ok(pred
        .ln_clamped(F::from_f64(LOG_FLOOR))
        .mul(&target.detach())?
        .sum()
        .scale(-F::ONE / F::from_usize(n)))
}

/// `(1/N) Σ_n Σ_m target·log(target / pred)` with `0·log 0 = 0`. The target
/// is a constant.
pub fn kl_divergence<F: Float>(target: &Tensor<F>, pred: &Tensor<F>) -> Result<Tensor<F>> {
    let n = check_pair("kl_divergence", target, pred)?;
    let neg_entropy: F = target
        .data()
        .iter()
        .filter(|t| **t > F::ZERO)
        .map(|t| *t * t.ln())
        .sum::<F>()
        / F::from_usize(n);
    Ok(soft_cross_entropy(target, pred)?.add_scalar(neg_entropy))
}

fn measure_fn<F: Float>(measure: Measure, target: &Tensor<F>, pred: &Tensor<F>) -> Result<Tensor<F>> {
    KD_TERMS.with(|c| c.set(c.get() + 1));
    match measure {
        Measure::CrossEntropy => soft_cross_entropy(target, pred),
        Measure::Kl => kl_divergence(target, pred),
    }
}

/// Mean one-hot cross-entropy of `logits` at temperature 1.
pub fn classification_loss<F: Float>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let (n, m) = match *logits.shape() {
        [n, m] => (n, m),
        _ => return Err(Error::shape("classification_loss", logits.shape(), &[labels.len(), 0])),
    };
    if labels.len() != n {
        return Err(Error::shape("classification_loss", logits.shape(), &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {m} classes"
        )));
    }
    Ok(logits.log_softmax(F::ONE)?.gather_rows(labels)?.mean().scale(-F::ONE))
}

fn zero_like<F: Float>() -> Tensor<F> {
    Tensor::scalar(F::ZERO)
}

fn sum_terms<F: Float>(terms: Vec<Tensor<F>>) -> Result<Tensor<F>> {
    let mut it = terms.into_iter();
    let Some(first) = it.next() else {
        return Ok(zero_like());
    };
    it.try_fold(first, |acc, t| acc.add(&t))
}

/// Sum of the classification losses of the auxiliary classifiers.
pub fn ds_loss<F: Float>(aux_logits: &[Tensor<F>], labels: &[usize]) -> Result<Tensor<F>> {
    sum_terms(
        aux_logits
            .iter()
            .map(|z| classification_loss(z, labels))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn check_sets<F: Float>(peer: &KnowledgeSet<F>, own: &KnowledgeSet<F>) -> Result<()> {
    if peer.k() != own.k() {
        return Err(Error::InvalidArgument(format!(
            "knowledge sets disagree on K: {} vs {}",
            peer.k(),
            own.k()
        )));
    }
    if peer.probs[0].shape() != own.probs[0].shape() {
        return Err(Error::shape("knowledge_set", peer.probs[0].shape(), own.probs[0].shape()));
    }
    Ok(())
}

/// `Σ_{k=1}^{K+1} m(peer_k, own_k)`.
pub fn dcm_same_staged<F: Float>(
    peer: &KnowledgeSet<F>,
    own: &KnowledgeSet<F>,
    measure: Measure,
) -> Result<Tensor<F>> {
    check_sets(peer, own)?;
    sum_terms(
        peer.probs
            .iter()
            .zip(&own.probs)
            .map(|(t, s)| measure_fn(measure, t, s))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// `Σ_{i≠j} m(peer_i, own_j)` over all ordered pairs of distinct indices.
pub fn dcm_cross_staged<F: Float>(
    peer: &KnowledgeSet<F>,
    own: &KnowledgeSet<F>,
    measure: Measure,
) -> Result<Tensor<F>> {
    check_sets(peer, own)?;
    let mut terms = Vec::with_capacity(peer.k() * (peer.k() + 1));
    for (i, t) in peer.probs.iter().enumerate() {
        for (j, s) in own.probs.iter().enumerate() {
            if i != j {
                terms.push(measure_fn(measure, t, s)?);
            }
        }
    }
    sum_terms(terms)
}

/// Unweighted values of each component of an objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub classification: f64,
    pub deep_supervision: f64,
    /// Same-staged sum; for KD and DML modes the default-classifier pair.
    pub same_staged: f64,
    pub cross_staged: f64,
}

/// One network's objective and its breakdown.
#[derive(Debug, Clone)]
pub struct Objective<F: Float = f32> {
    pub loss: Tensor<F>,
    pub terms: LossTerms,
}

/// Builds the objective of the network owning `own_logits` (auxiliary heads
/// first, default classifier last) against the constant `peer` knowledge.
///
/// `own` must be the knowledge set of `own_logits` at the configured
/// temperature. Terms switched off by the mode are not built, so their
/// parameters receive no gradient.
pub fn dcm_objective<F: Float>(
    own_logits: &[Tensor<F>],
    labels: &[usize],
    own: &KnowledgeSet<F>,
    peer: &KnowledgeSet<F>,
    config: &ObjectiveConfig,
) -> Result<Objective<F>> {
    config.weights.validate()?;
    if own_logits.len() != own.probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit tensors but knowledge set has {} classifiers",
            own_logits.len(),
            own.probs.len()
        )));
    }
    let (aux, last) = own_logits.split_at(own_logits.len() - 1);
    let w = &config.weights;
    let f = F::from_f64;
    let mut terms = LossTerms::default();

    let lc = classification_loss(&last[0], labels)?;
    terms.classification = lc.item().to_f64();
    let mut total = lc;

    let mode = config.mode;
    if mode.uses_ds() {
        let ds = ds_loss(aux, labels)?;
        terms.deep_supervision = ds.item().to_f64();
        total = total.add(&ds.scale(f(w.alpha)))?;
    }

    if mode.couples() {
        check_sets(peer, own)?;
        let measure = config.measure;
        match mode {
            Mode::Kd | Mode::Dml | Mode::DmlDs => {
                let d = measure_fn(measure, peer.last(), own.last())?;
                terms.same_staged = d.item().to_f64();
                total = total.add(&d.scale(f(w.lambda)))?;
            }
            Mode::Dcm1 | Mode::Dcm => {
                let same = dcm_same_staged(peer, own, measure)?;
                terms.same_staged = same.item().to_f64();
                total = total.add(&same.scale(f(w.beta)))?;
            }
            Mode::Dcm2 if config.dcm2_last_pair => {
                let d = measure_fn(measure, peer.last(), own.last())?;
                terms.same_staged = d.item().to_f64();
                total = total.add(&d.scale(f(w.beta)))?;
            }
            _ => {}
        }
        if matches!(mode, Mode::Dcm2 | Mode::Dcm) {
            let cross = dcm_cross_staged(peer, own, measure)?;
            terms.cross_staged = cross.item().to_f64();
            total = total.add(&cross.scale(f(w.gamma)))?;
        }
    }

    terms.total = total.item().to_f64();
    Ok(Objective { loss: total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softened_softmax(&t(&[1, 2], vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        let p = softened_softmax(&t(&[1, 3], vec![-3.0, 0.5, 9.0]), 1e6).unwrap();
        assert!(p.to_vec().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-4));
        assert!(softened_softmax(&t(&[1, 2], vec![0.0, 1.0]), 0.0).is_err());
        assert!(softened_softmax(&t(&[1, 2], vec![0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn softmax_reference_value() {
        // exp(0.5) / (exp(0.5) + exp(1)) evaluated to 15 digits independently
        let p = softened_softmax(&t(&[1, 2], vec![1.0, 2.0]), 2.0).unwrap().to_vec();
        assert!((p[0] - 0.377540668798145).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.622459331201855).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let u = t(&[1, 4], vec![0.25; 4]);
        let ce = soft_cross_entropy(&u, &u).unwrap().item();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let onehot = t(&[1, 2], vec![0.0, 1.0]);
        let pred = t(&[1, 2], vec![0.5, 0.5]);
        assert!((soft_cross_entropy(&onehot, &pred).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        assert!(soft_cross_entropy(&onehot, &t(&[2, 1], vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = t(&[1, 3], vec![0.2, 0.3, 0.5]);
        assert!(kl_divergence(&p, &p).unwrap().item().abs() < 1e-15);
        let onehot = t(&[1, 2], vec![1.0, 0.0]);
        let pred = t(&[1, 2], vec![0.5, 0.5]);
        assert!((kl_divergence(&onehot, &pred).unwrap().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_examples() {
        let z = t(&[3, 5], vec![0.0; 15]);
        let l = classification_loss(&z, &[0, 4, 2]).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let z = t(&[1, 3], vec![0.0, 200.0, 0.0]);
        assert!(classification_loss(&z, &[1]).unwrap().item() < 1e-12);
        assert!(classification_loss(&z, &[3]).is_err());
    }

    #[test]
    fn ds_loss_sums() {
        assert_eq!(ds_loss::<f64>(&[], &[0]).unwrap().item(), 0.0);
        let z = t(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]);
        let one = classification_loss(&z, &[0, 2]).unwrap().item();
        let two = ds_loss(&[z.clone(), z], &[0, 2]).unwrap().item();
        assert!((two - 2.0 * one).abs() < 1e-15);
    }

    #[test]
    fn term_counts() {
        let z = t(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]);
        let ks = KnowledgeSet::from_logits(&[z.clone(), z.clone(), z], 1.0, 0).unwrap();
        reset_kd_term_count();
        dcm_same_staged(&ks, &ks, Measure::CrossEntropy).unwrap();
        assert_eq!(kd_term_count(), 3);
        reset_kd_term_count();
        dcm_cross_staged(&ks, &ks, Measure::CrossEntropy).unwrap();
        assert_eq!(kd_term_count(), 6);
        let single = KnowledgeSet::from_logits(&[t(&[1, 2], vec![0.0, 1.0])], 1.0, 0).unwrap();
        assert_eq!(dcm_cross_staged(&single, &single, Measure::Kl).unwrap().item(), 0.0);
    }

    #[test]
    fn k_mismatch_is_error() {
        let z = t(&[1, 2], vec![0.0, 1.0]);
        let a = KnowledgeSet::from_logits(&[z.clone()], 1.0, 0).unwrap();
        let b = KnowledgeSet::from_logits(&[z.clone(), z], 1.0, 0).unwrap();
        assert!(dcm_same_staged(&a, &b, Measure::CrossEntropy).is_err());
        assert!(dcm_cross_staged(&a, &b, Measure::CrossEntropy).is_err());
    }

    #[test]
    fn same_staged_of_identical_sets_is_entropy_sum() {
        let z1 = t(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]);
        let z2 = t(&[2, 3], vec![1.0, -0.5, 0.0, 2.0, 0.0, 0.0]);
        let ks = KnowledgeSet::from_logits(&[z1, z2], 1.0, 0).unwrap();
        let entropy: f64 = ks
            .probs()
            .iter()
            .map(|p| -p.to_vec().iter().map(|v| v * v.ln()).sum::<f64>() / 2.0)
            .sum();
        let got = dcm_same_staged(&ks, &ks, Measure::CrossEntropy).unwrap().item();
        assert!((got - entropy).abs() < 1e-12);
    }

    #[test]
    fn baseline_objective_is_classification_loss() {
        let z = Tensor::<f64>::parameter(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
        let ks = KnowledgeSet::from_logits(std::slice::from_ref(&z), 1.0, 0).unwrap();
        let peer = ks.detached();
        let obj = dcm_objective(
            std::slice::from_ref(&z),
            &[1, 2],
            &ks,
            &peer,
            &ObjectiveConfig::new(Mode::Baseline, LossWeights::default()),
        )
        .unwrap();
        let lc = classification_loss(&z, &[1, 2]).unwrap().item();
        assert_eq!(obj.terms.total, lc);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("DCM-2"), Some(Mode::Dcm2));
        assert_eq!(Mode::parse("nope"), None);
    }

    fn probs(n: usize, m: usize, salt: f64) -> Tensor<f64> {
        let z: Vec<f64> = (0..n * m).map(|i| ((i as f64 + salt) * 1.7).sin() * 2.0).collect();
        softened_softmax(&t(&[n, m], z), 1.0).unwrap()
    }

    #[test]
    fn kl_is_cross_entropy_minus_entropy() {
        let (p, q) = (probs(3, 5, 0.3), probs(3, 5, 7.1));
        let h = soft_cross_entropy(&p, &p).unwrap().item();
        let ce = soft_cross_entropy(&p, &q).unwrap().item();
        let kl = kl_divergence(&p, &q).unwrap().item();
        assert!((kl - (ce - h)).abs() < 1e-12);
        assert!(kl >= 0.0 && ce >= h);
    }

    #[test]
    fn classification_matches_one_hot_soft_target() {
        let z = t(&[2, 3], vec![0.4, -1.0, 2.0, 0.0, 0.5, 0.1]);
        let onehot = t(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let soft = soft_cross_entropy(&onehot, &softened_softmax(&z, 1.0).unwrap()).unwrap();
        let hard = classification_loss(&z, &[2, 0]).unwrap();
        assert!((soft.item() - hard.item()).abs() < 1e-12);
    }

    #[test]
    fn kl_and_cross_entropy_share_gradients() {
        let target = probs(4, 6, 2.0);
        let grad = |measure: Measure| {
            let z = Tensor::<f64>::parameter(&[4, 6], probs(4, 6, 9.0).to_vec()).unwrap();
            let pred = softened_softmax(&z, 1.0).unwrap();
            measure_fn(measure, &target, &pred).unwrap().backward().unwrap();
            z.grad().unwrap()
        };
        let (a, b) = (grad(Measure::CrossEntropy), grad(Measure::Kl));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn peer_receives_no_gradient() {
        let own = Tensor::<f64>::parameter(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
        let peer = Tensor::<f64>::parameter(&[2, 3], vec![1.0, 0.0, -0.2, 0.3, 0.3, 0.0]).unwrap();
        let own_ks = KnowledgeSet::from_logits(std::slice::from_ref(&own), 1.0, 0).unwrap();
        let peer_ks = KnowledgeSet::from_logits(std::slice::from_ref(&peer), 1.0, 0).unwrap();
        let obj = dcm_objective(
            std::slice::from_ref(&own),
            &[0, 1],
            &own_ks,
            &peer_ks,
            &ObjectiveConfig::new(Mode::Dcm, LossWeights::default()),
        )
        .unwrap();
        obj.loss.backward().unwrap();
        assert!(own.has_grad());
        assert!(!peer.has_grad());
    }
}
