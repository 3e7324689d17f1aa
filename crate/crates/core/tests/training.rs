use dcm_core::autograd::{OptimizerState, SgdConfig};
use dcm_core::data::{make_batch, synthetic_pair, DatasetPair, SyntheticSpec};
use dcm_core::distill::{dcm_objective, KnowledgeSet, LossWeights, Mode, ObjectiveConfig};
use dcm_core::net::{BackboneSpec, HeadStyle, Phase, SupervisedNet};
use dcm_core::trainer::{train_joint, EpochControl, HistoryRow, Schedule, TrainConfig, TrainState};
use dcm_core::Float;

fn spec() -> BackboneSpec {
    let mut s = BackboneSpec::tiny_res8(3, 4).with_input_side(8);
    s.stem_channels = 4;
    for (st, c) in s.stages.iter_mut().zip([4, 8, 8]) {
        st.channels = c;
    }
    s
}

fn data(n: usize) -> DatasetPair {
    synthetic_pair(&SyntheticSpec {
        side: 8,
        noise: 20.0,
        ..SyntheticSpec::new(4, n, 16)
    })
    .unwrap()
}

fn nets<F: Float>(mode: Mode, seed: u64) -> (SupervisedNet<F>, SupervisedNet<F>) {
    let build = |s| {
        let net = SupervisedNet::build(&spec(), s).unwrap();
        if mode.uses_heads() {
            net.attach_heads(&[1, 2], HeadStyle::Default, s).unwrap()
        } else {
            net
        }
    };
    (build(seed), build(seed + 100))
}

fn config(mode: Mode, epochs: usize, batch: usize) -> TrainConfig {
    let mut c = TrainConfig::new(
        ObjectiveConfig::new(mode, LossWeights::default()),
        Schedule::step(0.05, epochs, &[]),
        batch,
    );
    c.augment = false;
    c
}

fn run<F: Float>(mode: Mode, epochs: usize, batch: usize, seed: u64, pair: &DatasetPair) -> TrainState<F> {
    let (a, b) = nets(mode, seed);
    let cfg = config(mode, epochs, batch);
    let mut state = TrainState::new(a, b, cfg.sgd, seed).unwrap();
    train_joint(&mut state, &pair.train, &pair.test, &cfg, &mut |_, _| Ok(EpochControl::Continue)).unwrap();
    state
}

fn net_loss(history: &[HistoryRow], net: usize) -> Vec<f64> {
    history.iter().filter(|r| r.net == net).map(|r| r.terms.total).collect()
}

#[test]
fn training_loss_falls_for_every_mode() {
    let pair = data(8);
    for mode in Mode::ALL {
        let state = run::<f32>(mode, 8, 8, 1, &pair);
        let trained = if mode == Mode::Kd { 2 } else { 1 };
        let loss = net_loss(&state.history, trained);
        assert!(loss.last().unwrap() < &loss[0], "{mode}: {loss:?}");
    }
}

#[test]
fn identical_runs_have_identical_history() {
    let pair = data(16);
    let a = run::<f32>(Mode::Dcm, 2, 6, 3, &pair);
    let b = run::<f32>(Mode::Dcm, 2, 6, 3, &pair);
    assert_eq!(a.history, b.history);
    assert_eq!(a.nets[1].full_manifest(), b.nets[1].full_manifest());
}

#[test]
fn resume_in_f64_matches_uninterrupted_run() {
    let pair = data(16);
    let full = run::<f64>(Mode::Dcm, 4, 6, 7, &pair);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let (a, b) = nets::<f64>(Mode::Dcm, 7);
    let cfg = config(Mode::Dcm, 4, 6);
    let mut state = TrainState::new(a, b, cfg.sgd, 7).unwrap();
    train_joint(&mut state, &pair.train, &pair.test, &cfg, &mut |s, _| {
        s.save(&path)?;
        Ok(if s.epoch == 2 { EpochControl::Stop } else { EpochControl::Continue })
    })
    .unwrap();
    drop(state);

    let (a, b) = nets::<f64>(Mode::Dcm, 999);
    let mut resumed = TrainState::load(&path, a, b).unwrap();
    assert_eq!(resumed.epoch, 2);
    train_joint(&mut resumed, &pair.train, &pair.test, &cfg, &mut |_, _| Ok(EpochControl::Continue)).unwrap();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.iteration, full.iteration);
    for i in 0..2 {
        assert_eq!(resumed.nets[i].full_manifest(), full.nets[i].full_manifest());
    }
}

#[test]
fn baseline_runs_are_independent() {
    let pair = data(16);
    let cfg = config(Mode::Baseline, 2, 6);
    let train = |partner_seed: u64| {
        let a = SupervisedNet::<f64>::build(&spec(), 1).unwrap();
        let b = SupervisedNet::<f64>::build(&spec(), partner_seed).unwrap();
        let mut s = TrainState::new(a, b, cfg.sgd, 5).unwrap();
        train_joint(&mut s, &pair.train, &pair.test, &cfg, &mut |_, _| Ok(EpochControl::Continue)).unwrap();
        s
    };
    let x = train(2);
    let y = train(3);
    assert_eq!(x.nets[0].full_manifest(), y.nets[0].full_manifest());
    assert_ne!(x.nets[1].full_manifest(), y.nets[1].full_manifest());
}

/// One joint step must equal two separate steps, each driven only by its
/// own network's loss.
#[test]
fn one_step_updates_each_network_from_its_own_loss() {
    let pair = data(8);
    let cfg = config(Mode::Dcm, 1, 8);
    let joint = {
        let (a, b) = nets::<f64>(Mode::Dcm, 11);
        let mut s = TrainState::new(a, b, cfg.sgd, 0).unwrap();
        train_joint(&mut s, &pair.train, &pair.test, &cfg, &mut |_, _| Ok(EpochControl::Continue)).unwrap();
        assert_eq!(s.iteration, 1);
        s
    };

    let (a, b) = nets::<f64>(Mode::Dcm, 11);
    let idx = dcm_core::data::epoch_batches(8, 8, 0, 0).unwrap().remove(0);
    let batch = make_batch::<f64>(&pair.train, &idx, None).unwrap();
    let la = a.forward_all_heads(&batch.images, Phase::Train).unwrap();
    let lb = b.forward_all_heads(&batch.images, Phase::Train).unwrap();
    let ka = KnowledgeSet::from_logits(&la, 1.0, 0).unwrap();
    let kb = KnowledgeSet::from_logits(&lb, 1.0, 0).unwrap();
    let obj = cfg.objective;

    let loss_b = dcm_objective(&lb, &batch.labels, &kb, &ka.detached(), &obj).unwrap().loss;
    loss_b.backward().unwrap();
    assert!(a.parameters().iter().all(|p| !p.has_grad()), "L_s reached the teacher");
    let mut opt_b = OptimizerState::new(&b.parameters(), SgdConfig::default()).unwrap();
    let pb = b.parameters();

    let loss_a = dcm_objective(&la, &batch.labels, &ka, &kb.detached(), &obj).unwrap().loss;
    loss_a.backward().unwrap();
    let pa = a.parameters();
    let mut opt_a = OptimizerState::new(&pa, SgdConfig::default()).unwrap();
    opt_a.step(&pa, 0.05).unwrap();
    opt_b.step(&pb, 0.05).unwrap();

    assert_eq!(a.full_manifest(), joint.nets[0].full_manifest());
    assert_eq!(b.full_manifest(), joint.nets[1].full_manifest());
}

#[test]
fn kd_teacher_is_frozen() {
    let pair = data(8);
    let (a, _) = nets::<f32>(Mode::Kd, 1);
    let before = a.full_manifest();
    let state = run::<f32>(Mode::Kd, 2, 4, 1, &pair);
    assert_eq!(state.nets[0].full_manifest(), before);
}

#[test]
fn divergence_aborts_with_checkpoint() {
    let pair = data(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diverged.bin");
    let (a, b) = nets::<f32>(Mode::Dml, 1);
    let mut cfg = config(Mode::Dml, 3, 4);
    cfg.schedule.initial_lr = 1e30;
    cfg.divergence_checkpoint = Some(path.clone());
    let mut s = TrainState::new(a, b, cfg.sgd, 1).unwrap();
    let err = train_joint(&mut s, &pair.train, &pair.test, &cfg, &mut |_, _| Ok(EpochControl::Continue)).unwrap_err();
    assert!(matches!(err, dcm_core::Error::Divergence { epoch: 0, .. }), "{err}");
    assert!(s.history.is_empty());

    // the checkpoint holds the last finite parameters
    let (a, b) = nets::<f32>(Mode::Dml, 1);
    let saved = TrainState::load(&path, a, b).unwrap();
    assert!(saved.iteration >= 1);
    for net in &saved.nets {
        let m = net.full_manifest();
        assert!(m.entries.iter().flat_map(|e| &e.values).all(|v| v.is_finite()));
    }
}
