use std::path::Path;

use dcm_core::experiment::{compare, run, ExperimentConfig, Overrides, RunOptions};
use dcm_core::net::Manifest;

fn config(out: &Path, mode: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "{mode}"
mode = "{mode}"
seeds = [1, 2]
out_dir = "{out}"
batch_size = 8
eval_batch_size = 16
precision = "f64"

[dataset]
kind = "synthetic"
subset = 24
corrupt_ratio = 0.25
synthetic = {{ classes = 4, train = 40, test = 16, side = 8, noise = 20.0 }}

[[nets]]
locations = [1, 2]
[nets.backbone]
name = "tiny"
in_channels = 3
input_side = 8
stem_channels = 4
classes = 4
stages = [
  {{ block = "residual-basic", blocks = 1, channels = 4, downsample = false }},
  {{ block = "residual-basic", blocks = 1, channels = 8, downsample = true }},
  {{ block = "residual-basic", blocks = 1, channels = 8, downsample = true }},
]

[[nets]]
backbone = {{ name = "tiny", in_channels = 3, input_side = 8, stem_channels = 4, classes = 4, stages = [
  {{ block = "residual-basic", blocks = 1, channels = 4, downsample = false }},
  {{ block = "residual-basic", blocks = 1, channels = 8, downsample = true }},
  {{ block = "residual-basic", blocks = 1, channels = 8, downsample = true }},
] }}
locations = [2, 1]

[schedule]
kind = "step"
initial_lr = 0.05
epochs = 3
milestones = [[2, 5.0]]
"#,
        out = out.display()
    );
    let mut c = ExperimentConfig::from_toml(&text).unwrap();
    if !c.mode.uses_heads() {
        c.nets.iter_mut().for_each(|n| n.locations.clear());
    }
    c
}

fn quiet(_: &str) {}

#[test]
fn run_writes_reproducible_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let rec = run(&config(&a, "dcm"), &RunOptions::default(), &mut quiet).unwrap();
    run(&config(&b, "dcm"), &RunOptions::default(), &mut quiet).unwrap();

    assert_eq!(rec.seeds.len(), 2);
    for name in ["resolved.toml", "summary.csv", "summary.txt", "subset.txt", "corruption.txt"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(a.join("seed-1/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_hash: {}", rec.config_hash));
    assert_eq!(
        lines.next().unwrap(),
        "seed,epoch,lr,net,loss_total,loss_c,loss_ds,loss_dcm1,loss_dcm2,test_top1"
    );
    assert_eq!(lines.count(), 6);
    for seed in [1, 2] {
        let f = format!("seed-{seed}/metrics.csv");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
    assert_eq!(rec.summary[0].seeds, 2);

    // summary numbers follow from the per-seed rows
    let finals: Vec<f64> = rec.seeds.iter().map(|s| s.history.last().unwrap().test_top1).collect();
    let (m, sd) = dcm_core::experiment::mean_std(&finals);
    assert_eq!((rec.summary[1].final_mean, rec.summary[1].final_std), (m, sd));
    let cmp = compare(std::slice::from_ref(&a), None, false).unwrap();
    assert_eq!(cmp.rows[0].error[1], (m, sd));

    // exported backbones carry no head tensors
    let m = Manifest::load(&a.join("seed-1/net1.manifest")).unwrap();
    assert!(m.entries.iter().all(|e| !e.name.starts_with("head")));
    assert_eq!(std::fs::read_to_string(a.join("subset.txt")).unwrap().lines().count(), 24);
    assert_eq!(std::fs::read_to_string(a.join("corruption.txt")).unwrap().lines().count(), 1 + 6);
}

#[test]
fn resume_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    run(&config(&full, "dml"), &RunOptions::default(), &mut quiet).unwrap();

    let part = tmp.path().join("part");
    let mut short = config(&part, "dml");
    // stop after 2 epochs, then extend the same run to the full 3
    short.schedule.epochs = 2;
    run(&short, &RunOptions::default(), &mut quiet).unwrap();
    run(&config(&part, "dml"), &RunOptions { resume: true }, &mut quiet).unwrap();
    for seed in [1, 2] {
        let f = format!("seed-{seed}/metrics.csv");
        let strip = |p: &Path| {
            let s = std::fs::read_to_string(p.join(&f)).unwrap();
            s.lines().skip(1).map(str::to_string).collect::<Vec<_>>()
        };
        assert_eq!(strip(&full), strip(&part));
    }
}

#[test]
fn compare_reports_margins() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("baseline");
    let dcm = tmp.path().join("dcm");
    let mut bc = config(&base, "baseline");
    bc.seeds = vec![1];
    let mut dc = config(&dcm, "dcm");
    dc.seeds = vec![1];
    run(&bc, &RunOptions::default(), &mut quiet).unwrap();
    run(&dc, &RunOptions::default(), &mut quiet).unwrap();
    let cmp = compare(&[base.clone(), dcm.clone()], Some("baseline"), false).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert_eq!(cmp.rows[0].margin, [0.0, 0.0]);
    let (b, d) = (&cmp.rows[0], &cmp.rows[1]);
    for i in 0..2 {
        assert!((d.margin[i] - (b.error[i].0 - d.error[i].0)).abs() < 1e-15);
    }
    assert!(cmp.to_text().contains("Net1"));
    assert!(cmp.to_csv().unwrap().starts_with("run,mode,seeds"));

    // a run compared with itself has zero margins
    let same = compare(&[dcm.clone(), dcm.clone()], None, false).unwrap();
    assert!(same.rows.iter().all(|r| r.margin == [0.0, 0.0]));

    // metrics from another configuration are refused unless forced
    let foreign = std::fs::read_to_string(base.join("seed-1/metrics.csv")).unwrap();
    std::fs::write(dcm.join("seed-1/metrics.csv"), foreign).unwrap();
    assert!(compare(std::slice::from_ref(&dcm), None, false).is_err());
    assert!(compare(&[dcm.clone()], None, true).is_ok());

    let mut other = config(&tmp.path().join("other"), "baseline");
    other.seeds = vec![1];
    other.dataset.subset = Some(20);
    run(&other, &RunOptions::default(), &mut quiet).unwrap();
    assert!(compare(&[base, tmp.path().join("other")], None, false).is_err());
}

#[test]
fn failing_seed_leaves_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("boom");
    let mut c = config(&out, "dml");
    c.schedule.initial_lr = 1e30;
    c.apply(&Overrides { seeds: Some(vec![4]), ..Overrides::default() });
    let err = run(&c, &RunOptions::default(), &mut quiet).unwrap_err();
    assert!(err.to_string().contains("diverged"), "{err}");
    let marker = std::fs::read_to_string(out.join("seed-4/FAILED")).unwrap();
    assert!(marker.contains("diverged"));
    assert!(out.join("seed-4/diverged.bin").exists());
}
