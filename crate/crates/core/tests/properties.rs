use std::path::Path;

use dcm_core::data::{corrupt_labels, epoch_batches, stratified_subset, CorruptionPlan, Dataset, Split};
use dcm_core::distill::{dcm_cross_staged, dcm_same_staged, kl_divergence, KnowledgeSet, Measure};
use dcm_core::trainer::{error_rates, Schedule};
use dcm_core::Tensor;
use proptest::prelude::*;

fn logits(n: usize, m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, n * m)
}

fn labelled(n: usize, classes: usize, labels: Vec<u8>) -> Dataset {
    Dataset::new(vec![0; n], labels, [1, 1, 1], classes, Split::Train).unwrap()
}

proptest! {
    #[test]
    fn knowledge_sets_are_row_stochastic(
        (n, m, k) in (1usize..8, 2usize..12, 0usize..4),
        t in 0.1f64..20.0,
        seed in any::<u64>(),
    ) {
        let z: Vec<Tensor<f64>> = (0..=k as u64)
            .map(|i| {
                let v = (0..n * m)
                    .map(|j| ((seed ^ (i * 7919 + j as u64)).wrapping_mul(0x9e37_79b9) % 1000) as f64 / 10.0 - 50.0)
                    .collect();
                Tensor::new(&[n, m], v).unwrap()
            })
            .collect();
        let ks = KnowledgeSet::from_logits(&z, t, 0).unwrap();
        prop_assert_eq!(ks.k(), k);
        prop_assert!(ks.is_row_stochastic(1e-12));
        prop_assert!(ks.probs().iter().all(|p| p.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in logits(3, 5), b in logits(3, 5), t in 0.5f64..5.0) {
        let pa = Tensor::new(&[3, 5], a).unwrap().softmax(t).unwrap();
        let pb = Tensor::new(&[3, 5], b).unwrap().softmax(t).unwrap();
        prop_assert!(kl_divergence(&pa, &pb).unwrap().item() >= -1e-12);
        prop_assert!(kl_divergence(&pa, &pa).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn dense_terms_count_and_sum(a in logits(2, 4), b in logits(2, 4), k in 0usize..4) {
        let mk = |v: &Vec<f64>, shift: f64| {
            (0..=k)
                .map(|i| Tensor::new(&[2, 4], v.iter().map(|x| x + shift * i as f64).collect()).unwrap())
                .collect::<Vec<_>>()
        };
        let own = KnowledgeSet::from_logits(&mk(&a, 0.3), 1.0, 0).unwrap();
        let peer = KnowledgeSet::from_logits(&mk(&b, -0.2), 1.0, 0).unwrap();
        let all_pairs: f64 = (0..=k)
            .flat_map(|i| (0..=k).map(move |j| (i, j)))
            .map(|(i, j)| {
                dcm_core::distill::soft_cross_entropy(&peer.probs()[i], &own.probs()[j]).unwrap().item()
            })
            .sum();
        let same = dcm_same_staged(&peer, &own, Measure::CrossEntropy).unwrap().item();
        let cross = dcm_cross_staged(&peer, &own, Measure::CrossEntropy).unwrap().item();
        prop_assert!((same + cross - all_pairs).abs() <= 1e-10 * all_pairs.abs().max(1.0));
        if k == 0 {
            prop_assert_eq!(cross, 0.0);
        }
    }

    #[test]
    fn corruption_count_and_wrongness(
        labels in prop::collection::vec(0u8..7, 1..400),
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let n = labels.len();
        let ds = labelled(n, 7, labels.clone());
        let (out, plan) = corrupt_labels(&ds, ratio, seed).unwrap();
        let want = (ratio * n as f64).round() as usize;
        prop_assert_eq!(plan.entries.len(), want);
        prop_assert!(plan.entries.windows(2).all(|w| w[0].0 < w[1].0));
        for &(i, old, new) in &plan.entries {
            prop_assert_eq!(old, labels[i]);
            prop_assert_ne!(new, old);
            prop_assert_eq!(out.labels[i], new);
        }
        let changed = out.labels.iter().zip(&labels).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, want);
        let back = CorruptionPlan::from_text(&plan.to_text(), Path::new("plan")).unwrap();
        prop_assert_eq!(back, plan);
    }

    #[test]
    fn epoch_batches_partition(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0usize..100) {
        let batches = epoch_batches(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batches, epoch_batches(n, bs, seed, epoch).unwrap());
    }

    #[test]
    fn stratified_subset_balances_classes(per_class in 5usize..40, classes in 2usize..6, size in 1usize..60, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..per_class * classes).map(|i| (i % classes) as u8).collect();
        let ds = labelled(labels.len(), classes, labels);
        let size = size.min(ds.len());
        let (sub, idx) = stratified_subset(&ds, size, seed).unwrap();
        prop_assert_eq!(sub.len(), size);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let counts = sub.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{:?}", counts);
    }

    #[test]
    fn step_schedule_never_increases(lr in 1e-4f64..1.0, epochs in 1usize..100, m1 in 0usize..100, m2 in 0usize..100) {
        let mut ms = vec![(m1.min(epochs), 5.0), (m2.min(epochs), 10.0)];
        ms.sort_by_key(|m| m.0);
        ms.dedup_by_key(|m| m.0);
        let s = Schedule::step(lr, epochs, &ms);
        prop_assume!(s.validate().is_ok());
        let lrs: Vec<f64> = (0..epochs).map(|e| s.lr_at(e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.lr_at(epochs).is_err());
    }

    #[test]
    fn top5_error_never_exceeds_top1(z in logits(6, 10), labels in prop::collection::vec(0usize..10, 6)) {
        let r = error_rates(&z, 10, &labels).unwrap();
        prop_assert!(r.top5_error.unwrap() <= r.top1_error);
        prop_assert!((0.0..=1.0).contains(&r.top1_error));
    }
}
