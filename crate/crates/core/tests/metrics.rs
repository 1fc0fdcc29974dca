//! Metric oracles and invariants.

use std::collections::{BTreeMap, BTreeSet};

use panu::metrics::{
    match_segments, offset_stats, panoptic_quality, pece, pece_sem, pece_spa, uece, SegmentContext, SegmentKey,
    SegmentMatching,
};
use panu::synth::{brute_force_pq, brute_force_uece, generate_scene, random_panoptic_pair, SceneConfig};
use panu::{run_pipeline, ClassId, GroundTruth, OffsetField, PanopticMap, PipelineConfig, UncertaintyMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pq_matches_brute_force_on_random_pairs() {
    for seed in 1000..1300 {
        let (pred, gt, things) = random_panoptic_pair(16, seed);
        let m = match_segments(&pred, &gt, 255, &things).unwrap();
        let q = panoptic_quality(&m).overall;
        assert_eq!(q.pq, brute_force_pq(&pred, &gt, 255, &things), "seed {seed}");
        assert!((q.pq - q.sq * q.rq).abs() < 1e-12);
    }
}

#[test]
fn uece_matches_brute_force_including_bin_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &n in &[1usize, 7, 100, 5000, 100_000] {
        for r in [1usize, 3, 10, 15] {
            let conf: Vec<f64> = (0..n)
                .map(|_| match rng.gen_range(0..4) {
                    // exact edges k/r and their float neighbours
                    0 => rng.gen_range(0..=r) as f64 / r as f64,
                    1 => f64::from_bits((rng.gen_range(1..r.max(2)) as f64 / r as f64).to_bits() + 1).min(1.0),
                    _ => rng.gen::<f64>(),
                })
                .collect();
            let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            assert_eq!(uece(&bits, &conf, r).unwrap(), brute_force_uece(&bits, &conf, r), "n {n} r {r}");
        }
    }
}

fn permute_instances(pred: &PanopticMap, seed: u64) -> (PanopticMap, BTreeMap<u32, u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: BTreeSet<u32> = pred.instance_id.iter().copied().filter(|&i| i > 0).collect();
    let mut targets: Vec<u32> = ids.iter().map(|i| i + 100).collect();
    for i in (1..targets.len()).rev() {
        targets.swap(i, rng.gen_range(0..=i));
    }
    let map: BTreeMap<u32, u32> = ids.into_iter().zip(targets).chain([(0, 0)]).collect();
    let permuted = PanopticMap {
        class_id: pred.class_id.clone(),
        instance_id: pred.instance_id.mapv(|i| map[&i]),
    };
    (permuted, map)
}

fn noisy_scene(seed: u64) -> (PanopticMap, GroundTruth, panu::PipelineOutput, BTreeSet<ClassId>) {
    let cfg = SceneConfig {
        height: 48,
        width: 48,
        num_instances: 5,
        flip_rate: 0.15,
        offset_sigma: 1.5,
        offset_model: panu::synth::OffsetModel::Gaussian,
        center_jitter: 1.0,
        spurious_centers: 1,
        seed,
        ..Default::default()
    };
    let s = generate_scene(&cfg).unwrap();
    let out = run_pipeline(&s.bundle, &PipelineConfig::default()).unwrap();
    (out.panoptic.clone(), s.gt, out, cfg.thing_ids())
}

fn all_pece(
    pred: &PanopticMap,
    gt: &GroundTruth,
    m: &SegmentMatching,
    things: &BTreeSet<ClassId>,
    out: &panu::PipelineOutput,
) -> [Option<f64>; 3] {
    let ctx = SegmentContext {
        pred,
        gt,
        matching: m,
        ignore_label: 255,
        thing_ids: things,
        bins: 10,
    };
    [
        pece(ctx, &out.unc_total).unwrap(),
        pece_spa(ctx, out.unc_spa.as_ref().unwrap()).unwrap(),
        pece_sem(ctx, &out.unc_sem).unwrap(),
    ]
}

#[test]
fn metrics_invariant_to_instance_relabelling() {
    for seed in 0..10 {
        let (pred, gt, out, things) = noisy_scene(seed);
        let m = match_segments(&pred, &gt, 255, &things).unwrap();
        let (perm, _) = permute_instances(&pred, seed);
        let mp = match_segments(&perm, &gt, 255, &things).unwrap();
        assert_eq!(panoptic_quality(&m).overall, panoptic_quality(&mp).overall);
        let a = all_pece(&pred, &gt, &m, &things, &out);
        let b = all_pece(&perm, &gt, &mp, &things, &out);
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert!((0.0..=1.0).contains(&x));
            assert!((x - y).abs() < 1e-12, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn pece_sem_ignores_instance_association_under_fixed_matching() {
    let (pred, gt, out, things) = noisy_scene(3);
    let m = match_segments(&pred, &gt, 255, &things).unwrap();
    let (perm, map) = permute_instances(&pred, 9);
    let key = |k: SegmentKey| SegmentKey::new(k.class, map[&k.instance]);
    let moved = SegmentMatching {
        true_positives: m
            .true_positives
            .iter()
            .map(|tp| panu::metrics::TruePositive { pred: key(tp.pred), ..*tp })
            .collect(),
        false_positives: m.false_positives.iter().copied().map(key).collect(),
        false_negatives: m.false_negatives.clone(),
    };
    let ctx = |p, mm| SegmentContext {
        pred: p,
        gt: &gt,
        matching: mm,
        ignore_label: 255,
        thing_ids: &things,
        bins: 10,
    };
    let a = pece_sem(ctx(&pred, &m), &out.unc_sem).unwrap().unwrap();
    let b = pece_sem(ctx(&perm, &moved), &out.unc_sem).unwrap().unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn perfect_confident_prediction_has_zero_pece() {
    let s = generate_scene(&SceneConfig {
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let things = s.bundle.thing_ids.clone();
    let pred = PanopticMap {
        class_id: s.gt.semantic().clone(),
        instance_id: s.gt.instances().clone(),
    };
    let m = match_segments(&pred, &s.gt, 255, &things).unwrap();
    let zero = UncertaintyMap::zeros(64, 64);
    let ctx = SegmentContext {
        pred: &pred,
        gt: &s.gt,
        matching: &m,
        ignore_label: 255,
        thing_ids: &things,
        bins: 10,
    };
    assert_eq!(pece(ctx, &zero).unwrap(), Some(0.0));
    assert_eq!(pece_spa(ctx, &zero).unwrap(), Some(0.0));
    assert_eq!(pece_sem(ctx, &zero).unwrap(), Some(0.0));
}

#[test]
fn gt_offsets_reproduce_known_mean_length() {
    for seed in 0..5 {
        let s = generate_scene(&SceneConfig {
            num_instances: 6,
            seed,
            ..Default::default()
        })
        .unwrap();
        let mask = s.gt.thing_mask(&s.bundle.thing_ids);
        let st = offset_stats(&OffsetField::Point(s.gt_offsets.clone()), s.gt_offsets.view(), mask.view()).unwrap();
        assert!((st.avg_length - s.mean_offset_length).abs() < 1e-9);
        assert_eq!(st.rmse, 0.0);
    }
}

proptest! {
    #[test]
    fn uece_in_unit_interval(v in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..300), r in 1usize..20) {
        let (bits, conf): (Vec<bool>, Vec<f64>) = v.into_iter().unzip();
        let e = uece(&bits, &conf, r).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, brute_force_uece(&bits, &conf, r));
    }

    #[test]
    fn void_filled_prediction_recovers_every_segment(seed in 0u64..10_000) {
        let (_, gt, things) = random_panoptic_pair(16, seed);
        let pred = PanopticMap {
            class_id: gt.semantic().mapv(|c| if c == 255 { 0 } else { c }),
            instance_id: gt.instances().clone(),
        };
        let m = match_segments(&pred, &gt, 255, &things).unwrap();
        // every gt segment is recovered; extra pixels only sit on void
        prop_assert_eq!(m.false_negatives.len(), 0);
        prop_assert_eq!(panoptic_quality(&m).overall.pq, brute_force_pq(&pred, &gt, 255, &things));
    }
}
