//! Property tests for the invariants of scores, metrics, losses, models and splits.

use ganomaly::datasets::{generate_synthetic_scenes, make_leave_one_out_split, RawImage, SceneConfig};
use ganomaly::evalmetrics::{confusion_at, derived_metrics, roc_auc, sweep_threshold, Criterion};
use ganomaly::losses::{adversarial_loss, contextual_loss, encoder_loss};
use ganomaly::model::{build_models, ArchConfig};
use ganomaly::scoring::{
    scale_global, scale_partitioned, scale_reference_range, Range, Scaling, ScoreSet, ScoredSample, Variant,
};
use ganomaly::tensor::Tensor;
use proptest::prelude::*;

fn set_of(raw: &[(f64, bool)]) -> ScoreSet {
    ScoreSet::unscaled(
        raw.iter()
            .enumerate()
            .map(|(i, (r, a))| ScoredSample {
                id: format!("s{i}"),
                raw_score: *r,
                scaled_score: None,
                anomaly_label: *a,
                source_label: String::new(),
                variant: Variant::V2,
            })
            .collect(),
    )
}

fn both_classes(v: &[(f64, bool)]) -> bool {
    v.iter().any(|x| x.1) && v.iter().any(|x| !x.1)
}

fn distinct_per_class(v: &[(f64, bool)]) -> bool {
    let spread = |a: bool| {
        let xs: Vec<f64> = v.iter().filter(|x| x.1 == a).map(|x| x.0).collect();
        xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
    };
    spread(true) > 0.0 && spread(false) > 0.0
}

/// Scores on a coarse grid so that ties are common.
fn scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((0u32..16).prop_map(|k| k as f64 * 0.75), any::<bool>()), 2..80)
        .prop_filter("both classes, spread in each", |v| both_classes(v) && distinct_per_class(v))
}

fn brute_auc(v: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for a in v.iter().filter(|x| x.1) {
        for n in v.iter().filter(|x| !x.1) {
            pairs += 1.0;
            wins += if a.0 > n.0 {
                1.0
            } else if a.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scaled_scores_stay_in_unit_interval_and_stats_follow_scaling(v in scores(), lo in 0.0f64..5.0, w in 0.1f64..10.0) {
        let set = set_of(&v);
        prop_assert!(set.stats.is_none());
        let reference = Range { min: lo, max: lo + w };
        for s in [scale_global(&set).unwrap(), scale_partitioned(&set).unwrap(), scale_reference_range(&set, reference).unwrap()] {
            prop_assert!(s.stats.is_some());
            prop_assert_eq!(s.label_dependent, s.scaling == Scaling::Partitioned);
            for x in &s.samples {
                let v = x.scaled_score.unwrap();
                prop_assert!((0.0..=1.0).contains(&v), "{} out of range", v);
                prop_assert!(x.raw_score >= 0.0);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting_and_flips_with_labels(v in scores()) {
        let auc = roc_auc(&set_of(&v)).unwrap();
        prop_assert!((auc - brute_auc(&v)).abs() <= 1e-12);
        let flipped: Vec<(f64, bool)> = v.iter().map(|(s, a)| (*s, !*a)).collect();
        prop_assert!((roc_auc(&set_of(&flipped)).unwrap() - (1.0 - auc)).abs() <= 1e-12);
    }

    #[test]
    fn confusion_counts_every_sample_and_metrics_recompute(v in scores(), tau in 0.0f64..1.0) {
        let set = scale_global(&set_of(&v)).unwrap();
        let cm = confusion_at(&set, tau).unwrap();
        prop_assert_eq!(cm.total(), v.len());
        let m = derived_metrics(&cm);
        for x in [m.f1, m.accuracy, m.precision, m.sensitivity] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(m.accuracy, (cm.tp + cm.tn) as f64 / cm.total() as f64);
        prop_assert_eq!(cm.novel_positive().novel_positive(), cm);
    }

    #[test]
    fn sweep_best_is_on_the_grid_and_dominates(v in scores(), lo in 0.0f64..0.5, span in 0.0f64..0.5, f1 in any::<bool>()) {
        let set = scale_global(&set_of(&v)).unwrap();
        let criterion = if f1 { Criterion::F1 } else { Criterion::Accuracy };
        let r = sweep_threshold(&set, lo, lo + span, 0.01, criterion).unwrap();
        prop_assert!(r.points.iter().any(|p| p.threshold == r.best_threshold));
        let first_best = r.points.iter().find(|p| p.metrics.get(criterion) == r.best_value).unwrap();
        prop_assert_eq!(first_best.threshold, r.best_threshold);
        for p in &r.points {
            prop_assert!(r.best_value >= p.metrics.get(criterion));
        }
    }

    #[test]
    fn latent_losses_are_symmetric_nonnegative_and_homogeneous(
        (n, a, b) in (1usize..4, 1usize..6).prop_flat_map(|(n, d)| (
            Just(n),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(-3.0f64..3.0, n * d),
        )),
        c in -4.0f64..4.0,
    ) {
        let ca: Vec<f64> = a.iter().map(|x| x * c).collect();
        let cb: Vec<f64> = b.iter().map(|x| x * c).collect();
        for f in [adversarial_loss::<f64>, encoder_loss::<f64>] {
            let l = f(&a, &b, n, false).unwrap().value;
            prop_assert!(l >= 0.0);
            prop_assert!((l - f(&b, &a, n, false).unwrap().value).abs() <= 1e-12);
            prop_assert!((f(&ca, &cb, n, false).unwrap().value - c.abs() * l).abs() <= 1e-9 * (1.0 + l));
        }
        let mut pa: Vec<f64> = a.clone();
        let mut pb: Vec<f64> = b.clone();
        pa.reverse();
        pb.reverse();
        let l = contextual_loss(&a, &b).unwrap().value;
        prop_assert!((l - contextual_loss(&pa, &pb).unwrap().value).abs() <= 1e-12);
    }

    #[test]
    fn leave_one_out_never_trains_on_the_novel_digit(labels in prop::collection::vec(0u8..10, 20..60), novel in 0u8..10, frac in 0.0f64..0.5) {
        prop_assume!(labels.contains(&novel) && labels.iter().any(|d| *d != novel));
        let pool: Vec<(RawImage, u8)> = labels
            .iter()
            .enumerate()
            .map(|(i, d)| (RawImage::new(format!("d{i}"), 28, 28, 1, vec![*d * 20; 784]).unwrap(), *d))
            .collect();
        let split = make_leave_one_out_split(&pool, novel, frac, 3, 32, 1).unwrap();
        let digit = novel.to_string();
        prop_assert!(split.train_normal.iter().all(|s| !s.anomaly_label && s.source_label != digit));
        for s in &split.test {
            prop_assert_eq!(s.anomaly_label, s.source_label == digit);
        }
        prop_assert_eq!(split.train_normal.len() + split.test.len(), pool.len());
        for s in split.train_normal.iter().chain(&split.test) {
            prop_assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(s.image.size(), 32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn encoders_share_shapes_not_values_and_d_outputs_probabilities(
        log2 in 5u32..7, channels in prop::sample::select(vec![1usize, 3]), d in 1usize..12, seed in 0u64..1000,
    ) {
        let size = 1usize << log2;
        let arch = ArchConfig::new(size, channels, d, 4);
        prop_assert_eq!(arch.stages() as u32, log2 - 2);
        let b = build_models(&arch, seed).unwrap();
        let ge: Vec<_> = b.gen_encoder.params().collect();
        let e: Vec<_> = b.encoder.params().collect();
        prop_assert_eq!(ge.len(), e.len());
        prop_assert!(ge.iter().zip(&e).all(|(x, y)| x.1.shape() == y.1.shape()));
        prop_assert!(ge.iter().zip(&e).any(|(x, y)| x.1.data() != y.1.data()));

        let n = 2;
        let x = Tensor::new(
            vec![n, channels, size, size],
            (0..n * channels * size * size).map(|i| ((i * 7919 + seed as usize) % 200) as f32 / 100.0 - 1.0).collect(),
        ).unwrap();
        let z = b.gen_encode(&x).unwrap();
        prop_assert_eq!(z.shape(), &[n, d][..]);
        let out = b.discriminate(&x).unwrap();
        prop_assert!(out.probability.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn synthetic_training_scenes_hold_no_novel_shape(seed in 0u64..500) {
        let cfg = SceneConfig { count: 30, image_size: 32, seed, ..SceneConfig::default() };
        let split = generate_synthetic_scenes(&cfg, 3).unwrap();
        prop_assert!(split.train_normal.iter().all(|s| !s.source_label.split(',').any(|c| c == "triangle")));
        for s in &split.test {
            prop_assert_eq!(s.anomaly_label, s.source_label.split(',').any(|c| c == "triangle"));
        }
    }
}

