use dafss_core::error::CoreError;
use dafss_core::eval::{accumulate, evaluate};
use dafss_core::gradcheck::miniature_episode;
use dafss_core::metrics::{confusion_matrix, macc, miou, ConfusionMatrix, MetricsReport};
use dafss_core::model::{Model, ModelConfig, Variant};
use dafss_core::trainer::snapshot;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-point counting of TP, FP and FN for class `c`.
fn counts(preds: &[usize], labels: &[usize], c: usize) -> (usize, usize, usize) {
    let mut t = (0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == c, l == c) {
            (true, true) => t.0 += 1,
            (true, false) => t.1 += 1,
            (false, true) => t.2 += 1,
            _ => {}
        }
    }
    t
}

fn oracle_miou(preds: &[usize], labels: &[usize], fg: &[usize]) -> Option<f64> {
    let ious: Vec<f64> = fg
        .iter()
        .filter_map(|&c| {
            let (tp, fp, fn_) = counts(preds, labels, c);
            (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64)
        })
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn oracle_macc(preds: &[usize], labels: &[usize], fg: &[usize]) -> Option<f64> {
    let recalls: Vec<f64> = fg
        .iter()
        .filter_map(|&c| {
            let (tp, _, fn_) = counts(preds, labels, c);
            (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
        })
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

fn random_fixture(seed: u64) -> (Vec<usize>, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..6);
    let n = rng.random_range(1..200);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let preds = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (preds, labels, classes)
}

#[test]
fn metrics_match_counting_oracles_on_random_fixtures() {
    for seed in 0..40 {
        let (preds, labels, classes) = random_fixture(seed);
        let m = confusion_matrix(&preds, &labels, classes).unwrap();
        let fg: Vec<usize> = (1..classes).collect();
        match oracle_miou(&preds, &labels, &fg) {
            Some(want) => assert_eq!(miou(&m, &fg).unwrap().1, want, "seed {seed}"),
            None => assert!(miou(&m, &fg).is_err()),
        }
        match oracle_macc(&preds, &labels, &fg) {
            Some(want) => assert_eq!(macc(&m, &fg).unwrap(), want, "seed {seed}"),
            None => assert!(macc(&m, &fg).is_err()),
        }
        for l in 0..classes {
            for p in 0..classes {
                let n = preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == l).count();
                assert_eq!(m.get(l, p), n as u64);
            }
        }
    }
}

#[test]
fn ten_point_confusion_fixture() {
    let labels = [0, 0, 1, 1, 1, 2, 2, 0, 1, 2];
    let preds = [0, 1, 1, 1, 0, 2, 1, 0, 1, 2];
    let m = confusion_matrix(&preds, &labels, 3).unwrap();
    let expected = [[2, 1, 0], [1, 3, 0], [0, 1, 2]];
    for (l, row) in expected.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            assert_eq!(m.get(l, p), n);
        }
    }
    assert_eq!(m.total(), 10);
}

#[test]
fn perfect_predictions_score_one() {
    let labels = [0, 1, 2, 1, 0];
    let m = confusion_matrix(&labels, &labels, 3).unwrap();
    for l in 0..3 {
        for p in 0..3 {
            assert_eq!(m.get(l, p) > 0, l == p && labels.contains(&l));
        }
    }
    assert_eq!(miou(&m, &[1, 2]).unwrap().1, 1.0);
    assert_eq!(macc(&m, &[1, 2]).unwrap(), 1.0);
}

#[test]
fn complement_prediction_scores_zero() {
    let labels = [0, 1, 1, 0, 1];
    let preds: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    let m = confusion_matrix(&preds, &labels, 2).unwrap();
    assert_eq!(miou(&m, &[1]).unwrap().1, 0.0);
}

#[test]
fn hand_counted_iou_and_recall() {
    // Class 1: TP 3, FP 1, FN 2.
    let labels = [1, 1, 1, 1, 1, 0, 0];
    let preds = [1, 1, 1, 0, 0, 1, 0];
    let m = confusion_matrix(&preds, &labels, 2).unwrap();
    assert_eq!(miou(&m, &[1]).unwrap().1, 0.5);
    // Class 1: TP 3, FN 1.
    let m = confusion_matrix(&[1, 1, 1, 0], &[1, 1, 1, 1], 2).unwrap();
    assert_eq!(macc(&m, &[1]).unwrap(), 0.75);
}

#[test]
fn predicting_all_foreground_recalls_everything() {
    let labels = [0, 1, 0, 0, 1, 0];
    let m = confusion_matrix(&[1; 6], &labels, 2).unwrap();
    assert_eq!(macc(&m, &[1]).unwrap(), 1.0);
    assert!(miou(&m, &[1]).unwrap().1 < 1.0);
}

#[test]
fn absent_classes_leave_the_mean() {
    let m = confusion_matrix(&[0, 1, 1], &[0, 1, 0], 4).unwrap();
    let (per_class, mean) = miou(&m, &[1, 2, 3]).unwrap();
    assert_eq!(per_class.keys().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(mean, 0.5);
}

#[test]
fn metric_errors() {
    let m = confusion_matrix(&[0, 0], &[0, 0], 2).unwrap();
    assert!(matches!(miou(&m, &[1]), Err(CoreError::UndefinedMetric(_))));
    assert!(matches!(macc(&m, &[1]), Err(CoreError::UndefinedMetric(_))));
    assert!(matches!(miou(&m, &[2]), Err(CoreError::Index { .. })));
    assert!(matches!(confusion_matrix(&[2], &[0], 2), Err(CoreError::Index { what: "prediction", .. })));
    assert!(matches!(confusion_matrix(&[0], &[5], 2), Err(CoreError::Index { what: "label", .. })));
    assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
    assert!(ConfusionMatrix::new(2).merge(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn report_mean_is_the_mean_of_its_classes() {
    let (preds, labels, classes) = random_fixture(77);
    let m = confusion_matrix(&preds, &labels, classes).unwrap();
    let r = MetricsReport::from_matrix(&m, 3, "abc", 9).unwrap();
    let mean = r.per_class_iou.values().sum::<f64>() / r.per_class_iou.len() as f64;
    assert!((r.miou - mean).abs() <= 1e-12);
    assert!(r.per_class_iou.values().chain([&r.miou, &r.macc]).all(|v| (0.0..=1.0).contains(v)));
    assert_eq!((r.episode_count, r.seed, r.config_hash.as_str()), (3, 9, "abc"));
}

#[test]
fn evaluation_is_additive_and_pure() {
    let model = Model::build(&ModelConfig::tiny(), Variant::DecoupledDam, 0).unwrap();
    let episodes: Vec<_> = (0..4).map(|s| miniature_episode(s, 32).unwrap()).collect();
    let ids: Vec<_> = model.store.ids().collect();
    let before = snapshot(&model, &ids);
    let (joint, n) = accumulate(&model, &episodes).unwrap();
    let (mut a, _) = accumulate(&model, &episodes[..2]).unwrap();
    let (b, _) = accumulate(&model, &episodes[2..]).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a, joint);
    assert_eq!(n, 4);
    assert_eq!(joint.total(), 4 * 32);
    assert_eq!(snapshot(&model, &ids), before);

    let r1 = evaluate(&model, &episodes, "h", 0).unwrap();
    let r2 = evaluate(&model, &episodes, "h", 0).unwrap();
    assert_eq!(r1, r2);
    assert!(matches!(evaluate(&model, &[], "h", 0), Err(CoreError::UndefinedMetric(_))));
}

proptest! {
    #[test]
    fn merged_matrices_equal_joint_counting(
        a in prop::collection::vec((0usize..3, 0usize..3), 0..50),
        b in prop::collection::vec((0usize..3, 0usize..3), 0..50),
    ) {
        let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
        let (pa, la) = split(&a);
        let (pb, lb) = split(&b);
        let mut m = confusion_matrix(&pa, &la, 3).unwrap();
        m.merge(&confusion_matrix(&pb, &lb, 3).unwrap()).unwrap();
        let joint = confusion_matrix(&[pa, pb].concat(), &[la, lb].concat(), 3).unwrap();
        prop_assert_eq!(m.total() as usize, a.len() + b.len());
        prop_assert_eq!(m, joint);
    }
}
