mod common;

use std::thread;
use std::time::Duration;

use derec::corpus::LabelScheme;
use derec::eval::{profile_run, score, ConfusionMatrix, Stage};
use derec::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(scheme: LabelScheme, idx: &[usize]) -> Vec<derec::corpus::VeracityLabel> {
    idx.iter().map(|&i| scheme.label_at(i)).collect()
}

#[test]
fn worked_confusion_example() {
    // Confusion [[2,1,0],[0,2,0],[1,0,2]]; values from oracles/metric_cases.py.
    let s = LabelScheme::ThreeClass;
    let gold = labels(s, &[0, 0, 0, 1, 1, 2, 2, 2]);
    let pred = labels(s, &[0, 0, 1, 1, 1, 0, 2, 2]);
    let r = score(&gold, &pred, s).unwrap();
    assert_eq!(r.confusion, ConfusionMatrix { scheme: s, counts: vec![vec![2, 1, 0], vec![0, 2, 0], vec![1, 0, 2]] });
    assert_eq!(r.macro_f1, 0.7555555555555555);
    assert_eq!(r.macro_p, 0.7777777777777777);
    assert_eq!(r.accuracy, 0.75);
}

#[test]
fn score_is_invariant_to_joint_permutation() {
    let s = LabelScheme::SixClass;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pairs: Vec<(usize, usize)> = (0..200).map(|_| (rng.random_range(0..6), rng.random_range(0..6))).collect();
    let split = |p: &[(usize, usize)]| {
        let (g, q): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
        (labels(s, &g), labels(s, &q))
    };
    let (g, q) = split(&pairs);
    let before = score(&g, &q, s).unwrap();
    pairs.shuffle(&mut rng);
    let (g, q) = split(&pairs);
    assert_eq!(score(&g, &q, s).unwrap(), before);
}

#[test]
fn uniform_random_predictions_score_near_chance() {
    for scheme in [LabelScheme::ThreeClass, LabelScheme::SixClass] {
        let c = scheme.class_count();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gold: Vec<usize> = (0..10_000).map(|i| i % c).collect();
        let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..c)).collect();
        let r = score(&labels(scheme, &gold), &labels(scheme, &pred), scheme).unwrap();
        assert!((r.macro_f1 - 1.0 / c as f64).abs() <= 0.03, "{c}: {}", r.macro_f1);
    }
}

#[test]
fn length_mismatch_is_an_error() {
    let s = LabelScheme::ThreeClass;
    let err = score(&labels(s, &[0, 1]), &labels(s, &[0]), s).unwrap_err();
    assert!(matches!(err, Error::LengthMismatch { left: 2, right: 1 }));
}

#[test]
fn sleep_injected_stages_are_measured() {
    let (report, out) = profile_run(|p| {
        p.stage(Stage::EvidenceExtraction, || {
            thread::sleep(Duration::from_millis(100));
            Ok(())
        })?;
        p.stage(Stage::EvidenceRetrieval, || {
            thread::sleep(Duration::from_millis(100));
            Ok(())
        })?;
        p.stage(Stage::VeracityPrediction, || -> derec::Result<()> {
            thread::sleep(Duration::from_millis(50));
            Err(Error::InvalidArgument("boom".into()))
        })
    });
    assert!(out.is_err());
    assert!(!report.complete);
    assert_eq!(report.failed_stage.as_deref(), Some("Veracity Prediction"));
    for stage in [Stage::EvidenceExtraction, Stage::EvidenceRetrieval] {
        let s = report.stage_seconds(stage).unwrap();
        assert!((s - 0.1).abs() <= 0.02, "{stage:?}: {s}");
    }
    assert_eq!(report.stage_seconds(Stage::VeracityPrediction), None);
    assert!(report.table().contains("INCOMPLETE"));
}
