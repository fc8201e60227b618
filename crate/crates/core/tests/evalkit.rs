use proptest::prelude::*;
use ragan::datakit::{load_kin_pairs, synthesize_kinface, KinDataset, KinPair, Relation};
use ragan::evalkit::*;
use ragan::imageio::load_normalized;
use ragan::{AgeValue, Image32, RaceLabel, RaganError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(n: usize, seed: u64) -> (Vec<RaceLabel>, Vec<RaceLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || RaceLabel::from_index(rng.gen_range(0..4)).unwrap();
    let truth: Vec<_> = (0..n).map(|_| draw()).collect();
    let preds: Vec<_> = (0..n).map(|_| draw()).collect();
    (preds, truth)
}

#[test]
fn confusion_metrics_match_brute_force() {
    let (preds, truth) = random_labels(1000, 42);
    let m = confusion_matrix(&preds, &truth).unwrap();
    assert_eq!(m.total(), 1000);
    let metrics = prf1(&m);
    for c in RaceLabel::ALL {
        let pairs = || preds.iter().zip(&truth);
        let tp = pairs().filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pairs().filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pairs().filter(|(p, t)| **p != c && **t == c).count() as f64;
        let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
        let got = metrics[c.index()];
        assert!((got.precision - p).abs() < 1e-12);
        assert!((got.recall - r).abs() < 1e-12);
        assert!((got.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }
    let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64;
    assert!((m.accuracy() - correct / 1000.0).abs() < 1e-12);
}

#[test]
fn metrics_edge_cases() {
    assert!(confusion_matrix(&[], &[]).is_err());
    assert!(confusion_matrix(&[RaceLabel::Asian], &[]).is_err());
    // Black never predicted and never present: all zeros, no NaN.
    let m = confusion_matrix(
        &[RaceLabel::Asian, RaceLabel::White],
        &[RaceLabel::Asian, RaceLabel::Asian],
    )
    .unwrap();
    let black = prf1(&m)[RaceLabel::Black.index()];
    assert_eq!((black.precision, black.recall, black.f1), (0.0, 0.0, 0.0));
    assert_eq!(f1_score(0.0, 0.0), 0.0);
    assert!(mean_std(&[]).0.is_nan());
    assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
}

proptest! {
    #[test]
    fn accuracy_is_trace_over_total(n in 1usize..300, seed in any::<u64>()) {
        let (preds, truth) = random_labels(n, seed);
        let m = confusion_matrix(&preds, &truth).unwrap();
        prop_assert_eq!(m.total(), n as u64);
        prop_assert!((m.accuracy() - m.trace() as f64 / n as f64).abs() < 1e-12);
        prop_assert!((micro_recall(&m) - m.accuracy()).abs() < 1e-12);
        let rows: u64 = (0..4).map(|i| m.row_sum(i)).sum();
        let cols: u64 = (0..4).map(|j| m.col_sum(j)).sum();
        prop_assert_eq!((rows, cols), (m.total(), m.total()));
        for c in prf1(&m) {
            prop_assert!((0.0..=1.0).contains(&c.f1));
            prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
        }
    }

    #[test]
    fn merge_adds_counts(seed in any::<u64>()) {
        let (p1, t1) = random_labels(50, seed);
        let (p2, t2) = random_labels(70, seed ^ 1);
        let mut a = confusion_matrix(&p1, &t1).unwrap();
        a.merge(&confusion_matrix(&p2, &t2).unwrap());
        let all = confusion_matrix(&[p1, p2].concat(), &[t1, t2].concat()).unwrap();
        prop_assert_eq!(a, all);
    }
}

// Printed differences are rounded, so allow one unit in the last place.
const PRINT_SLACK: f64 = 0.011;

#[test]
fn published_race_accuracy_differences_are_consistent() {
    for r in &reference::RACE_ACCURACY {
        assert!(
            (r.ours - r.sam - r.vs_sam).abs() < PRINT_SLACK,
            "age {}",
            r.age
        );
        if let (Some(c), Some(d)) = (r.cusp, r.vs_cusp) {
            assert!((r.ours - c - d).abs() < PRINT_SLACK, "age {}", r.age);
        }
    }
}

#[test]
fn published_f1_agrees_with_precision_and_recall() {
    // Inputs are rounded to two places, which moves 2PR/(P+R) by < 0.0075.
    for (race, rows) in &reference::PRF1 {
        for &(age, p, r, f1) in rows {
            assert!((f1_score(p, r) - f1).abs() < 0.0075, "{race} {age}");
        }
    }
}

#[test]
fn published_kinship_improvements_are_best_minus_base() {
    for row in &reference::KINSHIP {
        let got = improvement(row.base, row.aged).unwrap();
        match row.printed_improvement {
            Some(p) => assert!(
                (got - p).abs() < PRINT_SLACK,
                "{} {}",
                row.dataset,
                row.relation
            ),
            None => assert!((got - -0.8).abs() < 1e-9),
        }
    }
}

/// Test images carry their label in the first pixel.
fn tagged(v: f32) -> Image32 {
    let mut data = vec![0.0; 3 * 2 * 2];
    data[0] = v;
    Image32::new(3, 2, 2, data).unwrap()
}

struct EchoClassifier;

impl RaceClassifier<f32> for EchoClassifier {
    fn classify(&self, x: &Image32) -> Result<RaceLabel> {
        Ok(RaceLabel::from_index((x.data()[0] * 10.0).round() as usize).unwrap())
    }
}

/// Writes the target age, scaled, into the last pixel.
struct StampAger;

impl Ager<f32> for StampAger {
    fn age(&self, x: &Image32, target: AgeValue) -> Result<Image32> {
        let mut d = x.data().to_vec();
        *d.last_mut().unwrap() = target.years() as f32 / 200.0;
        Image32::new(3, 2, 2, d)
    }
}

struct StampReader {
    bias: f64,
    unavailable_after: Option<f64>,
}

impl AgeEstimator<f32> for StampReader {
    fn estimate(&self, x: &Image32) -> Result<f64> {
        let age = (*x.data().last().unwrap() as f64 * 200.0).round();
        if self.unavailable_after.is_some_and(|a| age > a) {
            return Err(RaganError::EstimatorUnavailable("weights missing".into()));
        }
        Ok(age + self.bias)
    }
}

fn labeled_set() -> Vec<(Image32, RaceLabel)> {
    (0..20)
        .map(|i| RaceLabel::from_index(i % 4).unwrap())
        .map(|r| (tagged(r.index() as f32 / 10.0), r))
        .collect()
}

#[test]
fn perfect_classifier_scores_every_group_fully() {
    let reports = racial_accuracy_by_age(
        &StampAger,
        &FullFrame,
        &EchoClassifier,
        &labeled_set(),
        &AGE_GROUPS,
    )
    .unwrap();
    assert_eq!(reports.len(), 7);
    for r in &reports {
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.failures, 0);
        assert!(r.metrics.iter().all(|m| m.f1 == 1.0));
    }
    let csv = csv_report::race(&reports);
    assert_eq!(csv.lines().count(), 8);
    assert!(
        racial_accuracy_by_age(&StampAger, &FullFrame, &EchoClassifier, &labeled_set(), &[])
            .is_err()
    );
    assert!(racial_accuracy_by_age(
        &StampAger,
        &FullFrame,
        &EchoClassifier,
        &labeled_set(),
        &[200]
    )
    .is_err());
}

struct Raw;

impl Embedder<f32> for Raw {
    fn embed(&self, x: &Image32) -> Result<Vec<f64>> {
        Ok(x.data().iter().map(|v| *v as f64).collect())
    }
}

/// Moves all mass to a position orthogonal to any tagged input.
struct OrthogonalAger;

impl Ager<f32> for OrthogonalAger {
    fn age(&self, _x: &Image32, _t: AgeValue) -> Result<Image32> {
        let mut d = vec![0.0; 12];
        d[5] = 1.0;
        Image32::new(3, 2, 2, d)
    }
}

#[test]
fn identity_similarity_extremes() {
    let set: Vec<Image32> = (1..6).map(|i| tagged(i as f32 * 0.1)).collect();
    for row in identity_preservation(&IdentityAger, &Raw, &set, &[20, 80]).unwrap() {
        assert!((row.mean - 1.0).abs() < 1e-12 && row.std < 1e-12);
        assert_eq!(row.count, 5);
    }
    for row in identity_preservation(&OrthogonalAger, &Raw, &set, &[40]).unwrap() {
        assert_eq!((row.mean, row.std), (0.0, 0.0));
    }
    let with_zero = vec![tagged(0.0), tagged(0.5)];
    let rows = identity_preservation(&IdentityAger, &Raw, &with_zero, &[30]).unwrap();
    assert_eq!((rows[0].count, rows[0].zero_norm), (1, 1));
}

#[test]
fn mae_oracle_bias_and_abort() {
    let set: Vec<Image32> = (0..30).map(|i| tagged(i as f32 * 0.01)).collect();
    let exact = StampReader {
        bias: 0.0,
        unavailable_after: None,
    };
    let r = age_mae(&StampAger, &exact, &set, &AGE_GROUPS, None, 0).unwrap();
    assert!(r.aborted.is_none());
    assert!(r.rows.iter().all(|row| row.mean == 0.0 && row.count == 30));

    let biased = StampReader {
        bias: 3.0,
        unavailable_after: None,
    };
    let r = age_mae(&StampAger, &biased, &set, &AGE_GROUPS, Some(10), 7).unwrap();
    assert!(r
        .rows
        .iter()
        .all(|row| (row.mean - 3.0).abs() < 1e-12 && row.std < 1e-12 && row.count == 10));

    let partial = StampReader {
        bias: 0.0,
        unavailable_after: Some(40.0),
    };
    let r = age_mae(&StampAger, &partial, &set, &AGE_GROUPS, None, 0).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.aborted.as_deref(), Some("weights missing"));
}

#[test]
fn mae_sampling_is_seeded() {
    struct Index;
    impl AgeEstimator<f32> for Index {
        fn estimate(&self, x: &Image32) -> Result<f64> {
            Ok(x.data()[0] as f64 * 100.0)
        }
    }
    let set: Vec<Image32> = (0..40).map(|i| tagged(i as f32 * 0.01)).collect();
    let run = |seed| {
        age_mae(&IdentityAger, &Index, &set, &[50], Some(8), seed)
            .unwrap()
            .rows[0]
            .mean
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

fn synthetic_pairs(dir: &std::path::Path) -> Vec<KinPair> {
    synthesize_kinface(dir, KinDataset::KinFaceWI, 8).unwrap();
    load_kin_pairs(dir, KinDataset::KinFaceWI).unwrap()
}

#[test]
fn colour_oracle_is_perfect_on_synthetic_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(dir.path());
    let modes: Vec<KinMode> = std::iter::once(KinMode::Base)
        .chain(KIN_AGES.map(KinMode::Age))
        .collect();
    let prepare = |p: &std::path::Path| load_normalized::<f32>(p);
    let reports = kinship_protocol(
        &pairs,
        &prepare,
        &IdentityAger,
        &mut MeanColourOracle::default(),
        &modes,
    )
    .unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            assert_eq!(row.accuracy, 100.0, "{} {}", r.relation, row.mode);
            assert_eq!(row.folds.len(), 5);
        }
        assert_eq!(r.improvement(), Some(0.0));
    }
    let csv = csv_report::kinship("KinFaceW-I", &reports);
    assert_eq!(csv.lines().count(), 1 + 24);
}

#[test]
fn unbalanced_fold_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = synthetic_pairs(dir.path());
    let i = pairs
        .iter()
        .position(|p| p.relation == Relation::FD && !p.kin && p.fold == 2)
        .unwrap();
    pairs.remove(i);
    let prepare = |p: &std::path::Path| load_normalized::<f32>(p);
    let r = kinship_protocol(
        &pairs,
        &prepare,
        &IdentityAger,
        &mut MeanColourOracle::default(),
        &[KinMode::Base],
    );
    assert!(matches!(r, Err(RaganError::Protocol(_))));
}

#[test]
fn cosine_threshold_separates_scores() {
    let scored = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
    let t = fit_threshold(&scored);
    assert!(t > 0.3 && t < 0.8);
    assert_eq!(improvement(90.0, [88.0, 89.5]), Some(-0.5));
    assert_eq!(improvement(90.0, []), None);
    assert_eq!("base".parse::<KinMode>().unwrap(), KinMode::Base);
    assert_eq!("40".parse::<KinMode>().unwrap(), KinMode::Age(40));
    assert!("400".parse::<KinMode>().is_err());
}
