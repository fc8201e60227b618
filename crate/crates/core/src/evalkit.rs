//! Race-fidelity, identity and age-accuracy metrics over aged images, and
//! the five-fold kinship verification harness.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use ragan_tensor::Scalar;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{cosine_similarity, eval};
use crate::datakit::{KinPair, Relation, FOLDS};
use crate::domain::{AgeValue, ImageTensor, RaceLabel};
use crate::error::{RaganError, Result};
use crate::model::RaGan;

/// Target ages of the race, identity and age reports.
pub const AGE_GROUPS: [u32; 7] = [20, 30, 40, 50, 60, 70, 80];
/// Target ages of the kinship runs.
pub const KIN_AGES: [u32; 5] = [20, 30, 40, 50, 60];

/// Rows are the true label, columns the prediction, both in
/// [`RaceLabel::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix4 {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix4 {
    pub fn record(&mut self, truth: RaceLabel, pred: RaceLabel) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn get(&self, truth: RaceLabel, pred: RaceLabel) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// `trace / total`, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..4 {
            for j in 0..4 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(preds: &[RaceLabel], truth: &[RaceLabel]) -> Result<ConfusionMatrix4> {
    if preds.len() != truth.len() {
        return Err(RaganError::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(RaganError::Validation("no samples to tabulate".into()));
    }
    let mut m = ConfusionMatrix4::default();
    for (&p, &t) in preds.iter().zip(truth) {
        m.record(t, p);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class metrics in [`RaceLabel::ALL`] order; a zero denominator gives 0.
pub fn prf1(m: &ConfusionMatrix4) -> [ClassMetrics; 4] {
    std::array::from_fn(|c| {
        let tp = m.counts[c][c];
        let precision = ratio(tp, m.col_sum(c));
        let recall = ratio(tp, m.row_sum(c));
        ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    })
}

/// Pooled recall over all classes.
pub fn micro_recall(m: &ConfusionMatrix4) -> f64 {
    let tp: u64 = (0..4).map(|c| m.counts[c][c]).sum();
    let pos: u64 = (0..4).map(|c| m.row_sum(c)).sum();
    ratio(tp, pos)
}

/// Produces an aged image; implemented by the model and by test doubles.
pub trait Ager<T: Scalar> {
    fn age(&self, x: &ImageTensor<T>, target: AgeValue) -> Result<ImageTensor<T>>;
}

impl<T: Scalar> Ager<T> for RaGan<T> {
    fn age(&self, x: &ImageTensor<T>, target: AgeValue) -> Result<ImageTensor<T>> {
        Ok(self.ra_gan_forward(x, target, target)?.0)
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityAger;

impl<T: Scalar> Ager<T> for IdentityAger {
    fn age(&self, x: &ImageTensor<T>, _target: AgeValue) -> Result<ImageTensor<T>> {
        Ok(x.clone())
    }
}

pub trait FaceCropper<T: Scalar> {
    fn crop(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>>;
}

/// Keeps the whole frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullFrame;

impl<T: Scalar> FaceCropper<T> for FullFrame {
    fn crop(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        Ok(x.clone())
    }
}

pub trait RaceClassifier<T: Scalar> {
    fn classify(&self, x: &ImageTensor<T>) -> Result<RaceLabel>;
}

pub trait AgeEstimator<T: Scalar> {
    fn estimate(&self, x: &ImageTensor<T>) -> Result<f64>;
}

pub trait Embedder<T: Scalar> {
    fn embed(&self, x: &ImageTensor<T>) -> Result<Vec<f64>>;
}

/// The model's own race, identity and age backbones as evaluators.
#[derive(Clone, Copy, Debug)]
pub struct BackboneEvaluators<'a, T: Scalar> {
    pub model: &'a RaGan<T>,
}

impl<'a, T: Scalar> BackboneEvaluators<'a, T> {
    pub fn new(model: &'a RaGan<T>) -> Self {
        Self { model }
    }

    fn batch(x: &ImageTensor<T>) -> Result<ragan_tensor::Tensor<T>> {
        ImageTensor::batch(std::slice::from_ref(x))
    }
}

impl<T: Scalar> RaceClassifier<T> for BackboneEvaluators<'_, T> {
    fn classify(&self, x: &ImageTensor<T>) -> Result<RaceLabel> {
        let m = self.model;
        Ok(eval::classify_race(&m.backbones.race, &m.store, &Self::batch(x)?)?[0])
    }
}

impl<T: Scalar> AgeEstimator<T> for BackboneEvaluators<'_, T> {
    fn estimate(&self, x: &ImageTensor<T>) -> Result<f64> {
        let m = self.model;
        Ok(eval::estimate_age(&m.backbones.age, &m.store, &Self::batch(x)?)?[0])
    }
}

impl<T: Scalar> Embedder<T> for BackboneEvaluators<'_, T> {
    fn embed(&self, x: &ImageTensor<T>) -> Result<Vec<f64>> {
        let m = self.model;
        let e = eval::identity_embedding(&m.backbones.identity, &m.store, &Self::batch(x)?)?;
        Ok(e.row(0).iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// Note stamped into age reports produced with the toy age backbone.
pub const TOY_ESTIMATOR_NOTE: &str =
    "estimates come from the bundled age backbone; uncalibrated unless real weights were loaded";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGroupReport {
    pub age: u32,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix4,
    pub metrics: [ClassMetrics; 4],
    /// Images whose ageing, cropping or classification failed.
    pub failures: usize,
}

impl AgeGroupReport {
    pub fn from_matrix(age: u32, matrix: ConfusionMatrix4, failures: usize) -> Self {
        Self {
            age,
            accuracy: matrix.accuracy(),
            matrix,
            metrics: prf1(&matrix),
            failures,
        }
    }
}

/// Ages every labeled image to each target, crops, classifies and tabulates.
pub fn racial_accuracy_by_age<T: Scalar>(
    ager: &dyn Ager<T>,
    cropper: &dyn FaceCropper<T>,
    classifier: &dyn RaceClassifier<T>,
    eval_set: &[(ImageTensor<T>, RaceLabel)],
    ages: &[u32],
) -> Result<Vec<AgeGroupReport>> {
    check_ages(ages)?;
    let mut out = Vec::with_capacity(ages.len());
    for &age in ages {
        let target = AgeValue::new(age as f64)?;
        let mut m = ConfusionMatrix4::default();
        let mut failures = 0;
        for (x, truth) in eval_set {
            let pred = ager
                .age(x, target)
                .and_then(|y| cropper.crop(&y))
                .and_then(|y| classifier.classify(&y));
            match pred {
                Ok(p) => m.record(*truth, p),
                Err(_) => failures += 1,
            }
        }
        out.push(AgeGroupReport::from_matrix(age, m, failures));
    }
    Ok(out)
}

fn check_ages(ages: &[u32]) -> Result<()> {
    if ages.is_empty() {
        return Err(RaganError::Validation("no target ages given".into()));
    }
    for &a in ages {
        AgeValue::new(a as f64)?;
    }
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub age: u32,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Pairs skipped because an embedding had zero norm.
    pub zero_norm: usize,
    pub failures: usize,
}

/// Cosine similarity between each image's embedding and its aged version's.
pub fn identity_preservation<T: Scalar>(
    ager: &dyn Ager<T>,
    embedder: &dyn Embedder<T>,
    eval_set: &[ImageTensor<T>],
    ages: &[u32],
) -> Result<Vec<SimilarityRow>> {
    check_ages(ages)?;
    let sources: Vec<Result<Vec<f64>>> = eval_set.iter().map(|x| embedder.embed(x)).collect();
    let mut out = Vec::with_capacity(ages.len());
    for &age in ages {
        let target = AgeValue::new(age as f64)?;
        let (mut sims, mut zero_norm, mut failures) = (Vec::new(), 0, 0);
        for (x, src) in eval_set.iter().zip(&sources) {
            let pair = src
                .as_ref()
                .map_err(|e| RaganError::Validation(e.to_string()))
                .and_then(|a| {
                    let b = embedder.embed(&ager.age(x, target)?)?;
                    Ok(cosine_similarity(a, &b))
                });
            match pair {
                Ok(Some(s)) => sims.push(s),
                Ok(None) => zero_norm += 1,
                Err(_) => failures += 1,
            }
        }
        let (mean, std) = mean_std(&sims);
        out.push(SimilarityRow {
            age,
            mean,
            std,
            count: sims.len(),
            zero_norm,
            failures,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub age: u32,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub rows: Vec<MaeRow>,
    /// Set when the estimator became unavailable; `rows` holds the groups
    /// finished before that.
    pub aborted: Option<String>,
    pub note: Option<String>,
}

/// `|target − estimate|` per age group over up to `sample_size` images drawn
/// without replacement (all images when `None`).
pub fn age_mae<T: Scalar>(
    ager: &dyn Ager<T>,
    estimator: &dyn AgeEstimator<T>,
    eval_set: &[ImageTensor<T>],
    ages: &[u32],
    sample_size: Option<usize>,
    seed: u64,
) -> Result<MaeReport> {
    check_ages(ages)?;
    let mut rows = Vec::with_capacity(ages.len());
    for &age in ages {
        let target = AgeValue::new(age as f64)?;
        let picks: Vec<usize> = match sample_size {
            Some(k) if k < eval_set.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(age as u64);
                let mut v = sample(&mut rng, eval_set.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..eval_set.len()).collect(),
        };
        let (mut errs, mut failures) = (Vec::with_capacity(picks.len()), 0);
        for i in picks {
            let y = match ager.age(&eval_set[i], target) {
                Ok(y) => y,
                Err(_) => {
                    failures += 1;
                    continue;
                }
            };
            match estimator.estimate(&y) {
                Ok(e) if e.is_finite() => errs.push((age as f64 - e).abs()),
                Ok(_) => failures += 1,
                Err(RaganError::EstimatorUnavailable(why)) => {
                    return Ok(MaeReport {
                        rows,
                        aborted: Some(why),
                        note: None,
                    })
                }
                Err(_) => failures += 1,
            }
        }
        let (mean, std) = mean_std(&errs);
        rows.push(MaeRow {
            age,
            mean,
            std,
            count: errs.len(),
            failures,
        });
    }
    Ok(MaeReport {
        rows,
        aborted: None,
        note: None,
    })
}

/// Decides kinship from per-image features; fitted once per fold.
pub trait KinVerifier<T: Scalar> {
    type Feature: Clone;
    fn features(&self, x: &ImageTensor<T>) -> Result<Self::Feature>;
    fn fit(&mut self, train: &[(&Self::Feature, &Self::Feature, bool)]) -> Result<()>;
    fn verify(&self, parent: &Self::Feature, child: &Self::Feature) -> bool;
}

/// Thresholded cosine similarity of embeddings; the threshold maximizes
/// training accuracy.
pub struct CosineVerifier<E> {
    pub embedder: E,
    pub threshold: f64,
}

impl<E> CosineVerifier<E> {
    pub fn new(embedder: E) -> Self {
        Self {
            embedder,
            threshold: 0.0,
        }
    }
}

/// Threshold with the best training accuracy; ties keep the lowest.
pub fn fit_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut s: Vec<f64> = scored.iter().map(|p| p.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let Some(&last) = s.last() {
        candidates.push(last + 1.0);
    }
    let correct = |t: f64| scored.iter().filter(|(v, kin)| (*v >= t) == *kin).count();
    let mut best = (0, f64::NEG_INFINITY);
    for t in candidates {
        let c = correct(t);
        if c > best.0 {
            best = (c, t);
        }
    }
    best.1
}

impl<T: Scalar, E: Embedder<T>> KinVerifier<T> for CosineVerifier<E> {
    type Feature = Vec<f64>;

    fn features(&self, x: &ImageTensor<T>) -> Result<Vec<f64>> {
        self.embedder.embed(x)
    }

    fn fit(&mut self, train: &[(&Vec<f64>, &Vec<f64>, bool)]) -> Result<()> {
        let scored: Vec<(f64, bool)> = train
            .iter()
            .map(|(a, b, kin)| (cosine_similarity(a, b).unwrap_or(0.0), *kin))
            .collect();
        self.threshold = fit_threshold(&scored);
        Ok(())
    }

    fn verify(&self, parent: &Vec<f64>, child: &Vec<f64>) -> bool {
        cosine_similarity(parent, child).unwrap_or(0.0) >= self.threshold
    }
}

/// Knows the synthetic benchmark's construction: partners match when their
/// mean colours agree to within `tolerance` (pixel units, 0–255).
#[derive(Clone, Copy, Debug)]
pub struct MeanColourOracle {
    pub tolerance: f64,
}

impl Default for MeanColourOracle {
    fn default() -> Self {
        Self { tolerance: 4.0 }
    }
}

impl<T: Scalar> KinVerifier<T> for MeanColourOracle {
    type Feature = [f64; 3];

    fn features(&self, x: &ImageTensor<T>) -> Result<[f64; 3]> {
        if x.channels() < 3 {
            return Err(RaganError::Validation("colour oracle needs RGB".into()));
        }
        Ok(std::array::from_fn(|c| {
            let p = x.plane(c);
            let mean = p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / p.len() as f64;
            (mean + 1.0) * 127.5
        }))
    }

    fn fit(&mut self, _train: &[(&[f64; 3], &[f64; 3], bool)]) -> Result<()> {
        Ok(())
    }

    fn verify(&self, parent: &[f64; 3], child: &[f64; 3]) -> bool {
        parent
            .iter()
            .zip(child)
            .all(|(a, b)| (a - b).abs() <= self.tolerance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KinMode {
    Base,
    Age(u32),
}

impl fmt::Display for KinMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Base => f.write_str("base"),
            Self::Age(a) => write!(f, "{a}"),
        }
    }
}

impl std::str::FromStr for KinMode {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("base") {
            return Ok(Self::Base);
        }
        let a: u32 = s
            .parse()
            .map_err(|_| RaganError::Validation(format!("bad kinship age `{s}`")))?;
        AgeValue::new(a as f64)?;
        Ok(Self::Age(a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinRow {
    pub mode: KinMode,
    /// Mean of the fold accuracies, in percent.
    pub accuracy: f64,
    pub folds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinReport {
    pub relation: Relation,
    pub rows: Vec<KinRow>,
}

impl KinReport {
    pub fn accuracy(&self, mode: KinMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.accuracy)
    }

    /// Best aged accuracy minus base; negative when no age beats base.
    pub fn improvement(&self) -> Option<f64> {
        let base = self.accuracy(KinMode::Base)?;
        improvement(
            base,
            self.rows
                .iter()
                .filter(|r| r.mode != KinMode::Base)
                .map(|r| r.accuracy),
        )
    }
}

pub fn improvement(base: f64, aged: impl IntoIterator<Item = f64>) -> Option<f64> {
    aged.into_iter().reduce(f64::max).map(|best| best - base)
}

/// Checks that every fold holds as many kin as non-kin pairs.
pub fn check_folds(pairs: &[&KinPair]) -> Result<()> {
    let mut tally: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let e = tally.entry(p.fold).or_default();
        if p.kin {
            e.0 += 1
        } else {
            e.1 += 1
        }
    }
    for fold in 1..=FOLDS {
        match tally.get(&fold) {
            Some(&(k, n)) if k > 0 && k == n => {}
            Some(&(k, n)) => {
                return Err(RaganError::Protocol(format!(
                    "fold {fold}: {k} kin vs {n} non-kin pairs"
                )));
            }
            None => return Err(RaganError::Protocol(format!("fold {fold} is empty"))),
        }
    }
    if let Some(f) = tally.keys().find(|f| !(1..=FOLDS).contains(f)) {
        return Err(RaganError::Protocol(format!("fold {f} out of range")));
    }
    Ok(())
}

/// Five-fold verification per relation and mode. `prepare` turns a pair
/// list path into the full-face image fed to the ager (or used as-is for
/// [`KinMode::Base`]).
pub fn kinship_protocol<T: Scalar, V: KinVerifier<T>>(
    pairs: &[KinPair],
    prepare: &dyn Fn(&Path) -> Result<ImageTensor<T>>,
    ager: &dyn Ager<T>,
    verifier: &mut V,
    modes: &[KinMode],
) -> Result<Vec<KinReport>> {
    if modes.is_empty() {
        return Err(RaganError::Validation("no kinship modes given".into()));
    }
    let mut reports = Vec::new();
    for relation in Relation::ALL {
        let rel: Vec<&KinPair> = pairs.iter().filter(|p| p.relation == relation).collect();
        if rel.is_empty() {
            continue;
        }
        check_folds(&rel)?;
        let mut prepared: HashMap<PathBuf, ImageTensor<T>> = HashMap::new();
        for p in &rel {
            for path in [&p.parent, &p.child] {
                if !prepared.contains_key(path) {
                    prepared.insert(path.clone(), prepare(path)?);
                }
            }
        }
        let mut rows = Vec::with_capacity(modes.len());
        for &mode in modes {
            let mut feats: HashMap<&Path, V::Feature> = HashMap::new();
            for (path, x) in &prepared {
                let y = match mode {
                    KinMode::Base => x.clone(),
                    KinMode::Age(a) => ager.age(x, AgeValue::new(a as f64)?)?,
                };
                feats.insert(path.as_path(), verifier.features(&y)?);
            }
            let mut folds = Vec::with_capacity(FOLDS as usize);
            for fold in 1..=FOLDS {
                let train: Vec<_> = rel
                    .iter()
                    .filter(|p| p.fold != fold)
                    .map(|p| (&feats[p.parent.as_path()], &feats[p.child.as_path()], p.kin))
                    .collect();
                verifier.fit(&train)?;
                let test: Vec<_> = rel.iter().filter(|p| p.fold == fold).collect();
                let correct = test
                    .iter()
                    .filter(|p| {
                        verifier.verify(&feats[p.parent.as_path()], &feats[p.child.as_path()])
                            == p.kin
                    })
                    .count();
                folds.push(100.0 * correct as f64 / test.len() as f64);
            }
            rows.push(KinRow {
                mode,
                accuracy: folds.iter().sum::<f64>() / folds.len() as f64,
                folds,
            });
        }
        reports.push(KinReport { relation, rows });
    }
    Ok(reports)
}

/// Published full-scale results, kept as fixtures for report formatting and
/// arithmetic cross-checks. They are not reproducible with toy weights.
pub mod reference {
    use crate::datakit::{KinDataset, Relation};
    use crate::domain::RaceLabel;

    /// Race-classification accuracy (%) of aged images: age, this model,
    /// the SAM baseline, the CUSP baseline, and the two printed differences.
    pub struct RaceAccuracyRow {
        pub age: u32,
        pub ours: f64,
        pub sam: f64,
        pub cusp: Option<f64>,
        pub vs_sam: f64,
        pub vs_cusp: Option<f64>,
    }

    const fn row(
        age: u32,
        ours: f64,
        sam: f64,
        cusp: Option<f64>,
        vs_sam: f64,
        vs_cusp: Option<f64>,
    ) -> RaceAccuracyRow {
        RaceAccuracyRow {
            age,
            ours,
            sam,
            cusp,
            vs_sam,
            vs_cusp,
        }
    }

    pub const RACE_ACCURACY: [RaceAccuracyRow; 7] = [
        row(20, 75.59, 65.79, Some(78.21), 9.8, Some(-2.62)),
        row(30, 77.42, 67.10, Some(78.91), 10.32, Some(-1.49)),
        row(40, 76.64, 63.34, Some(78.82), 13.3, Some(-2.18)),
        row(50, 71.39, 55.38, Some(70.42), 16.01, Some(0.97)),
        row(60, 62.82, 48.38, Some(53.71), 14.44, Some(9.1)),
        row(70, 57.83, 42.43, None, 15.4, None),
        row(80, 49.26, 36.57, None, 12.69, None),
    ];

    /// Per-race (age, precision, recall, F1) of this model, the printed
    /// values rounded to two places.
    pub const PRF1: [(RaceLabel, [(u32, f64, f64, f64); 7]); 4] = [
        (
            RaceLabel::Indian,
            [
                (20, 0.73, 0.78, 0.76),
                (30, 0.77, 0.79, 0.78),
                (40, 0.79, 0.72, 0.75),
                (50, 0.80, 0.63, 0.70),
                (60, 0.74, 0.48, 0.58),
                (70, 0.66, 0.38, 0.48),
                (80, 0.57, 0.22, 0.31),
            ],
        ),
        (
            RaceLabel::Asian,
            [
                (20, 0.82, 0.77, 0.80),
                (30, 0.82, 0.76, 0.79),
                (40, 0.84, 0.73, 0.78),
                (50, 0.82, 0.62, 0.71),
                (60, 0.75, 0.54, 0.63),
                (70, 0.71, 0.53, 0.61),
                (80, 0.54, 0.57, 0.55),
            ],
        ),
        (
            RaceLabel::Black,
            [
                (20, 0.90, 0.59, 0.71),
                (30, 0.92, 0.68, 0.78),
                (40, 0.92, 0.71, 0.80),
                (50, 0.93, 0.67, 0.78),
                (60, 0.94, 0.57, 0.71),
                (70, 0.94, 0.46, 0.62),
                (80, 1.00, 0.25, 0.40),
            ],
        ),
        (
            RaceLabel::White,
            [
                (20, 0.67, 0.86, 0.75),
                (30, 0.68, 0.86, 0.76),
                (40, 0.63, 0.89, 0.74),
                (50, 0.55, 0.94, 0.69),
                (60, 0.47, 0.93, 0.62),
                (70, 0.44, 0.93, 0.60),
                (80, 0.41, 0.93, 0.57),
            ],
        ),
    ];

    /// Identity-preservation cosine similarity (age, mean, std) of this model.
    pub const IDENTITY: [(u32, f64, f64); 7] = [
        (20, 0.494, 0.089),
        (30, 0.488, 0.095),
        (40, 0.463, 0.099),
        (50, 0.427, 0.102),
        (60, 0.413, 0.099),
        (70, 0.414, 0.095),
        (80, 0.404, 0.094),
    ];

    /// Age MAE in years (age, mean, std) of this model.
    pub const AGE_MAE: [(u32, f64, f64); 7] = [
        (20, 6.52, 4.54),
        (30, 4.65, 3.75),
        (40, 4.83, 3.62),
        (50, 4.72, 3.61),
        (60, 4.66, 3.44),
        (70, 6.29, 4.45),
        (80, 9.84, 4.32),
    ];

    /// Kinship verification accuracy (%): base, then ages 20–60, then the
    /// printed improvement (`None` where none is printed).
    pub struct KinshipRow {
        pub dataset: KinDataset,
        pub relation: Relation,
        pub base: f64,
        pub aged: [f64; 5],
        pub printed_improvement: Option<f64>,
    }

    const fn kin(
        dataset: KinDataset,
        relation: Relation,
        base: f64,
        aged: [f64; 5],
        printed: Option<f64>,
    ) -> KinshipRow {
        KinshipRow {
            dataset,
            relation,
            base,
            aged,
            printed_improvement: printed,
        }
    }

    use KinDataset::{KinFaceWI as I, KinFaceWII as II};
    use Relation::{FD, FS, MD, MS};

    pub const KINSHIP: [KinshipRow; 8] = [
        kin(I, FD, 72.1, [76.92, 76.56, 77.32, 76.56, 76.55], Some(5.22)),
        kin(
            I,
            FS,
            74.04,
            [78.53, 78.86, 78.86, 79.19, 78.87],
            Some(5.15),
        ),
        kin(
            I,
            MD,
            83.86,
            [85.49, 85.43, 85.03, 85.03, 83.86],
            Some(1.63),
        ),
        kin(I, MS, 71.52, [71.5, 70.65, 71.5, 71.93, 71.93], Some(0.41)),
        kin(II, FD, 85.2, [87.35, 87.73, 87.35, 87.73, 88.10], Some(2.9)),
        kin(II, FS, 90.0, [90.19, 89.8, 90.39, 89.8, 89.4], Some(0.39)),
        kin(II, MD, 92.2, [90.39, 90.19, 90.8, 91.4, 91.0], None),
        kin(II, MS, 88.2, [89.8, 89.4, 89.2, 89.2, 88.0], Some(1.6)),
    ];
}

/// CSV rendering of the reports, one row per age group or relation/mode.
pub mod csv_report {
    use super::*;

    pub fn race(groups: &[AgeGroupReport]) -> String {
        let mut s = String::from("age,accuracy,failures");
        for r in RaceLabel::ALL {
            s.push_str(&format!(",{r}_precision,{r}_recall,{r}_f1"));
        }
        s.push('\n');
        for g in groups {
            s.push_str(&format!("{},{:.6},{}", g.age, g.accuracy, g.failures));
            for m in &g.metrics {
                s.push_str(&format!(",{:.6},{:.6},{:.6}", m.precision, m.recall, m.f1));
            }
            s.push('\n');
        }
        s
    }

    pub fn identity(rows: &[SimilarityRow]) -> String {
        let mut s = String::from("age,mean,std,count,zero_norm,failures\n");
        for r in rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{},{}\n",
                r.age, r.mean, r.std, r.count, r.zero_norm, r.failures
            ));
        }
        s
    }

    pub fn mae(rows: &[MaeRow]) -> String {
        let mut s = String::from("age,mean,std,count,failures\n");
        for r in rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.age, r.mean, r.std, r.count, r.failures
            ));
        }
        s
    }

    /// One row per relation and mode, then one improvement row per relation.
    pub fn kinship(dataset: &str, reports: &[KinReport]) -> String {
        let mut s = String::from("dataset,relation,mode,accuracy\n");
        for r in reports {
            for row in &r.rows {
                s.push_str(&format!(
                    "{dataset},{},{},{:.4}\n",
                    r.relation, row.mode, row.accuracy
                ));
            }
        }
        s
    }

    pub fn kinship_improvements(dataset: &str, reports: &[KinReport]) -> String {
        let mut s = String::from("dataset,relation,improvement\n");
        for r in reports {
            let v = r.improvement().map_or(String::new(), |v| format!("{v:.4}"));
            s.push_str(&format!("{dataset},{},{v}\n", r.relation));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_off_diagonal() {
        let m = confusion_matrix(&[RaceLabel::Asian], &[RaceLabel::White]).unwrap();
        assert_eq!(m.get(RaceLabel::White, RaceLabel::Asian), 1);
        assert_eq!(m.total(), 1);
        assert_eq!(m.trace(), 0);
    }

    #[test]
    fn empty_column_precision_is_zero() {
        let m = confusion_matrix(
            &[RaceLabel::White, RaceLabel::White],
            &[RaceLabel::White, RaceLabel::Black],
        )
        .unwrap();
        let p = prf1(&m);
        assert_eq!(p[RaceLabel::Black.index()].precision, 0.0);
        assert_eq!(p[RaceLabel::Black.index()].f1, 0.0);
        assert_eq!(p[RaceLabel::White.index()].recall, 1.0);
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(confusion_matrix(&[RaceLabel::White], &[]).is_err());
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn threshold_separates() {
        let t = fit_threshold(&[(0.9, true), (0.8, true), (0.1, false), (0.3, false)]);
        assert!(t > 0.3 && t < 0.8);
        assert_eq!(fit_threshold(&[(0.5, true)]), f64::NEG_INFINITY);
    }

    #[test]
    fn signed_improvement() {
        assert!((improvement(92.2, [90.39, 90.19, 90.8, 91.4, 91.0]).unwrap() + 0.8).abs() < 1e-9);
        assert_eq!(improvement(1.0, []), None);
    }

    #[test]
    fn kin_mode_parse() {
        assert_eq!("base".parse::<KinMode>().unwrap(), KinMode::Base);
        assert_eq!("40".parse::<KinMode>().unwrap(), KinMode::Age(40));
        assert!("x".parse::<KinMode>().is_err());
        assert!("0".parse::<KinMode>().is_err());
    }
}
