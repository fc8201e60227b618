//! Value types shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use ragan_tensor::{Scalar, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{RaganError, Result};

/// Rows of a W+ style-code matrix.
pub const STYLE_ROWS: usize = 18;
/// Width of one style code.
pub const STYLE_DIM: usize = 512;
/// Side length of model images.
pub const IMAGE_SIZE: usize = 256;
/// Divisor mapping years onto the constant age plane.
pub const AGE_CHANNEL_SCALE: f64 = 100.0;

/// `C × H × W` image, `C ∈ {3, 4}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels != 3 && channels != 4 {
            return Err(RaganError::Validation(format!(
                "image must have 3 or 4 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(RaganError::Validation(
                "image sides must be positive".into(),
            ));
        }
        Ok(Self {
            tensor: Tensor::new(vec![channels, height, width], data)?,
        })
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.into_data()),
            _ => Err(RaganError::Shape(format!(
                "expected C×H×W, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height() * self.width();
        &self.tensor.data()[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// True when every element lies in `[-1, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data().iter().all(|v| v.abs() <= T::one())
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            tensor: self.tensor.cast(),
        }
    }

    /// Stacks images into an `[n, c, h, w]` batch.
    pub fn batch(images: &[ImageTensor<T>]) -> Result<Tensor<T>> {
        let ts: Vec<Tensor<T>> = images.iter().map(|i| i.tensor.clone()).collect();
        Ok(Tensor::stack(&ts)?)
    }

    pub fn unbatch(batch: &Tensor<T>) -> Result<Vec<ImageTensor<T>>> {
        batch.unstack().into_iter().map(Self::from_tensor).collect()
    }
}

/// Age in years, `0 < years ≤ 120`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AgeValue(f64);

impl AgeValue {
    pub const MAX_YEARS: f64 = 120.0;

    pub fn new(years: f64) -> Result<Self> {
        if !years.is_finite() || years <= 0.0 || years > Self::MAX_YEARS {
            return Err(RaganError::Validation(format!(
                "age {years} outside (0, 120]"
            )));
        }
        Ok(Self(years))
    }

    pub fn years(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for AgeValue {
    type Error = RaganError;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AgeValue> for f64 {
    fn from(a: AgeValue) -> f64 {
        a.0
    }
}

impl fmt::Display for AgeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Uniform integer age on the closed range `[ceil(lo), floor(hi)]`.
///
/// Draws 32-bit words from `rng` and rejects the tail above the largest
/// multiple of the range width, so every age is equally likely.
pub fn sample_target_age(rng: &mut impl RngCore, lo: AgeValue, hi: AgeValue) -> Result<AgeValue> {
    if lo > hi {
        return Err(RaganError::InvalidRange {
            lo: lo.years(),
            hi: hi.years(),
        });
    }
    let (first, last) = (lo.years().ceil() as u64, hi.years().floor() as u64);
    if first > last {
        return Err(RaganError::InvalidRange {
            lo: lo.years(),
            hi: hi.years(),
        });
    }
    let span = last - first + 1;
    let accept_below = ((1u64 << 32) / span) * span;
    loop {
        let v = rng.next_u32() as u64;
        if v < accept_below {
            return AgeValue::new((first + v % span) as f64);
        }
    }
}

/// Maps `[0, 255]` pixel values to `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_image<T: Scalar>(raw: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if raw.channels() != 3 {
        return Err(RaganError::Validation(format!(
            "normalize expects 3 channels, got {}",
            raw.channels()
        )));
    }
    let max = T::from_f64_lossy(255.0);
    if let Some(bad) = raw
        .data()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= max))
    {
        return Err(RaganError::Validation(format!(
            "pixel value {bad} outside [0, 255]"
        )));
    }
    let half = T::from_f64_lossy(127.5);
    Ok(ImageTensor {
        tensor: raw.tensor.map(|v| v / half - T::one()),
    })
}

/// Exact inverse of [`normalize_image`].
pub fn denormalize_image<T: Scalar>(x: &ImageTensor<T>) -> ImageTensor<T> {
    let half = T::from_f64_lossy(127.5);
    ImageTensor {
        tensor: x.tensor.map(|v| (v + T::one()) * half),
    }
}

/// Appends a constant plane of `years / 100` as a fourth channel.
///
/// Takes raw years in `[0, 120]` so the zero plane is expressible; model
/// code passes an [`AgeValue`].
pub fn append_age_channel<T: Scalar>(x: &ImageTensor<T>, years: f64) -> Result<ImageTensor<T>> {
    if x.channels() == 4 {
        return Err(RaganError::AlreadyAugmented);
    }
    if !(0.0..=AgeValue::MAX_YEARS).contains(&years) {
        return Err(RaganError::Validation(format!(
            "age {years} outside [0, 120]"
        )));
    }
    let plane = x.height() * x.width();
    let mut data = Vec::with_capacity(4 * plane);
    data.extend_from_slice(x.data());
    data.extend(std::iter::repeat_n(
        T::from_f64_lossy(years / AGE_CHANNEL_SCALE),
        plane,
    ));
    ImageTensor::new(4, x.height(), x.width(), data)
}

/// One `18 × 512` W+ style-code matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodeMatrix<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> StyleCodeMatrix<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        let tensor = Tensor::new(vec![STYLE_ROWS, STYLE_DIM], data)?;
        Self::from_tensor(tensor)
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape() != [STYLE_ROWS, STYLE_DIM] {
            return Err(RaganError::Shape(format!(
                "style codes must be 18×512, got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(RaganError::Validation(
                "style codes contain non-finite values".into(),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn zeros() -> Self {
        Self {
            tensor: Tensor::zeros(&[STYLE_ROWS, STYLE_DIM]),
        }
    }

    /// Splits an `[n, 18, 512]` batch.
    pub fn unbatch(batch: &Tensor<T>) -> Result<Vec<Self>> {
        if batch.rank() != 3 {
            return Err(RaganError::Shape(format!(
                "expected [n, 18, 512], got {:?}",
                batch.shape()
            )));
        }
        batch.unstack().into_iter().map(Self::from_tensor).collect()
    }

    pub fn batch(codes: &[Self]) -> Result<Tensor<T>> {
        let ts: Vec<_> = codes.iter().map(|c| c.tensor.clone()).collect();
        Ok(Tensor::stack(&ts)?)
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.tensor.data()[i * STYLE_DIM..(i + 1) * STYLE_DIM]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }
}

/// Race category. The integer encoding below is the one used everywhere:
/// report columns, confusion-matrix axes and classifier logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceLabel {
    Indian = 0,
    White = 1,
    Asian = 2,
    Black = 3,
}

impl RaceLabel {
    pub const ALL: [RaceLabel; 4] = [
        RaceLabel::Indian,
        RaceLabel::White,
        RaceLabel::Asian,
        RaceLabel::Black,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Indian => "Indian",
            Self::White => "White",
            Self::Asian => "Asian",
            Self::Black => "Black",
        }
    }
}

impl fmt::Display for RaceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RaceLabel {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RaganError::Validation(format!("unknown race `{s}`")))
    }
}

/// Weights of the five objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub lambda_w_norm: f64,
    pub lambda_aging: f64,
    pub lambda_race: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l2: 0.25,
            lambda_id: 0.1,
            lambda_w_norm: 0.005,
            lambda_aging: 5.0,
            lambda_race: 3.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l2: 0.0,
            lambda_id: 0.0,
            lambda_w_norm: 0.0,
            lambda_aging: 0.0,
            lambda_race: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.lambda_l2,
            self.lambda_id,
            self.lambda_w_norm,
            self.lambda_aging,
            self.lambda_race,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RaganError::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// Preset of the optimizer stepping forward-phase gradients.
    pub fn forward_phase() -> Self {
        Self {
            learning_rate: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }

    /// Preset of the optimizer stepping cycle-reconstruction gradients.
    pub fn reconstruction_phase() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.5,
            beta2: 0.99,
            weight_decay: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0)
            || !beta_ok(self.beta1)
            || !beta_ok(self.beta2)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return Err(RaganError::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn age(v: f64) -> AgeValue {
        AgeValue::new(v).unwrap()
    }

    /// Standalone reference for the integer-uniform mapping: threshold
    /// computed as `2^32 - (2^32 mod span)`, value as `lo + v mod span`.
    fn reference_uniform(seed: u64, lo: u32, hi: u32) -> u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = (hi - lo + 1) as u64;
        let threshold = (1u64 << 32) - ((1u64 << 32) % span);
        loop {
            let v = rng.next_u32() as u64;
            if v < threshold {
                return lo + (v % span) as u32;
            }
        }
    }

    #[test]
    fn degenerate_range_returns_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_target_age(&mut rng, age(50.0), age(50.0))
                .unwrap()
                .years(),
            50.0
        );
    }

    #[test]
    fn seeded_draw_matches_reference() {
        // Frozen from `reference_uniform(20240607, 10, 80)`.
        const SEED: u64 = 20240607;
        let expected = reference_uniform(SEED, 10, 80);
        assert_eq!(expected, 56);
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let got = sample_target_age(&mut rng, age(10.0), age(80.0)).unwrap();
        assert_eq!(got.years(), expected as f64);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = sample_target_age(&mut rng, age(10.0), age(80.0)).unwrap();
            assert_eq!(got.years(), reference_uniform(seed, 10, 80) as f64);
        }
    }

    #[test]
    fn reversed_range_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_target_age(&mut rng, age(80.0), age(10.0)).unwrap_err();
        assert!(matches!(err, RaganError::InvalidRange { .. }));
    }

    #[test]
    fn empirical_mean_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let (lo, hi) = (10.0, 80.0);
        let mut sum = 0.0;
        for _ in 0..n {
            let a = sample_target_age(&mut rng, age(lo), age(hi))
                .unwrap()
                .years();
            assert!((lo..=hi).contains(&a) && a.fract() == 0.0);
            sum += a;
        }
        let mean = sum / n as f64;
        let span = hi - lo + 1.0;
        let sigma = ((span * span - 1.0) / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mean - (lo + hi) / 2.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn age_value_bounds() {
        assert!(AgeValue::new(0.0).is_err());
        assert!(AgeValue::new(120.0).is_ok());
        assert!(AgeValue::new(120.5).is_err());
        assert!(AgeValue::new(f64::NAN).is_err());
    }

    #[test]
    fn normalize_fixed_points() {
        let zeros = ImageTensor::<f64>::filled(3, 2, 2, 0.0).unwrap();
        assert!(normalize_image(&zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -1.0));
        let full = ImageTensor::<f64>::filled(3, 2, 2, 255.0).unwrap();
        assert!(normalize_image(&full)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let mid = ImageTensor::<f64>::filled(3, 2, 2, 127.5).unwrap();
        assert!(normalize_image(&mid)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_out_of_range_and_four_channels() {
        let bad = ImageTensor::<f32>::filled(3, 1, 1, 256.0).unwrap();
        assert!(normalize_image(&bad).is_err());
        let neg = ImageTensor::<f32>::filled(3, 1, 1, -0.5).unwrap();
        assert!(normalize_image(&neg).is_err());
        let four = ImageTensor::<f32>::filled(4, 1, 1, 0.0).unwrap();
        assert!(normalize_image(&four).is_err());
    }

    #[test]
    fn age_channel_planes() {
        let x = ImageTensor::<f32>::from_tensor(Tensor::from_fn(&[3, 256, 256], |i| {
            ((i % 97) as f32) / 97.0
        }))
        .unwrap();
        let zero = append_age_channel(&x, 0.0).unwrap();
        assert!(zero.plane(3).iter().all(|&v| v == 0.0));
        let fifty = append_age_channel(&x, 50.0).unwrap();
        assert_eq!(
            (fifty.channels(), fifty.height(), fifty.width()),
            (4, 256, 256)
        );
        assert!(fifty.plane(3).iter().all(|&v| v == 0.5));
        assert_eq!(&fifty.data()[..3 * 256 * 256], x.data());
        assert!(matches!(
            append_age_channel(&fifty, 20.0),
            Err(RaganError::AlreadyAugmented)
        ));
    }

    #[test]
    fn race_encoding_is_stable() {
        for (i, r) in RaceLabel::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(RaceLabel::from_index(i), Some(*r));
            assert_eq!(r.name().parse::<RaceLabel>().unwrap(), *r);
        }
        assert_eq!(RaceLabel::from_index(4), None);
    }

    #[test]
    fn presets_and_defaults() {
        let w = LossWeights::default();
        assert_eq!(w.as_array(), [0.25, 0.1, 0.005, 5.0, 3.0]);
        let f = OptimizerConfig::forward_phase();
        assert_eq!(
            (f.learning_rate, f.beta1, f.beta2, f.weight_decay),
            (1e-7, 0.9, 0.99, 0.0)
        );
        let r = OptimizerConfig::reconstruction_phase();
        assert_eq!(
            (r.learning_rate, r.beta1, r.beta2, r.weight_decay),
            (5e-5, 0.5, 0.99, 1e-5)
        );
        assert!(f.validate().is_ok() && r.validate().is_ok());
    }

    #[test]
    fn style_codes_shape_is_enforced() {
        assert!(StyleCodeMatrix::<f32>::new(vec![0.0; 18 * 511]).is_err());
        assert!(StyleCodeMatrix::<f32>::new(vec![f32::NAN; 18 * 512]).is_err());
        assert!(StyleCodeMatrix::<f32>::new(vec![0.0; 18 * 512]).is_ok());
    }

    proptest! {
        #[test]
        fn normalize_round_trips(values in proptest::collection::vec(0.0f64..=255.0, 12)) {
            let raw = ImageTensor::new(3, 2, 2, values).unwrap();
            let back = denormalize_image(&normalize_image(&raw).unwrap());
            for (a, b) in raw.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn age_channel_leaves_input_untouched(years in 0.0f64..=120.0, fill in -1.0f32..=1.0) {
            let x = ImageTensor::<f32>::filled(3, 4, 4, fill).unwrap();
            let before = x.clone();
            let y = append_age_channel(&x, years).unwrap();
            prop_assert_eq!(&x, &before);
            let plane = y.plane(3);
            prop_assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }
}
