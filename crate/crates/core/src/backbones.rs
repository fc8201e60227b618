//! Frozen feature extractors: a race classifier network, a feature-pyramid
//! face network, an identity embedder and an age embedder.
//!
//! Each comes as a small deterministic toy network whose parameters live in
//! the shared store with `trainable = false`. Externally supplied weights
//! are loaded into the same slots through [`crate::weights`], so they must
//! follow the architecture declared here.

use std::path::PathBuf;
use std::str::FromStr;

use ragan_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::domain::{RaceLabel, IMAGE_SIZE};
use crate::error::{RaganError, Result};
use crate::nn::{flatten, global_avg, Builder, Conv2d, Init, Linear};

/// `[n, c, h, w]` activation batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        tensor.dims4("FeatureMap")?;
        if !tensor.all_finite() {
            return Err(RaganError::Validation(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// `[n, dim]` embedding batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 2 {
            return Err(RaganError::Shape(format!(
                "embedding must be [n, dim], got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(RaganError::Validation(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.tensor.sample(i)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Where a backbone's weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Toy,
    File(PathBuf),
}

impl FromStr for WeightSource {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(RaganError::Config("empty weight source".into())),
            "toy" => Ok(Self::Toy),
            path => Ok(Self::File(PathBuf::from(path))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Race,
    Pyramid,
    Identity,
    Age,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [Self::Race, Self::Pyramid, Self::Identity, Self::Age];

    pub fn name(self) -> &'static str {
        match self {
            Self::Race => "race",
            Self::Pyramid => "pyramid",
            Self::Identity => "identity",
            Self::Age => "age",
        }
    }

    /// Parameter-name prefix of the backbone in a model store.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Race => "race_net",
            Self::Pyramid => "pyramid_net",
            Self::Identity => "identity_net",
            Self::Age => "age_net",
        }
    }
}

impl FromStr for BackboneKind {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                RaganError::Config(format!(
                    "unknown backbone `{s}` (race|pyramid|identity|age)"
                ))
            })
    }
}

/// Parses a `name=path|toy` selector.
pub fn parse_selector(s: &str) -> Result<(BackboneKind, WeightSource)> {
    let (name, src) = s.split_once('=').ok_or_else(|| {
        RaganError::Config(format!("backbone selector `{s}` is not name=path|toy"))
    })?;
    Ok((name.trim().parse()?, src.trim().parse()?))
}

fn check_image<T: Scalar>(g: &Graph<T>, x: Var, who: &str) -> Result<usize> {
    let s = g.shape(x);
    match *s {
        [n, 3, IMAGE_SIZE, IMAGE_SIZE] => Ok(n),
        _ => Err(RaganError::Shape(format!(
            "{who} expects [n, 3, 256, 256], got {s:?}"
        ))),
    }
}

/// Bottleneck residual block, `tanh(shortcut(x) + expand(tanh(reduce(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    reduce: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let mid = (cout / 4).max(1);
            Ok(Self {
                reduce: Conv2d::new(b, "reduce", cin, mid, 3, stride, Init::DEFAULT)?,
                expand: Conv2d::new(b, "expand", mid, cout, 1, 1, Init::Uniform { gain: 0.5 })?,
                shortcut: if cin != cout || stride != 1 {
                    Some(Conv2d::new(
                        b,
                        "shortcut",
                        cin,
                        cout,
                        1,
                        stride,
                        Init::DEFAULT,
                    )?)
                } else {
                    None
                },
            })
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, ps, x)?;
        let h = g.tanh(h);
        let h = self.expand.forward(g, ps, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        let y = g.add(s, h)?;
        Ok(g.tanh(y))
    }
}

#[derive(Clone, Debug)]
pub struct RaceNetArch {
    pub input_pool: usize,
    pub stem_channels: usize,
    pub stage_blocks: [usize; 4],
    pub stage_widths: [usize; 4],
    pub classes: usize,
}

impl Default for RaceNetArch {
    fn default() -> Self {
        Self {
            input_pool: 8,
            stem_channels: 16,
            stage_blocks: [3, 4, 6, 3],
            stage_widths: [16, 64, 128, 256],
            classes: RaceLabel::ALL.len(),
        }
    }
}

impl RaceNetArch {
    pub fn num_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// `(channels, side)` of the output of residual block `block` (1-based).
    pub fn block_shape(&self, block: usize) -> Option<(usize, usize)> {
        if block == 0 || block > self.num_blocks() {
            return None;
        }
        let mut side = IMAGE_SIZE / self.input_pool / 2;
        let mut seen = 0;
        for (s, (&n, &w)) in self.stage_blocks.iter().zip(&self.stage_widths).enumerate() {
            if s > 0 {
                side /= 2;
            }
            seen += n;
            if block <= seen {
                return Some((w, side));
            }
        }
        None
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_widths[3]
    }
}

/// Race classifier network: residual stages whose intermediate blocks are
/// tapped for the race encoder and whose pooled final stage is the race
/// embedding.
#[derive(Clone, Debug)]
pub struct RaceNet {
    pub arch: RaceNetArch,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    classifier: Linear,
}

/// Outputs of [`RaceNet::forward`]; `taps[i]` is the output of block `tap_ids[i]`.
pub struct RaceFeatures {
    pub taps: Vec<Var>,
    pub embedding: Var,
}

impl RaceNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64, arch: RaceNetArch) -> Result<Self> {
        let mut b = Builder::new(store, BackboneKind::Race.prefix(), seed, false);
        b.bias = Init::Uniform { gain: 0.5 };
        let stem = Conv2d::new(&mut b, "stem", 3, arch.stem_channels, 3, 2, Init::DEFAULT)?;
        let mut blocks = Vec::new();
        let mut cin = arch.stem_channels;
        for (s, (&n, &w)) in arch.stage_blocks.iter().zip(&arch.stage_widths).enumerate() {
            for i in 0..n {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut b,
                    &format!("block{}", blocks.len() + 1),
                    cin,
                    w,
                    stride,
                )?);
                cin = w;
            }
        }
        let classifier = Linear::new(
            &mut b,
            "classifier",
            arch.embedding_dim(),
            arch.classes,
            Init::Zeros,
        )?;
        Ok(Self {
            arch,
            stem,
            blocks,
            classifier,
        })
    }

    /// Runs the network, collecting the outputs of blocks in `tap_ids`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        tap_ids: &[usize],
    ) -> Result<RaceFeatures> {
        check_image(g, x, "race backbone")?;
        if let Some(bad) = tap_ids.iter().find(|&&t| t == 0 || t > self.blocks.len()) {
            return Err(RaganError::Config(format!(
                "race tap {bad} outside 1..={}",
                self.blocks.len()
            )));
        }
        let h = g.avg_pool(x, self.arch.input_pool)?;
        let h = self.stem.forward(g, ps, h)?;
        let mut h = g.tanh(h);
        let mut taps = vec![None; tap_ids.len()];
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, ps, h)?;
            for (slot, &t) in taps.iter_mut().zip(tap_ids) {
                if t == i + 1 {
                    *slot = Some(h);
                }
            }
        }
        let embedding = global_avg(g, h)?;
        Ok(RaceFeatures {
            taps: taps
                .into_iter()
                .map(|t| t.expect("validated tap"))
                .collect(),
            embedding,
        })
    }

    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        embedding: Var,
    ) -> Result<Var> {
        self.classifier.forward(g, ps, embedding)
    }
}

#[derive(Clone, Debug)]
pub struct PyramidArch {
    pub input_pool: usize,
    pub channels: usize,
    pub levels: usize,
}

impl Default for PyramidArch {
    fn default() -> Self {
        Self {
            input_pool: 4,
            channels: 16,
            levels: 3,
        }
    }
}

impl PyramidArch {
    /// Side of pyramid level `level` (1 = coarsest).
    pub fn level_side(&self, level: usize) -> Option<usize> {
        if level == 0 || level > self.levels {
            return None;
        }
        let finest = IMAGE_SIZE / self.input_pool / 2;
        Some(finest >> (self.levels - level))
    }
}

/// Feature-pyramid face network: a strided stack whose successive
/// outputs form levels from fine to coarse.
#[derive(Clone, Debug)]
pub struct PyramidNet {
    pub arch: PyramidArch,
    convs: Vec<Conv2d>,
}

impl PyramidNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64, arch: PyramidArch) -> Result<Self> {
        Self::with_prefix(store, BackboneKind::Pyramid.prefix(), seed, arch, 3, false)
    }

    pub(crate) fn with_prefix<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        seed: u64,
        arch: PyramidArch,
        in_channels: usize,
        trainable: bool,
    ) -> Result<Self> {
        let mut b = Builder::new(store, prefix, seed, trainable);
        if !trainable {
            b.bias = Init::Uniform { gain: 0.5 };
        }
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for i in 0..arch.levels {
            convs.push(Conv2d::new(
                &mut b,
                &format!("down{}", i + 1),
                cin,
                arch.channels,
                3,
                2,
                Init::DEFAULT,
            )?);
            cin = arch.channels;
        }
        Ok(Self { arch, convs })
    }

    /// All levels ordered coarse to fine: `out[0]` is level 1.
    pub fn levels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut h = g.avg_pool(x, self.arch.input_pool)?;
        let mut fine_to_coarse = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(g, ps, h)?;
            h = g.tanh(h);
            fine_to_coarse.push(h);
        }
        fine_to_coarse.reverse();
        Ok(fine_to_coarse)
    }

    /// Levels selected by 1-based index, in the order given.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        level_ids: &[usize],
    ) -> Result<Vec<Var>> {
        check_image(g, x, "pyramid backbone")?;
        if let Some(bad) = level_ids.iter().find(|&&l| l == 0 || l > self.arch.levels) {
            return Err(RaganError::Config(format!(
                "pyramid level {bad} outside 1..={}",
                self.arch.levels
            )));
        }
        let all = self.levels(g, ps, x)?;
        Ok(level_ids.iter().map(|&l| all[l - 1]).collect())
    }
}

/// Two strided convolutions flattened into a 512-d embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    input_pool: usize,
    convs: Vec<Conv2d>,
}

impl EmbeddingNet {
    pub const DIM: usize = 512;

    fn new<T: Scalar>(b: &mut Builder<'_, T>) -> Result<Self> {
        Ok(Self {
            input_pool: 8,
            convs: vec![
                Conv2d::new(b, "conv1", 3, 16, 3, 2, Init::DEFAULT)?,
                Conv2d::new(b, "conv2", 16, 8, 3, 2, Init::DEFAULT)?,
            ],
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        who: &str,
    ) -> Result<Var> {
        check_image(g, x, who)?;
        let mut h = g.avg_pool(x, self.input_pool)?;
        for c in &self.convs {
            h = c.forward(g, ps, h)?;
            h = g.tanh(h);
        }
        flatten(g, h)
    }
}

/// Identity embedder standing in for a face-recognition network.
#[derive(Clone, Debug)]
pub struct IdentityNet {
    net: EmbeddingNet,
}

impl IdentityNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut b = Builder::new(store, BackboneKind::Identity.prefix(), seed, false);
        b.bias = Init::Uniform { gain: 0.5 };
        Ok(Self {
            net: EmbeddingNet::new(&mut b)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        self.net.forward(g, ps, x, "identity backbone")
    }
}

/// Age embedder with a 0..=100 year classification head; the estimate is
/// the softmax expectation over the year bins.
#[derive(Clone, Debug)]
pub struct AgeNet {
    net: EmbeddingNet,
    head: Linear,
}

impl AgeNet {
    pub const BINS: usize = 101;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut b = Builder::new(store, BackboneKind::Age.prefix(), seed, false);
        b.bias = Init::Uniform { gain: 0.5 };
        let net = EmbeddingNet::new(&mut b)?;
        let head = Linear::new(&mut b, "head", EmbeddingNet::DIM, Self::BINS, Init::Zeros)?;
        Ok(Self { net, head })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        self.net.forward(g, ps, x, "age backbone")
    }

    /// Expected age in years for each sample of `embedding`.
    pub fn estimate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        embedding: Var,
    ) -> Result<Vec<f64>> {
        let logits = self.head.forward(g, ps, embedding)?;
        let t = g.value(logits);
        Ok((0..t.shape()[0])
            .map(|i| {
                let row: Vec<f64> = t.sample(i).iter().map(|v| v.to_f64_lossy()).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = w.iter().sum();
                w.iter().enumerate().map(|(k, p)| k as f64 * p / z).sum()
            })
            .collect())
    }
}

/// The four frozen extractors of a model.
#[derive(Clone, Debug)]
pub struct Backbones {
    pub race: RaceNet,
    pub pyramid: PyramidNet,
    pub identity: IdentityNet,
    pub age: AgeNet,
}

impl Backbones {
    pub fn toy<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        pyramid: PyramidArch,
    ) -> Result<Self> {
        Ok(Self {
            race: RaceNet::new(store, seed, RaceNetArch::default())?,
            pyramid: PyramidNet::new(store, seed, pyramid)?,
            identity: IdentityNet::new(store, seed)?,
            age: AgeNet::new(store, seed)?,
        })
    }
}

/// Inference helpers over a single batch, returning owned tensors.
pub mod eval {
    use super::*;

    fn input<T: Scalar>(g: &mut Graph<T>, x: &Tensor<T>) -> Var {
        g.constant(x.clone())
    }

    pub fn race_features<T: Scalar>(
        net: &RaceNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        taps: [usize; 3],
    ) -> Result<(
        FeatureMap<T>,
        FeatureMap<T>,
        FeatureMap<T>,
        EmbeddingVector<T>,
    )> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let f = net.forward(&mut g, ps, xv, &taps)?;
        let map = |v: Var| FeatureMap::new(g.value(v).clone());
        Ok((
            map(f.taps[0])?,
            map(f.taps[1])?,
            map(f.taps[2])?,
            EmbeddingVector::new(g.value(f.embedding).clone())?,
        ))
    }

    pub fn pyramid_features<T: Scalar>(
        net: &PyramidNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        levels: [usize; 3],
    ) -> Result<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let p = net.forward(&mut g, ps, xv, &levels)?;
        let map = |v: Var| FeatureMap::new(g.value(v).clone());
        Ok((map(p[0])?, map(p[1])?, map(p[2])?))
    }

    pub fn identity_embedding<T: Scalar>(
        net: &IdentityNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<EmbeddingVector<T>> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let e = net.forward(&mut g, ps, xv)?;
        EmbeddingVector::new(g.value(e).clone())
    }

    pub fn age_embedding<T: Scalar>(
        net: &AgeNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<EmbeddingVector<T>> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let e = net.forward(&mut g, ps, xv)?;
        EmbeddingVector::new(g.value(e).clone())
    }

    pub fn estimate_age<T: Scalar>(
        net: &AgeNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let e = net.forward(&mut g, ps, xv)?;
        net.estimate(&mut g, ps, e)
    }

    pub fn classify_race<T: Scalar>(
        net: &RaceNet,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Vec<RaceLabel>> {
        let mut g = Graph::inference();
        let xv = input(&mut g, x);
        let f = net.forward(&mut g, ps, xv, &[])?;
        let logits = net.logits(&mut g, ps, f.embedding)?;
        let t = g.value(logits);
        Ok((0..t.shape()[0])
            .map(|i| {
                let row = t.sample(i);
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                RaceLabel::from_index(best).expect("four logits")
            })
            .collect())
    }
}
