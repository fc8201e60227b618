//! Age encoder and race-aware face encoder, both ending in style-code heads.

use ragan_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::backbones::{Backbones, PyramidArch, PyramidNet, RaceNetArch};
use crate::config::Config;
use crate::domain::{STYLE_DIM, STYLE_ROWS};
use crate::error::{RaganError, Result};
use crate::nn::{flatten, Builder, Conv2d, ConvTranspose2d, Init, Linear};

/// Fuses a face feature map with a race feature map of possibly lower
/// resolution:
///
/// `H = fusion(face ∥ equalize(race)) + face_scale · face`
///
/// `equalize` is a transposed convolution whose kernel and stride equal the
/// face/race side ratio. The fusion network's last layer starts at zero and
/// `face_scale` at one, so a fresh block passes the face map through.
#[derive(Clone, Debug)]
pub struct RaceMixerBlock {
    pub face_channels: usize,
    pub face_side: usize,
    pub ratio: usize,
    equalizer: ConvTranspose2d,
    encode: Conv2d,
    decode: ConvTranspose2d,
    pub face_scale: ParamId,
}

impl RaceMixerBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        face: (usize, usize),
        race: (usize, usize),
        fusion_channels: usize,
    ) -> Result<Self> {
        let ((fc, fs), (rc, rs)) = (face, race);
        if rs == 0 || fs % rs != 0 {
            return Err(RaganError::Shape(format!(
                "face side {fs} is not an integer multiple of race side {rs}"
            )));
        }
        if fs % 2 != 0 {
            return Err(RaganError::Shape(format!("face side {fs} must be even")));
        }
        let ratio = fs / rs;
        b.scope(name, |b| {
            Ok(Self {
                face_channels: fc,
                face_side: fs,
                ratio,
                equalizer: ConvTranspose2d::new(b, "equalizer", rc, fc, ratio, Init::DEFAULT)?,
                encode: Conv2d::new(
                    b,
                    "fusion.encode",
                    2 * fc,
                    fusion_channels,
                    3,
                    2,
                    Init::DEFAULT,
                )?,
                decode: ConvTranspose2d::new(
                    b,
                    "fusion.decode",
                    fusion_channels,
                    fc,
                    2,
                    Init::Zeros,
                )?,
                face_scale: b.param("face_scale", &[1], 1, Init::Constant(1.0))?,
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        face: Var,
        race: Var,
    ) -> Result<Var> {
        let (fs, rs) = (g.shape(face).to_vec(), g.shape(race).to_vec());
        if fs.len() != 4 || rs.len() != 4 || fs[0] != rs[0] {
            return Err(RaganError::Shape(format!(
                "race mixer inputs {fs:?} and {rs:?}"
            )));
        }
        if fs[1] != self.face_channels || fs[2] != self.face_side || fs[3] != self.face_side {
            return Err(RaganError::Shape(format!(
                "race mixer expects face [n, {}, {s}, {s}], got {fs:?}",
                self.face_channels,
                s = self.face_side
            )));
        }
        if rs[2] * self.ratio != fs[2] || rs[3] * self.ratio != fs[3] {
            return Err(RaganError::Shape(format!(
                "race map {rs:?} does not reach face side {} with ratio {}",
                fs[2], self.ratio
            )));
        }
        let eq = self.equalizer.forward(g, ps, race)?;
        let both = g.concat(&[face, eq], 1)?;
        let h = self.encode.forward(g, ps, both)?;
        let h = g.tanh(h);
        let fused = self.decode.forward(g, ps, h)?;
        let scale = g.param(ps, self.face_scale);
        let scale = g.reshape(scale, &[1, 1, 1, 1])?;
        let kept = g.mul(face, scale)?;
        Ok(g.add(fused, kept)?)
    }
}

/// Strided convolutions down to 1×1, then a linear map to `rows` style codes.
#[derive(Clone, Debug)]
pub struct Map2StyleHead {
    pub rows: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Map2StyleHead {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        side: usize,
        rows: usize,
    ) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(RaganError::Shape(format!(
                "style head input side {side} is not a power of two"
            )));
        }
        b.scope(name, |b| {
            let steps = side.trailing_zeros() as usize;
            let mut convs = Vec::with_capacity(steps);
            for i in 0..steps {
                convs.push(Conv2d::new(
                    b,
                    &format!("down{}", i + 1),
                    channels,
                    channels,
                    3,
                    2,
                    Init::DEFAULT,
                )?);
            }
            Ok(Self {
                rows,
                convs,
                fc: Linear::new(b, "fc", channels, rows * STYLE_DIM, Init::Zeros)?,
            })
        })
    }

    /// `[n, c, s, s] -> [n, rows, 512]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, ps, h)?;
            h = g.tanh(h);
        }
        let n = g.shape(h)[0];
        let flat = flatten(g, h)?;
        let codes = self.fc.forward(g, ps, flat)?;
        Ok(g.reshape(codes, &[n, self.rows, STYLE_DIM])?)
    }
}

fn check_rows(rows: [usize; 3]) -> Result<()> {
    if rows.iter().sum::<usize>() != STYLE_ROWS || rows.contains(&0) {
        return Err(RaganError::Config(format!(
            "head rows {rows:?} must be positive and sum to {STYLE_ROWS}"
        )));
    }
    Ok(())
}

/// `A_1 = H_1`, `A_i = H_i + up(A_{i-1})` with bilinear upsampling, then
/// one head per level; rows are concatenated coarse to fine.
fn aggregate_and_map<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    levels: &[Var],
    heads: &[Map2StyleHead],
) -> Result<Var> {
    let mut prev: Option<Var> = None;
    let mut rows = Vec::with_capacity(heads.len());
    for (&h, head) in levels.iter().zip(heads) {
        let a = match prev {
            None => h,
            Some(p) => {
                let s = g.shape(h).to_vec();
                let up = g.resize(p, s[2], s[3])?;
                g.add(h, up)?
            }
        };
        rows.push(head.forward(g, ps, a)?);
        prev = Some(a);
    }
    Ok(g.concat(&rows, 1)?)
}

/// Pyramid encoder over the image plus its age plane.
#[derive(Clone, Debug)]
pub struct AgeEncoder {
    pyramid: PyramidNet,
    heads: Vec<Map2StyleHead>,
}

impl AgeEncoder {
    pub const PREFIX: &'static str = "age_encoder";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        width: usize,
        rows: [usize; 3],
    ) -> Result<Self> {
        check_rows(rows)?;
        let arch = PyramidArch {
            channels: width,
            ..PyramidArch::default()
        };
        let pyramid = PyramidNet::with_prefix(
            store,
            &format!("{}.pyramid", Self::PREFIX),
            seed,
            arch.clone(),
            4,
            true,
        )?;
        let mut b = Builder::new(store, Self::PREFIX, seed, true);
        let heads = (0..3)
            .map(|i| {
                let side = arch.level_side(i + 1).expect("three levels");
                Map2StyleHead::new(&mut b, &format!("head{}", i + 1), width, side, rows[i])
            })
            .collect::<Result<_>>()?;
        Ok(Self { pyramid, heads })
    }

    /// `[n, 4, 256, 256] -> [n, 18, 512]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x_age: Var,
    ) -> Result<Var> {
        let s = g.shape(x_age).to_vec();
        if s.len() != 4 || s[1] != 4 {
            return Err(RaganError::MissingAgeChannel(
                s.get(1).copied().unwrap_or(0),
            ));
        }
        if s[2] != crate::domain::IMAGE_SIZE || s[3] != crate::domain::IMAGE_SIZE {
            return Err(RaganError::Shape(format!(
                "age encoder expects 256x256, got {s:?}"
            )));
        }
        let levels = self.pyramid.levels(g, ps, x_age)?;
        aggregate_and_map(g, ps, &levels, &self.heads)
    }
}

/// Race-aware face encoder: race-network taps fused into pyramid levels by
/// [`RaceMixerBlock`]s, aggregated coarse to fine, mapped to style codes.
#[derive(Clone, Debug)]
pub struct RaceEncoder {
    pub race_taps: [usize; 3],
    pub pyramid_taps: [usize; 3],
    pub mixers: Vec<RaceMixerBlock>,
    heads: Vec<Map2StyleHead>,
}

/// Whether the race mixers fuse race features or pass the face map through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerMode {
    Fuse,
    Bypass,
}

impl RaceEncoder {
    pub const PREFIX: &'static str = "race_encoder";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        race_arch: &RaceNetArch,
        pyramid_arch: &PyramidArch,
        cfg: &Config,
    ) -> Result<Self> {
        check_rows(cfg.head_rows)?;
        let mut prev_side = 0;
        for &l in &cfg.pyramid_taps {
            let side = pyramid_arch.level_side(l).ok_or_else(|| {
                RaganError::Config(format!(
                    "pyramid tap {l} outside 1..={}",
                    pyramid_arch.levels
                ))
            })?;
            if side <= prev_side {
                return Err(RaganError::Config(format!(
                    "pyramid taps {:?} must run coarse to fine",
                    cfg.pyramid_taps
                )));
            }
            prev_side = side;
        }
        let mut b = Builder::new(store, Self::PREFIX, seed, true);
        let mut mixers = Vec::new();
        let mut heads = Vec::new();
        for i in 0..3 {
            let race = race_arch.block_shape(cfg.race_taps[i]).ok_or_else(|| {
                RaganError::Config(format!(
                    "race tap {} outside 1..={}",
                    cfg.race_taps[i],
                    race_arch.num_blocks()
                ))
            })?;
            let side = pyramid_arch
                .level_side(cfg.pyramid_taps[i])
                .expect("validated");
            let face = (pyramid_arch.channels, side);
            mixers.push(RaceMixerBlock::new(
                &mut b,
                &format!("mixer{}", i + 1),
                face,
                race,
                cfg.fusion_channels,
            )?);
            heads.push(Map2StyleHead::new(
                &mut b,
                &format!("head{}", i + 1),
                face.0,
                side,
                cfg.head_rows[i],
            )?);
        }
        Ok(Self {
            race_taps: cfg.race_taps,
            pyramid_taps: cfg.pyramid_taps,
            mixers,
            heads,
        })
    }

    /// The fused and aggregated maps `H_i`, before the heads.
    pub fn mixed_levels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        nets: &Backbones,
        x: Var,
        mode: MixerMode,
    ) -> Result<Vec<Var>> {
        let faces = nets.pyramid.forward(g, ps, x, &self.pyramid_taps)?;
        if mode == MixerMode::Bypass {
            return Ok(faces);
        }
        let race = nets.race.forward(g, ps, x, &self.race_taps)?;
        faces
            .iter()
            .zip(&race.taps)
            .zip(&self.mixers)
            .map(|((&f, &r), m)| m.forward(g, ps, f, r))
            .collect()
    }

    /// `[n, 3, 256, 256] -> [n, 18, 512]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        nets: &Backbones,
        x: Var,
        mode: MixerMode,
    ) -> Result<Var> {
        let levels = self.mixed_levels(g, ps, nets, x, mode)?;
        aggregate_and_map(g, ps, &levels, &self.heads)
    }
}

/// Builds `x ∥ plane(age / 100)` for a batch with one age per sample.
pub fn append_age_planes<T: Scalar>(g: &mut Graph<T>, x: Var, years: &[f64]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(RaganError::Shape(format!(
            "expected [n, 3, h, w], got {s:?}"
        )));
    }
    if years.len() != s[0] {
        return Err(RaganError::Shape(format!(
            "{} ages for a batch of {}",
            years.len(),
            s[0]
        )));
    }
    if let Some(bad) = years.iter().find(|y| !(0.0..=120.0).contains(*y)) {
        return Err(RaganError::Validation(format!(
            "age {bad} outside [0, 120]"
        )));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * plane);
    for &y in years {
        data.extend(std::iter::repeat_n(
            T::from_f64_lossy(y / crate::domain::AGE_CHANNEL_SCALE),
            plane,
        ));
    }
    let ages = g.constant(Tensor::new(vec![s[0], 1, s[2], s[3]], data)?);
    Ok(g.concat(&[x, ages], 1)?)
}
