//! The assembled face-aging model and its forward passes.

use std::path::Path;

use ragan_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::backbones::{BackboneKind, Backbones, PyramidArch, WeightSource};
use crate::config::Config;
use crate::domain::{AgeValue, ImageTensor, StyleCodeMatrix};
use crate::encoders::{append_age_planes, AgeEncoder, MixerMode, RaceEncoder};
use crate::error::{RaganError, Result};
use crate::synthesis::{FeatureMixer, Generator, GeneratorArch};
use crate::weights;

/// Graph handles produced by [`RaGan::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub s_age: Var,
    pub s_face: Var,
    pub f_mix: Var,
    pub x_prime: Var,
}

/// Every network of the model and the one parameter store they share.
#[derive(Clone, Debug)]
pub struct RaGan<T: Scalar> {
    pub store: ParamStore<T>,
    pub backbones: Backbones,
    pub age_encoder: AgeEncoder,
    pub race_encoder: RaceEncoder,
    pub mixer: FeatureMixer,
    pub generator: Generator,
    pub config: Config,
}

/// Parameter prefixes updated by training.
pub const TRAINABLE_PREFIXES: [&str; 3] = [
    AgeEncoder::PREFIX,
    RaceEncoder::PREFIX,
    FeatureMixer::PREFIX,
];

impl<T: Scalar> RaGan<T> {
    /// Toy instantiation of every component, seeded by `config.toy_seed`.
    pub fn toy(config: &Config) -> Result<Self> {
        config.validate()?;
        let seed = config.toy_seed;
        let mut store = ParamStore::new();
        let pyramid = PyramidArch {
            channels: config.face_channels,
            ..PyramidArch::default()
        };
        let backbones = Backbones::toy(&mut store, seed, pyramid.clone())?;
        let age_encoder =
            AgeEncoder::new(&mut store, seed, config.age_encoder_width, config.head_rows)?;
        let race_encoder =
            RaceEncoder::new(&mut store, seed, &backbones.race.arch, &pyramid, config)?;
        let mixer = FeatureMixer::new(&mut store, seed)?;
        let mut generator = Generator::new(
            &mut store,
            seed,
            GeneratorArch::default(),
            !config.generator_frozen,
        )?;
        generator.set_noise(config.noise_seed, config.noise_strength);
        Ok(Self {
            store,
            backbones,
            age_encoder,
            race_encoder,
            mixer,
            generator,
            config: config.clone(),
        })
    }

    /// Replaces one backbone's toy weights with a weight file.
    pub fn load_backbone(&mut self, kind: BackboneKind, source: &WeightSource) -> Result<()> {
        if let WeightSource::File(path) = source {
            let entries = weights::load(path)?;
            let prefix = format!("{}.", kind.prefix());
            if let Some((name, _)) = entries.iter().find(|(n, _)| !n.starts_with(&prefix)) {
                return Err(RaganError::Weights(format!(
                    "entry `{name}` is not part of the {} backbone",
                    kind.name()
                )));
            }
            weights::import_params(&mut self.store, &entries, &prefix, true)?;
        }
        Ok(())
    }

    pub fn load_generator(&mut self, source: &WeightSource) -> Result<()> {
        if let WeightSource::File(path) = source {
            let entries = weights::load(path)?;
            let prefix = format!("{}.", Generator::PREFIX);
            weights::import_params(&mut self.store, &entries, &prefix, true)?;
        }
        Ok(())
    }

    /// Loads trained encoder/mixer (and generator, if present) parameters.
    pub fn load_trained(&mut self, path: &Path) -> Result<usize> {
        let entries: Vec<_> = weights::load(path)?
            .into_iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .collect();
        weights::import_params(&mut self.store, &entries, "", false)
    }

    pub fn encode_age(&self, g: &mut Graph<T>, x_age: Var) -> Result<Var> {
        self.age_encoder.forward(g, &self.store, x_age)
    }

    pub fn encode_race(&self, g: &mut Graph<T>, x: Var, mode: MixerMode) -> Result<Var> {
        self.race_encoder
            .forward(g, &self.store, &self.backbones, x, mode)
    }

    pub fn mix(&self, g: &mut Graph<T>, s_age: Var, s_face: Var) -> Result<Var> {
        self.mixer.forward(g, &self.store, s_age, s_face)
    }

    pub fn generate(&self, g: &mut Graph<T>, codes: Var) -> Result<Var> {
        self.generator.forward(g, &self.store, codes)
    }

    /// `x′ = G(F(E_age(x ∥ α_t), E_race(x)))` for a batch `[n, 3, 256, 256]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, target_ages: &[f64]) -> Result<ForwardVars> {
        let x_age = append_age_planes(g, x, target_ages)?;
        let s_age = self.encode_age(g, x_age)?;
        let s_face = self.encode_race(g, x, MixerMode::Fuse)?;
        let f_mix = self.mix(g, s_age, s_face)?;
        let x_prime = self.generate(g, f_mix)?;
        Ok(ForwardVars {
            s_age,
            s_face,
            f_mix,
            x_prime,
        })
    }

    /// Face-encoder to generator round trip with the race mixers bypassed.
    pub fn invert(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let codes = self.encode_race(g, x, MixerMode::Bypass)?;
        self.generate(g, codes)
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_scalars(true)
    }

    /// Single-image forward returning `(x′, F_mix)`. The source age is part
    /// of the contract but only the target age conditions the encoders.
    pub fn ra_gan_forward(
        &self,
        x: &ImageTensor<T>,
        _alpha_s: AgeValue,
        alpha_t: AgeValue,
    ) -> Result<(ImageTensor<T>, StyleCodeMatrix<T>)> {
        check_rgb(x)?;
        let mut g = Graph::inference();
        let xv = g.constant(ImageTensor::batch(std::slice::from_ref(x))?);
        let out = self.forward(&mut g, xv, &[alpha_t.years()])?;
        Ok((first_image(&g, out.x_prime)?, first_codes(&g, out.f_mix)?))
    }

    /// Ages a batch `[n, 3, 256, 256]` to one target age per sample.
    pub fn transform_batch(&self, x: &Tensor<T>, target_ages: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, target_ages)?;
        Ok(g.value(out.x_prime).clone())
    }

    pub fn encode_age_image(&self, x_age: &ImageTensor<T>) -> Result<StyleCodeMatrix<T>> {
        if x_age.channels() != 4 {
            return Err(RaganError::MissingAgeChannel(x_age.channels()));
        }
        let mut g = Graph::inference();
        let xv = g.constant(ImageTensor::batch(std::slice::from_ref(x_age))?);
        let s = self.encode_age(&mut g, xv)?;
        first_codes(&g, s)
    }

    pub fn encode_race_image(&self, x: &ImageTensor<T>) -> Result<StyleCodeMatrix<T>> {
        check_rgb(x)?;
        let mut g = Graph::inference();
        let xv = g.constant(ImageTensor::batch(std::slice::from_ref(x))?);
        let s = self.encode_race(&mut g, xv, MixerMode::Fuse)?;
        first_codes(&g, s)
    }

    pub fn mix_features(
        &self,
        s_age: &StyleCodeMatrix<T>,
        s_face: &StyleCodeMatrix<T>,
    ) -> Result<StyleCodeMatrix<T>> {
        let mut g = Graph::inference();
        let a = g.constant(StyleCodeMatrix::batch(std::slice::from_ref(s_age))?);
        let b = g.constant(StyleCodeMatrix::batch(std::slice::from_ref(s_face))?);
        let f = self.mix(&mut g, a, b)?;
        first_codes(&g, f)
    }

    pub fn generate_image(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        if !codes.all_finite() {
            return Err(RaganError::Validation(
                "style codes contain non-finite values".into(),
            ));
        }
        let mut g = Graph::inference();
        let c = g.constant(codes.clone());
        let x = self.generate(&mut g, c)?;
        Ok(g.value(x).clone())
    }

    pub fn generate_one(&self, codes: &StyleCodeMatrix<T>) -> Result<ImageTensor<T>> {
        let out = self.generate_image(&StyleCodeMatrix::batch(std::slice::from_ref(codes))?)?;
        ImageTensor::from_tensor(out.unstack().remove(0))
    }

    /// Full-face reconstruction of a mirror-padded 256×256 crop.
    pub fn invert_to_fullface(&self, x_padded: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        check_rgb(x_padded)?;
        let mut g = Graph::inference();
        let xv = g.constant(ImageTensor::batch(std::slice::from_ref(x_padded))?);
        let y = self.invert(&mut g, xv)?;
        first_image(&g, y)
    }
}

fn check_rgb<T: Scalar>(x: &ImageTensor<T>) -> Result<()> {
    if x.channels() != 3
        || x.height() != crate::domain::IMAGE_SIZE
        || x.width() != crate::domain::IMAGE_SIZE
    {
        return Err(RaganError::Shape(format!(
            "expected 3×256×256 image, got {}×{}×{}",
            x.channels(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

fn first_image<T: Scalar>(g: &Graph<T>, v: Var) -> Result<ImageTensor<T>> {
    ImageTensor::from_tensor(g.value(v).unstack().remove(0))
}

fn first_codes<T: Scalar>(g: &Graph<T>, v: Var) -> Result<StyleCodeMatrix<T>> {
    StyleCodeMatrix::from_tensor(g.value(v).unstack().remove(0))
}

pub type RaGan32 = RaGan<f32>;
pub type RaGan64 = RaGan<f64>;
