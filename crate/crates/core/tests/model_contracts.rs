mod common;

use common::{perturb, toy_image};
use proptest::prelude::*;
use ragan::domain::append_age_channel;
use ragan::encoders::MixerMode;
use ragan::tensor::{Graph, Tensor};
use ragan::{AgeValue, Codes32, Config, Image32, RaGan32, RaganError};

fn model() -> RaGan32 {
    RaGan32::toy(&Config::default()).unwrap()
}

fn age(v: f64) -> AgeValue {
    AgeValue::new(v).unwrap()
}

#[test]
fn encoders_and_generator_shapes() {
    let m = model();
    let x: Image32 = toy_image(0);
    let s_age = m
        .encode_age_image(&append_age_channel(&x, 40.0).unwrap())
        .unwrap();
    let s_face = m.encode_race_image(&x).unwrap();
    assert_eq!(s_age.tensor().shape(), &[18, 512]);
    assert_eq!(s_face.tensor().shape(), &[18, 512]);
    let f = m.mix_features(&s_age, &s_face).unwrap();
    assert_eq!(f.tensor().shape(), &[18, 512]);
    let y = m.generate_one(&f).unwrap();
    assert_eq!((y.channels(), y.height(), y.width()), (3, 256, 256));
}

#[test]
fn batch_dimension_is_carried() {
    let m = model();
    let xs: Vec<Image32> = (0..4).map(toy_image).collect();
    let batch = Image32::batch(&xs).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(batch.clone());
    let out = m.forward(&mut g, x, &[20.0, 30.0, 40.0, 50.0]).unwrap();
    assert_eq!(g.shape(out.s_age), &[4, 18, 512]);
    assert_eq!(g.shape(out.s_face), &[4, 18, 512]);
    assert_eq!(g.shape(out.x_prime), &[4, 3, 256, 256]);
    // Each sample depends only on its own input and age.
    let single = m
        .transform_batch(&Image32::batch(&xs[2..3]).unwrap(), &[40.0])
        .unwrap();
    let from_batch = g.value(out.x_prime).sample(2);
    for (a, b) in single.data().iter().zip(from_batch) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn age_encoder_rejects_plain_rgb() {
    let m = model();
    let x: Image32 = toy_image(0);
    assert!(matches!(
        m.encode_age_image(&x),
        Err(RaganError::MissingAgeChannel(3))
    ));
}

#[test]
fn second_age_channel_is_rejected() {
    let x: Image32 = toy_image(0);
    let x4 = append_age_channel(&x, 10.0).unwrap();
    assert!(matches!(
        append_age_channel(&x4, 10.0),
        Err(RaganError::AlreadyAugmented)
    ));
}

#[test]
fn forward_is_deterministic() {
    let m = model();
    let x: Image32 = toy_image(3);
    let a = m.ra_gan_forward(&x, age(25.0), age(70.0)).unwrap();
    let b = m.ra_gan_forward(&x, age(25.0), age(70.0)).unwrap();
    assert_eq!(a, b);
    let twin = model();
    assert_eq!(twin.ra_gan_forward(&x, age(25.0), age(70.0)).unwrap(), a);
}

#[test]
fn target_age_does_not_reach_face_codes() {
    let m = model();
    let x = Image32::batch(&[toy_image(1)]).unwrap();
    let run = |t: f64| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, xv, &[t]).unwrap();
        (g.value(out.s_face).clone(), g.value(out.s_age).clone())
    };
    let (face_a, age_a) = run(20.0);
    let (face_b, age_b) = run(75.0);
    assert_eq!(face_a, face_b);
    assert_ne!(age_a, age_b);
}

#[test]
fn identity_initialization() {
    let m = model();
    let x = Image32::batch(&[toy_image(2)]).unwrap();
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let out = m.forward(&mut g, xv, &[50.0]).unwrap();
    let (a, f, mix) = (g.value(out.s_age), g.value(out.s_face), g.value(out.f_mix));
    for i in 0..a.numel() {
        assert_eq!(mix.data()[i], 0.5 * (a.data()[i] + f.data()[i]));
    }
    let fused = m
        .race_encoder
        .mixed_levels(&mut g, &m.store, &m.backbones, xv, MixerMode::Fuse)
        .unwrap();
    let faces = m
        .backbones
        .pyramid
        .forward(&mut g, &m.store, xv, &m.race_encoder.pyramid_taps)
        .unwrap();
    for (h, p) in fused.iter().zip(&faces) {
        assert_eq!(g.value(*h), g.value(*p));
    }
}

#[test]
fn mixer_passes_zero_race_input_scaled() {
    let mut m = model();
    let id = m.race_encoder.mixers[0].face_scale;
    m.store.value_mut(id).data_mut()[0] = 0.75;
    let block = &m.race_encoder.mixers[0];
    let mut g = Graph::inference();
    let face = g.constant(Tensor::from_fn(&[1, 16, 8, 8], |i| (i as f32 * 0.1).sin()));
    let race = g.constant(Tensor::zeros(&[1, 64, 8, 8]));
    let h = block.forward(&mut g, &m.store, face, race).unwrap();
    for (o, f) in g.value(h).data().iter().zip(g.value(face).data()) {
        assert_eq!(*o, 0.75 * f);
    }
}

#[test]
fn mixer_rejects_mismatched_race_side() {
    let m = model();
    let mut g = Graph::inference();
    let face = g.constant(Tensor::<f32>::zeros(&[1, 16, 8, 8]));
    let race = g.constant(Tensor::zeros(&[1, 64, 3, 3]));
    assert!(m.race_encoder.mixers[0]
        .forward(&mut g, &m.store, face, race)
        .is_err());
}

#[test]
fn generator_rejects_non_finite_codes() {
    let m = model();
    let mut codes = Tensor::<f32>::zeros(&[1, 18, 512]);
    codes.data_mut()[10] = f32::NAN;
    assert!(matches!(
        m.generate_image(&codes),
        Err(RaganError::Validation(_))
    ));
}

#[test]
fn equal_codes_equal_images() {
    let m = model();
    let c = Codes32::new((0..18 * 512).map(|i| (i as f32 * 0.01).cos()).collect()).unwrap();
    assert_eq!(m.generate_one(&c).unwrap(), m.generate_one(&c).unwrap());
}

#[test]
fn fullface_inversion_keeps_shape_and_is_deterministic() {
    let m = model();
    let x: Image32 = toy_image(4);
    let a = m.invert_to_fullface(&x).unwrap();
    assert_eq!((a.channels(), a.height(), a.width()), (3, 256, 256));
    assert_eq!(a, m.invert_to_fullface(&x).unwrap());
}

#[test]
fn frozen_backbones_get_no_parameter_gradients() {
    let mut m = model();
    perturb(&mut m.store, "race_encoder.", 1, 0.05);
    let x = Image32::batch(&[toy_image(0)]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = m.forward(&mut g, xv, &[30.0]).unwrap();
    let sq = g.square(out.x_prime);
    let loss = g.sum(sq);
    let grads = g.param_grads(&g.backward(loss).unwrap());
    let names: Vec<&str> = grads
        .iter()
        .map(|(id, _)| m.store.get(*id).name.as_str())
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        assert!(
            ["age_encoder.", "race_encoder.", "mixer."]
                .iter()
                .any(|p| n.starts_with(p)),
            "gradient reached frozen parameter {n}"
        );
    }
    // After moving off the identity init, every race-encoder tensor has a
    // nonzero gradient somewhere.
    for id in m.store.ids_with_prefix("race_encoder.") {
        let g = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, t)| t.max_abs())
            .unwrap_or(0.0);
        assert!(g > 0.0, "{} has zero gradient", m.store.get(id).name);
    }
}

#[test]
fn outputs_finite_on_extreme_inputs() {
    let m = model();
    for v in [-1.0f32, 1.0] {
        let x = Image32::filled(3, 256, 256, v).unwrap();
        let (y, f) = m.ra_gan_forward(&x, age(1.0), age(120.0)).unwrap();
        assert!(y.data().iter().all(|p| p.is_finite()));
        assert!(f.tensor().all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_output_bounded(scale in 1.0f32..1.0e4, seed in 0u32..1000) {
        let m = model();
        let c = Codes32::new((0..18 * 512).map(|i| scale * ((i as u32 ^ seed) as f32 * 0.37).sin()).collect()).unwrap();
        let y = m.generate_one(&c).unwrap();
        prop_assert!(y.data().iter().all(|p| (-1.0..=1.0).contains(p)));
    }

    #[test]
    fn mixer_at_init_is_linear_on_equal_inputs(a in -5.0f32..5.0, seed in 0u32..1000) {
        let m = model();
        let s = Codes32::new((0..18 * 512).map(|i| ((i as u32 ^ seed) as f32 * 0.11).cos()).collect()).unwrap();
        let scaled = Codes32::new(s.tensor().data().iter().map(|v| a * v).collect()).unwrap();
        let f = m.mix_features(&scaled, &scaled).unwrap();
        prop_assert_eq!(f, scaled);
    }
}
