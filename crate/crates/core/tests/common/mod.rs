#![allow(dead_code)]

use ragan::tensor::{ParamStore, Scalar, Tensor};
use ragan::{AgeValue, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth periodic test faces, distinct per index, values inside (-1, 1).
pub fn toy_image<T: Scalar>(k: usize) -> ImageTensor<T> {
    let t = Tensor::from_fn(&[3, 256, 256], |i| {
        let (c, y, x) = (i / 65536, (i / 256) % 256, i % 256);
        let (fx, fy) = (x as f64 / 256.0, y as f64 / 256.0);
        let pi = std::f64::consts::PI;
        let v = 0.6 * ((fx * 3.0 + k as f64) * pi).sin() * ((fy * 2.0 + c as f64 * 0.5) * pi).cos();
        T::from_f64_lossy(v.tanh())
    });
    ImageTensor::from_tensor(t).unwrap()
}

pub fn toy_samples<T: Scalar>(n: usize) -> Vec<(ImageTensor<T>, AgeValue)> {
    (0..n)
        .map(|k| {
            (
                toy_image(k),
                AgeValue::new(20.0 + 10.0 * (k % 6) as f64).unwrap(),
            )
        })
        .collect()
}

/// `[sum, Σ|x|, Σx², x[len/3]]` in f64.
pub fn fingerprint<T: Scalar>(data: &[T]) -> [f64; 4] {
    let v: Vec<f64> = data.iter().map(|x| x.to_f64_lossy()).collect();
    [
        v.iter().sum(),
        v.iter().map(|x| x.abs()).sum(),
        v.iter().map(|x| x * x).sum(),
        v[v.len() / 3],
    ]
}

pub fn assert_fingerprint(what: &str, got: [f64; 4], want: [f64; 4], rel: f64) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let tol = rel * w.abs().max(1e-3);
        assert!(
            (g - w).abs() <= tol,
            "{what}[{i}]: got {g:.9e}, want {w:.9e}"
        );
    }
}

/// Adds seeded uniform noise of amplitude `amp` to every parameter under `prefix`.
pub fn perturb<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids_with_prefix(prefix) {
        for v in store.value_mut(id).data_mut() {
            *v += T::from_f64_lossy(amp * (rng.gen::<f64>() * 2.0 - 1.0));
        }
    }
}

pub fn snapshot<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, Vec<T>)> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

/// Compares against a frozen fixture, or prints the value when
/// `RAGAN_RECORD_GOLDEN` is set so fixtures can be regenerated.
pub fn golden(what: &str, got: [f64; 4], want: [f64; 4]) {
    if std::env::var_os("RAGAN_RECORD_GOLDEN").is_some() {
        println!(
            "GOLDEN {what}: [{:e}, {:e}, {:e}, {:e}]",
            got[0], got[1], got[2], got[3]
        );
        return;
    }
    assert_fingerprint(what, got, want, 1e-4);
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let den = self.analytic.abs().max(self.numeric.abs());
        if den == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / den
        }
    }
}

fn forward_total(model: &ragan::RaGan64, x: &Tensor<f64>, targets: &[f64]) -> f64 {
    let mut g = ragan::tensor::Graph::inference();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, targets).unwrap();
    let w = model.config.loss;
    let l = ragan::losses::total_loss_graph(
        &mut g,
        &model.store,
        &model.backbones,
        xv,
        out.x_prime,
        out.f_mix,
        &w,
    )
    .unwrap();
    g.scalar(l.total)
}

/// Central differences of the forward-phase total loss against the taped
/// gradient, for `count` trainable scalars drawn with `seed`. Trainable
/// parameters are first moved off their identity initialization.
pub fn gradcheck_total_loss(seed: u64, count: usize, h: f64) -> Vec<GradSample> {
    let mut model = ragan::RaGan64::toy(&ragan::Config::default()).unwrap();
    for (k, p) in ragan::model::TRAINABLE_PREFIXES.iter().enumerate() {
        perturb(&mut model.store, &format!("{p}."), seed + k as u64, 0.05);
    }
    let x = ImageTensor::batch(&[toy_image::<f64>(1)]).unwrap();
    let targets = [40.0];

    let mut g = ragan::tensor::Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, &targets).unwrap();
    let w = model.config.loss;
    let l = ragan::losses::total_loss_graph(
        &mut g,
        &model.store,
        &model.backbones,
        xv,
        out.x_prime,
        out.f_mix,
        &w,
    )
    .unwrap();
    let grads = g.param_grads(&g.backward(l.total).unwrap());

    let ids = model.store.trainable_ids();
    let total: usize = ids.iter().map(|&id| model.store.value(id).numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let mut pick = None;
        for &id in &ids {
            let n = model.store.value(id).numel();
            if flat < n {
                pick = Some((id, flat));
                break;
            }
            flat -= n;
        }
        let (id, index) = pick.unwrap();
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map_or(0.0, |(_, t)| t.data()[index]);
        let base = model.store.value(id).data()[index];
        model.store.value_mut(id).data_mut()[index] = base + h;
        let plus = forward_total(&model, &x, &targets);
        model.store.value_mut(id).data_mut()[index] = base - h;
        let minus = forward_total(&model, &x, &targets);
        model.store.value_mut(id).data_mut()[index] = base;
        out.push(GradSample {
            name: model.store.get(id).name.clone(),
            index,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    out
}
