//! Style-code mixer and the style-based generator.

use ragan_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Unary, Var};
use rand::Rng;

use crate::domain::{IMAGE_SIZE, STYLE_DIM, STYLE_ROWS};
use crate::error::{RaganError, Result};
use crate::nn::{component_rng, Builder, Init, Linear};

fn check_codes<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<usize> {
    match *g.shape(v) {
        [n, STYLE_ROWS, STYLE_DIM] => Ok(n),
        ref s => Err(RaganError::Shape(format!(
            "{what} must be [n, 18, 512], got {s:?}"
        ))),
    }
}

/// Per-row gated blend of two style-code matrices:
///
/// `F[i] = σ(g_i) · A_i(S_age[i]) + (1 − σ(g_i)) · B_i(S_face[i])`
///
/// `A_i`, `B_i` are diagonal affine maps (`scale ⊙ s + shift`). With the
/// gate at zero and the maps at identity the output is the exact average.
#[derive(Clone, Debug)]
pub struct FeatureMixer {
    pub gate: ParamId,
    pub age_scale: ParamId,
    pub age_shift: ParamId,
    pub face_scale: ParamId,
    pub face_shift: ParamId,
}

impl FeatureMixer {
    pub const PREFIX: &'static str = "mixer";

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut b = Builder::new(store, Self::PREFIX, seed, true);
        let row = [1, STYLE_ROWS, STYLE_DIM];
        Ok(Self {
            gate: b.param("gate", &[1, STYLE_ROWS, 1], 1, Init::Zeros)?,
            age_scale: b.param("age.scale", &row, 1, Init::Constant(1.0))?,
            age_shift: b.param("age.shift", &row, 1, Init::Zeros)?,
            face_scale: b.param("face.scale", &row, 1, Init::Constant(1.0))?,
            face_shift: b.param("face.shift", &row, 1, Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        s_age: Var,
        s_face: Var,
    ) -> Result<Var> {
        let n = check_codes(g, s_age, "age codes")?;
        if check_codes(g, s_face, "face codes")? != n {
            return Err(RaganError::Shape(
                "age and face code batches differ in size".into(),
            ));
        }
        let affine = |g: &mut Graph<T>, x: Var, scale: ParamId, shift: ParamId| -> Result<Var> {
            let (sc, sh) = (g.param(ps, scale), g.param(ps, shift));
            let y = g.mul(x, sc)?;
            Ok(g.add(y, sh)?)
        };
        let a = affine(g, s_age, self.age_scale, self.age_shift)?;
        let b = affine(g, s_face, self.face_scale, self.face_shift)?;
        let gate = g.param(ps, self.gate);
        let w_age = g.sigmoid(gate);
        let neg = g.unary(gate, Unary::Neg);
        let w_face = g.sigmoid(neg);
        let a = g.mul(a, w_age)?;
        let b = g.mul(b, w_face)?;
        Ok(g.add(a, b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    ToRgb,
}

/// One modulated convolution consuming one style row.
#[derive(Clone, Debug)]
struct ModLayer {
    kind: LayerKind,
    upsample: bool,
    affine: Linear,
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    side: usize,
}

impl ModLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        index: usize,
        kind: LayerKind,
        cin: usize,
        cout: usize,
        side: usize,
        upsample: bool,
    ) -> Result<Self> {
        let kernel = if kind == LayerKind::Conv { 3 } else { 1 };
        b.scope(&format!("layer{index}"), |b| {
            Ok(Self {
                kind,
                upsample,
                affine: Linear::new(b, "affine", STYLE_DIM, cin, Init::Constant(1.0))?,
                weight: b.param(
                    "weight",
                    &[cout, cin, kernel, kernel],
                    cin * kernel * kernel,
                    Init::DEFAULT,
                )?,
                bias: b.param("bias", &[1, cout, 1, 1], 1, Init::Zeros)?,
                kernel,
                side,
            })
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        style: Var,
        noise: Option<Var>,
    ) -> Result<Var> {
        let x = if self.upsample {
            g.resize(x, self.side, self.side)?
        } else {
            x
        };
        let n = g.shape(x)[0];
        let w = g.param(ps, self.weight);
        let (cout, cin) = (g.shape(w)[0], g.shape(w)[1]);
        let s = self.affine.forward(g, ps, style)?;
        let s4 = g.reshape(s, &[n, cin, 1, 1])?;
        let xs = g.mul(x, s4)?;
        let mut y = g.conv2d(xs, w, 1, self.kernel / 2)?;
        if self.kind == LayerKind::Conv {
            // Scaling the input by s and the output by 1/‖W·s‖ per output
            // channel equals convolving with demodulated per-sample weights.
            let w2 = g.square(w);
            let w2 = g.sum_to(w2, &[cout, cin, 1, 1])?;
            let w2 = g.reshape(w2, &[cout, cin])?;
            let s2 = g.square(s);
            let energy = g.linear(s2, w2)?;
            let d = g.unary(energy, Unary::Rsqrt(T::from_f64_lossy(1e-8)));
            let d = g.reshape(d, &[n, cout, 1, 1])?;
            y = g.mul(y, d)?;
        }
        let bias = g.param(ps, self.bias);
        y = g.add(y, bias)?;
        if let Some(nz) = noise {
            y = g.add(y, nz)?;
        }
        Ok(if self.kind == LayerKind::Conv {
            g.tanh(y)
        } else {
            y
        })
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorArch {
    /// Channel width at sides 4, 8, 16, 32, 64, 128.
    pub widths: [usize; 6],
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            widths: [32, 32, 32, 16, 8, 4],
        }
    }
}

/// Skip-architecture style generator: a learned 4×4 constant refined by
/// modulated convolutions up to 128×128, with RGB contributions summed
/// across resolutions and a final RGB layer at 256×256. Eighteen layers,
/// one style row each; output squashed by `tanh`.
#[derive(Clone, Debug)]
pub struct Generator {
    constant: ParamId,
    layers: Vec<ModLayer>,
    noise: Vec<Option<Tensor<f64>>>,
}

impl Generator {
    pub const PREFIX: &'static str = "generator";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        arch: GeneratorArch,
        trainable: bool,
    ) -> Result<Self> {
        let mut b = Builder::new(store, Self::PREFIX, seed, trainable);
        let w = arch.widths;
        let constant = b.param("const", &[1, w[0], 4, 4], 1, Init::DEFAULT)?;
        let mut layers = vec![
            ModLayer::new(&mut b, 0, LayerKind::Conv, w[0], w[0], 4, false)?,
            ModLayer::new(&mut b, 1, LayerKind::ToRgb, w[0], 3, 4, false)?,
        ];
        for r in 1..6 {
            let side = 4 << r;
            let i = layers.len();
            layers.push(ModLayer::new(
                &mut b,
                i,
                LayerKind::Conv,
                w[r - 1],
                w[r],
                side,
                true,
            )?);
            layers.push(ModLayer::new(
                &mut b,
                i + 1,
                LayerKind::Conv,
                w[r],
                w[r],
                side,
                false,
            )?);
            layers.push(ModLayer::new(
                &mut b,
                i + 2,
                LayerKind::ToRgb,
                w[r],
                3,
                side,
                false,
            )?);
        }
        layers.push(ModLayer::new(
            &mut b,
            17,
            LayerKind::ToRgb,
            w[5],
            3,
            IMAGE_SIZE,
            true,
        )?);
        debug_assert_eq!(layers.len(), STYLE_ROWS);
        Ok(Self {
            constant,
            noise: vec![None; layers.len()],
            layers,
        })
    }

    /// Fixes per-layer noise planes drawn from `seed`, scaled by `strength`.
    /// Zero strength removes noise entirely.
    pub fn set_noise(&mut self, seed: u64, strength: f64) {
        for (i, layer) in self.layers.iter().enumerate() {
            self.noise[i] = (strength > 0.0 && layer.kind == LayerKind::Conv).then(|| {
                let mut rng = component_rng(seed, &format!("noise{i}"));
                Tensor::from_fn(&[1, 1, layer.side, layer.side], |_| {
                    strength * (rng.gen::<f64>() * 2.0 - 1.0)
                })
            });
        }
    }

    /// `[n, 18, 512] -> [n, 3, 256, 256]` in `[-1, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        codes: Var,
    ) -> Result<Var> {
        let n = check_codes(g, codes, "style codes")?;
        let rows: Vec<Var> = (0..STYLE_ROWS)
            .map(|i| {
                let r = g.narrow(codes, 1, i, 1)?;
                Ok(g.reshape(r, &[n, STYLE_DIM])?)
            })
            .collect::<Result<_>>()?;
        let c = g.param(ps, self.constant);
        let zeros = g.constant(Tensor::zeros(&[n, 1, 1, 1]));
        let mut x = g.add(c, zeros)?;
        let mut rgb: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let noise = self.noise[i].as_ref().map(|t| g.constant(t.cast()));
            let y = layer.forward(g, ps, x, rows[i], noise)?;
            match layer.kind {
                LayerKind::Conv => x = y,
                LayerKind::ToRgb => {
                    rgb = Some(match rgb {
                        None => y,
                        Some(prev) => {
                            let up = g.resize(prev, layer.side, layer.side)?;
                            g.add(up, y)?
                        }
                    })
                }
            }
        }
        Ok(g.tanh(rgb.expect("rgb layers present")))
    }
}
