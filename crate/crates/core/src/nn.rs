//! Parameterised layers. A layer handle only holds [`ParamId`]s, so one
//! handle works with a store of any scalar type.

use ragan_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Deterministic per-component generator: `seed` mixed with an FNV-1a hash
/// of `name`, so adding a component never shifts another's weights.
pub fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with variance `gain² / fan_in`.
    Uniform {
        gain: f64,
    },
    Zeros,
    Constant(f64),
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1.0 };
}

/// Samples in f64 and casts, so f32 and f64 stores hold the same weights
/// up to rounding.
pub fn init_tensor<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c)),
        Init::Uniform { gain } => {
            let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-a..=a)))
        }
    }
}

/// Registers parameters under `prefix.` with a shared trainable flag.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub prefix: String,
    pub trainable: bool,
    pub rng: ChaCha8Rng,
    /// Initialisation of every bias created through this builder.
    pub bias: Init,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, prefix: &str, seed: u64, trainable: bool) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            trainable,
            rng: component_rng(seed, prefix),
            bias: Init::Zeros,
        }
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        init: Init,
    ) -> Result<ParamId> {
        let t = init_tensor(shape, fan_in, init, &mut self.rng);
        Ok(self
            .store
            .insert(format!("{}.{name}", self.prefix), t, self.trainable)?)
    }

    /// Nested builder sharing this one's store, flag and random stream.
    pub fn scope<R>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Builder<'_, T>) -> Result<R>,
    ) -> Result<R> {
        let mut child = Builder {
            store: &mut *self.store,
            prefix: format!("{}.{name}", self.prefix),
            trainable: self.trainable,
            rng: self.rng.clone(),
            bias: self.bias,
        };
        let out = f(&mut child);
        self.rng = child.rng;
        out
    }
}

/// Zero-initialised layers get zero biases whatever the builder default.
fn bias_init(default: Init, weight: Init) -> Init {
    match weight {
        Init::Zeros => Init::Zeros,
        _ => default,
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Self {
            w: b.param(&format!("{name}.w"), &[cout, cin, k, k], fan_in, init)?,
            b: b.param(
                &format!("{name}.b"),
                &[1, cout, 1, 1],
                fan_in,
                bias_init(b.bias, init),
            )?,
            cout,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        Ok(g.add(y, b)?)
    }
}

/// Transposed convolution with `kernel == stride`: every input pixel
/// expands into its own `k × k` output patch.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            w: b.param(&format!("{name}.w"), &[cin, cout, k, k], cin, init)?,
            b: b.param(
                &format!("{name}.b"),
                &[1, cout, 1, 1],
                cin,
                bias_init(b.bias, init),
            )?,
            stride: k,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.conv_transpose2d(x, w, self.stride, 0)?;
        Ok(g.add(y, b)?)
    }
}

/// `y = x Wᵀ + b` on `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        out: usize,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            w: b.param(&format!("{name}.w"), &[out, fan_in], fan_in, Init::DEFAULT)?,
            b: b.param(&format!("{name}.b"), &[1, out], fan_in, bias)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.linear(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// `[n, c, h, w] -> [n, c·h·w]`.
pub fn flatten<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    Ok(g.reshape(x, &[s[0], rest])?)
}

/// Spatial mean: `[n, c, h, w] -> [n, c]`.
pub fn global_avg<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4("global_avg")?;
    if h != w {
        return Err(crate::error::RaganError::Shape(format!(
            "global_avg needs a square map, got {h}x{w}"
        )));
    }
    let y = g.avg_pool(x, h)?;
    Ok(g.reshape(y, &[n, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_streams_are_independent_of_order() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let x1 = init_tensor::<f64>(&[4], 4, Init::DEFAULT, &mut component_rng(3, "x"));
        Builder::new(&mut a, "y", 3, true)
            .param("w", &[4], 4, Init::DEFAULT)
            .unwrap();
        let ia = Builder::new(&mut a, "x", 3, true)
            .param("w", &[4], 4, Init::DEFAULT)
            .unwrap();
        let ib = Builder::new(&mut b, "x", 3, true)
            .param("w", &[4], 4, Init::DEFAULT)
            .unwrap();
        assert_eq!(a.value(ia), b.value(ib));
        assert_eq!(a.value(ia), &x1);
    }

    #[test]
    fn uniform_init_has_requested_variance() {
        let mut rng = component_rng(0, "v");
        let t = init_tensor::<f64>(&[20000], 50, Init::DEFAULT, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 1.0 / 50.0).abs() < 1e-3, "{var}");
    }

    #[test]
    fn f32_and_f64_inits_agree() {
        let a = init_tensor::<f64>(&[16], 8, Init::DEFAULT, &mut component_rng(1, "p"));
        let b = init_tensor::<f32>(&[16], 8, Init::DEFAULT, &mut component_rng(1, "p"));
        assert_eq!(a.cast::<f32>(), b);
    }

    #[test]
    fn layer_shapes() {
        let mut ps = ParamStore::<f32>::new();
        let mut bld = Builder::new(&mut ps, "m", 0, true);
        let conv = Conv2d::new(&mut bld, "c", 3, 5, 3, 2, Init::DEFAULT).unwrap();
        let up = ConvTranspose2d::new(&mut bld, "t", 5, 2, 4, Init::DEFAULT).unwrap();
        let fc = Linear::new(&mut bld, "f", 2 * 16 * 16, 7, Init::Zeros).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3, 8, 8]));
        let y = conv.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4, 4]);
        let z = up.forward(&mut g, &ps, y).unwrap();
        assert_eq!(g.shape(z), &[2, 2, 16, 16]);
        let f = flatten(&mut g, z).unwrap();
        let o = fc.forward(&mut g, &ps, f).unwrap();
        assert_eq!(g.shape(o), &[2, 7]);
        let m = global_avg(&mut g, z).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
    }
}
