//! Dense tensors and a tape-based autodiff graph, generic over the float
//! type. `f32` is the training precision; `f64` backs the gradient checks.

mod error;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::{numel, Tensor};

/// Central finite difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference<T: Scalar>(
    x: &Tensor<T>,
    index: usize,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> f64 {
    let mut plus = x.clone();
    let base = plus.data()[index];
    plus.data_mut()[index] = base + T::from_f64_lossy(h);
    let mut minus = x.clone();
    minus.data_mut()[index] = base - T::from_f64_lossy(h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
