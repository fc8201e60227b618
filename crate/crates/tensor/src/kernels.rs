//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape validation happens in `graph`.

use crate::scalar::{gemm, Scalar};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn conv(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

/// `cols[(c, ky, kx), (oy, ox)] = x[c, oy*s + ky - p, ox*s + kx - p]`.
pub fn im2col<T: Scalar>(x: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..channels {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.in_h) {
                        None => d.fill(T::zero()),
                        Some(iy) => {
                            let xr = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.in_w) {
                                    Some(ix) => xr[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back and accumulates into `x`.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..channels {
        let xc = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.in_h) else {
                        continue;
                    };
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let xr = &mut xc[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, &v) in s.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            xr[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = w[co, ci*k*k] · im2col(x[n])`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let kk = cin * g.kernel * g.kernel;
    let in_sz = cin * g.in_h * g.in_w;
    let mut y = vec![T::zero(); batch * cout * plane];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let yn = &mut y[n * cout * plane..(n + 1) * cout * plane];
        if g.pointwise() {
            gemm(false, false, cout, kk, plane, w, xn, T::zero(), yn);
        } else {
            im2col(xn, cin, g, &mut cols);
            gemm(false, false, cout, kk, plane, w, &cols, T::zero(), yn);
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]; either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane = g.out_h * g.out_w;
    let kk = cin * g.kernel * g.kernel;
    let in_sz = cin * g.in_h * g.in_w;
    let mut cols = vec![T::zero(); kk * plane];
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let gyn = &gy[n * cout * plane..(n + 1) * cout * plane];
        if let Some(gw) = gw.as_deref_mut() {
            let src: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(xn, cin, g, &mut cols);
                &cols
            };
            gemm(false, true, cout, plane, kk, gyn, src, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxn = &mut gx[n * in_sz..(n + 1) * in_sz];
            if g.pointwise() {
                gemm(true, false, kk, cout, plane, w, gyn, T::one(), gxn);
            } else {
                gemm(true, false, kk, cout, plane, w, gyn, T::zero(), &mut cols);
                col2im(&cols, cin, g, gxn);
            }
        }
    }
}

/// Transposed convolution. `g` describes the *adjoint* convolution, i.e.
/// `g.in_*` is the transposed-conv output size and `g.out_*` its input size.
/// Weights are laid out `[cin, cout, k, k]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let plane_in = g.out_h * g.out_w;
    let out_sz = cout * g.in_h * g.in_w;
    let kk = cout * g.kernel * g.kernel;
    let mut y = vec![T::zero(); batch * out_sz];
    let mut cols = vec![T::zero(); kk * plane_in];
    for n in 0..batch {
        let xn = &x[n * cin * plane_in..(n + 1) * cin * plane_in];
        gemm(true, false, kk, cin, plane_in, w, xn, T::zero(), &mut cols);
        col2im(&cols, cout, g, &mut y[n * out_sz..(n + 1) * out_sz]);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane_in = g.out_h * g.out_w;
    let out_sz = cout * g.in_h * g.in_w;
    let kk = cout * g.kernel * g.kernel;
    let mut cols = vec![T::zero(); kk * plane_in];
    for n in 0..batch {
        im2col(&gy[n * out_sz..(n + 1) * out_sz], cout, g, &mut cols);
        let xn = &x[n * cin * plane_in..(n + 1) * cin * plane_in];
        if let Some(gx) = gx.as_deref_mut() {
            let gxn = &mut gx[n * cin * plane_in..(n + 1) * cin * plane_in];
            gemm(false, false, cin, kk, plane_in, w, &cols, T::one(), gxn);
        }
        if let Some(gw) = gw.as_deref_mut() {
            gemm(false, true, cin, plane_in, kk, xn, &cols, T::one(), gw);
        }
    }
}

/// One bilinear tap table per axis: `(i0, i1, w0, w1)` for each output index.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear resize of `planes` independent `h × w` planes (align-corners off).
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect();
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            let r0 = &xp[y0 * w..(y0 + 1) * w];
            let r1 = &xp[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                yp[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect();
    for p in 0..planes {
        let gp = &gy[p * oh * ow..(p + 1) * oh * ow];
        let xp = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = gp[oy * ow + ox];
                xp[y0 * w + x0] += g * wy0 * wx0;
                xp[y0 * w + x1] += g * wy0 * wx1;
                xp[y1 * w + x0] += g * wy1 * wx0;
                xp[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

/// Non-overlapping `k × k` mean pooling over `planes` planes.
pub fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for iy in 0..h {
            let row = &xp[iy * w..(iy + 1) * w];
            let yr = &mut yp[(iy / k) * ow..(iy / k + 1) * ow];
            for (ix, &v) in row.iter().enumerate() {
                yr[ix / k] += v;
            }
        }
        for v in yp.iter_mut() {
            *v *= inv;
        }
    }
    y
}

pub fn avg_pool_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    gx: &mut [T],
) {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for p in 0..planes {
        let gp = &gy[p * oh * ow..(p + 1) * oh * ow];
        let xp = &mut gx[p * h * w..(p + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                xp[iy * w + ix] += gp[(iy / k) * ow + ix / k] * inv;
            }
        }
    }
}

/// Broadcast layout of two same-rank operands against their common shape,
/// with contiguous runs merged so the inner loop stays long.
#[derive(Clone, Debug)]
pub struct Broadcast {
    pub out_shape: Vec<usize>,
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    s
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if a.len() != b.len() {
            return None;
        }
        let mut out = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return None,
            });
        }
        let sa = strides_for(a, &out);
        let sb = strides_for(b, &out);
        // Merge adjacent dims whose strides compose contiguously for both operands.
        let mut dims: Vec<usize> = Vec::new();
        let mut ma: Vec<usize> = Vec::new();
        let mut mb: Vec<usize> = Vec::new();
        for d in 0..out.len() {
            if out[d] == 1 {
                continue;
            }
            if let (Some(&ld), Some(&la), Some(&lb)) = (dims.last(), ma.last(), mb.last()) {
                let ok_a = la == sa[d] * out[d];
                let ok_b = lb == sb[d] * out[d];
                if ok_a && ok_b {
                    let n = dims.len() - 1;
                    dims[n] = ld * out[d];
                    ma[n] = sa[d];
                    mb[n] = sb[d];
                    continue;
                }
            }
            dims.push(out[d]);
            ma.push(sa[d]);
            mb.push(sb[d]);
        }
        if dims.is_empty() {
            dims.push(1);
            ma.push(0);
            mb.push(0);
        }
        Some(Self {
            out_shape: out,
            dims,
            sa: ma,
            sb: mb,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.dims.len();
        let inner = self.dims[r - 1];
        let (ia_s, ib_s) = (self.sa[r - 1], self.sb[r - 1]);
        let outer: usize = self.dims[..r - 1].iter().product();
        let mut idx = vec![0usize; r - 1];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut o = 0;
        for _ in 0..outer {
            for i in 0..inner {
                f(o, oa + i * ia_s, ob + i * ib_s);
                o += 1;
            }
            for d in (0..r - 1).rev() {
                idx[d] += 1;
                oa += self.sa[d];
                ob += self.sb[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                oa -= self.sa[d] * self.dims[d];
                ob -= self.sb[d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }
}
