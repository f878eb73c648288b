//! Forward kernels shared by the eager API and the recording [`Graph`](crate::graph::Graph).
//!
//! Matrices are row-major. Image-like tensors are `[C, H, W]`.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// --- raw matrix kernels -----------------------------------------------------

/// `c += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

// --- eager tensor operations ------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return dim_err(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    Tensor::new(&[n, m], transpose_raw(a.data(), m, n))
}

/// Numerically stable softmax along `axis`; the axis maximum is subtracted
/// before exponentiation.
pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    if axis >= shape.len() {
        return dim_err(format!("softmax axis {axis} invalid for shape {shape:?}"));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = v.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn softmax_rows_raw<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        let x = &src[r * cols..(r + 1) * cols];
        let y = &mut out[r * cols..(r + 1) * cols];
        let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (yv, &xv) in y.iter_mut().zip(x) {
            *yv = (xv - max).exp();
            total += *yv;
        }
        let inv = T::one() / total;
        for yv in y.iter_mut() {
            *yv *= inv;
        }
    }
    out
}

/// Normalised values and reciprocal standard deviations per row, kept for the
/// backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_raw<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    cols: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let n = T::from_usize(cols).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        // Zero-variance rows normalise to 0 so the output is exactly beta.
        let inv = if var == T::zero() {
            T::zero()
        } else {
            T::one() / (var + eps).sqrt()
        };
        rstd[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out[r * cols + c] = gamma[c] * h + beta[c];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Layer normalisation over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let cols = *x.shape().last().unwrap();
    if gamma.numel() != cols || beta.numel() != cols {
        return dim_err(format!(
            "layer_norm affine shapes {:?}/{:?} do not match last extent of {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        ));
    }
    let rows = x.numel() / cols;
    let (out, _) = layer_norm_raw(x.data(), gamma.data(), beta.data(), rows, cols, eps);
    Tensor::new(x.shape(), out)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x·Φ(x)` with the exact erf-based normal CDF.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(FRAC_1_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Source taps for one axis of a half-pixel-centre bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

pub(crate) fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: T::lit(1.0 - frac),
                w1: T::lit(frac),
            }
        })
        .collect()
}

pub(crate) fn bilinear_raw<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return x.to_vec();
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = vec![T::zero(); channels * out_h * out_w];
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                // Lerp form `a + t (b - a)` keeps constant inputs bit-exact.
                let top = r0[rx.i0] + rx.w1 * (r0[rx.i1] - r0[rx.i0]);
                let bottom = r1[rx.i0] + rx.w1 * (r1[rx.i1] - r1[rx.i0]);
                dst[oy * out_w + ox] = top + ry.w1 * (bottom - top);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_raw`]: scatters output gradients back to the taps.
pub(crate) fn bilinear_backward_raw<T: Scalar>(
    dy: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return dy.to_vec();
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut dx = vec![T::zero(); channels * h * w];
    for c in 0..channels {
        let g = &dy[c * out_h * out_w..(c + 1) * out_h * out_w];
        let d = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[ry.i0 * w + rx.i0] += ry.w0 * rx.w0 * v;
                d[ry.i0 * w + rx.i1] += ry.w0 * rx.w1 * v;
                d[ry.i1 * w + rx.i0] += ry.w1 * rx.w0 * v;
                d[ry.i1 * w + rx.i1] += ry.w1 * rx.w1 * v;
            }
        }
    }
    dx
}

/// Bilinear resize of a `[C, H, W]` (or `[H, W]`) tensor using half-pixel
/// centres with edge clamping (the align-corners-false convention).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return dim_err(format!("bilinear_resize target {out_h}x{out_w} has a zero extent"));
    }
    let data = bilinear_raw(x.data(), c, h, w, out_h, out_w);
    if x.rank() == 2 {
        Tensor::new(&[out_h, out_w], data)
    } else {
        Tensor::new(&[c, out_h, out_w], data)
    }
}

pub(crate) fn avg_pool_raw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::from_usize(f * f).unwrap();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[ch * oh * ow + (y / f) * ow + xx / f] += x[ch * h * w + y * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avg_pool_downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(format!(
            "avg_pool factor {factor} does not divide extents of {:?}",
            x.shape()
        ));
    }
    let data = avg_pool_raw(x.data(), c, h, w, factor);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h / factor;
    shape[r - 1] = w / factor;
    Tensor::new(&shape, data)
}

pub(crate) fn check_conv_t2<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    match kernel.shape() {
        [kc, co, 2, 2] if *kc == c => Ok((c, *co, h, w)),
        s => dim_err(format!(
            "transposed conv kernel {s:?} incompatible with input {:?} (need [{c}, C', 2, 2])",
            x.shape()
        )),
    }
}

/// Stride-2, 2×2 transposed convolution without bias. Returns the output and
/// the `[H·W, C'·4]` tile matrix before scattering.
pub(crate) fn conv_t2_raw<T: Scalar>(
    x: &[T],
    k: &[T],
    c: usize,
    co: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut tiles = vec![T::zero(); hw * co * 4];
    gemm_tn(x, k, &mut tiles, hw, c, co * 4);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); co * oh * ow];
    for y in 0..h {
        for xx in 0..w {
            let tile = &tiles[(y * w + xx) * co * 4..(y * w + xx + 1) * co * 4];
            for o in 0..co {
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[o * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] =
                            tile[o * 4 + dy * 2 + dx];
                    }
                }
            }
        }
    }
    out
}

/// Gathers an output gradient `[C', 2H, 2W]` into the `[H·W, C'·4]` tile layout.
pub(crate) fn conv_t2_gather<T: Scalar>(dy: &[T], co: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut tiles = vec![T::zero(); h * w * co * 4];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * co * 4;
            for o in 0..co {
                for dyy in 0..2 {
                    for dx in 0..2 {
                        tiles[base + o * 4 + dyy * 2 + dx] =
                            dy[o * oh * ow + (2 * y + dyy) * ow + 2 * xx + dx];
                    }
                }
            }
        }
    }
    tiles
}

/// Each input pixel emits its kernel tile scaled by the pixel value, summed
/// over input channels: `[C, H, W] ⊛ [C, C', 2, 2] → [C', 2H, 2W]`.
pub fn transposed_conv_up2<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, co, h, w) = check_conv_t2(x, kernel)?;
    let data = conv_t2_raw(x.data(), kernel.data(), c, co, h, w);
    Tensor::new(&[co, 2 * h, 2 * w], data)
}

/// `1 − (2·Σ p·t + eps) / (Σ p + Σ t + eps)`
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return dim_err(format!(
            "dice_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let (inter, sp, st) = dice_sums(pred.data(), target.data());
    Ok(T::one() - (T::lit(2.0) * inter + eps) / (sp + st + eps))
}

pub(crate) fn dice_sums<T: Scalar>(p: &[T], t: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut st = T::zero();
    for (&a, &b) in p.iter().zip(t) {
        inter += a * b;
        sp += a;
        st += b;
    }
    (inter, sp, st)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let col = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&m, &col).unwrap().data(), &[17., 39.]);
        assert_eq!(matmul(&t(&[1, 1], &[2.]), &t(&[1, 1], &[3.])).unwrap().data(), &[6.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&t(&[4], &[0.; 4]), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&t(&[2], &[0., 2f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 1. / 3.).abs() < 1e-15);
        assert!((s.data()[1] - 2. / 3.).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[2, 2], &[0., 1., 0., 1.]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = t(&[2], &[1., 1.]);
        let b = t(&[2], &[0., 0.]);
        let c = layer_norm(&t(&[1, 2], &[3., 3.]), &g, &b, 1e-5).unwrap();
        assert_eq!(c.data(), &[0., 0.]);
        let y = layer_norm(&t(&[1, 2], &[1., -1.]), &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[1., -1.]);
        let beta = t(&[2], &[0.3, -0.7]);
        let z = layer_norm(&t(&[1, 2], &[5., -2.]), &t(&[2], &[0., 0.]), &beta, 1e-5).unwrap();
        assert_eq!(z.data(), &[0.3, -0.7]);
        assert!(layer_norm(&t(&[1, 2], &[1., 2.]), &t(&[3], &[1.; 3]), &b, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // x·Φ(x) at 3 with Φ(3) = 0.998650101968...
        assert!((gelu_scalar(3.0f64) - 2.995_950_305_905_2).abs() < 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-8);
    }

    #[test]
    fn bilinear_examples() {
        let x = t(&[1, 2, 2], &[0., 1., 2., 3.]);
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
        assert_eq!(bilinear_resize(&x, 1, 1).unwrap().data(), &[1.5]);
        let c = Tensor::<f64>::full(&[2, 3, 5], 0.7);
        let r = bilinear_resize(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.7));
        assert!(bilinear_resize(&c, 0, 2).is_err());
    }

    #[test]
    fn avg_pool_examples() {
        let x = t(&[2, 2], &[0., 1., 2., 3.]);
        assert_eq!(avg_pool_downsample(&x, 2).unwrap().data(), &[1.5]);
        let ones = Tensor::<f64>::ones(&[4, 4]);
        assert_eq!(avg_pool_downsample(&ones, 2).unwrap(), Tensor::ones(&[2, 2]));
        assert_eq!(avg_pool_downsample(&x, 1).unwrap(), x);
        assert!(avg_pool_downsample(&Tensor::<f64>::ones(&[3, 4]), 2).is_err());
    }

    #[test]
    fn conv_t2_examples() {
        let k = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = transposed_conv_up2(&t(&[1, 1, 1], &[1.]), &k).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        let eye = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = transposed_conv_up2(&t(&[1, 1, 1], &[2.]), &eye).unwrap();
        assert_eq!(y.data(), &[2., 0., 0., 2.]);
        let z = transposed_conv_up2(&Tensor::<f64>::zeros(&[1, 3, 3]), &k).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.));
        assert!(transposed_conv_up2(&Tensor::<f64>::zeros(&[2, 3, 3]), &k).is_err());
    }

    #[test]
    fn conv_t2_sums_over_input_channels() {
        // two input channels, one output channel, 1x2 input
        let x = t(&[2, 1, 2], &[1., 2., 10., 20.]);
        let k = t(&[2, 1, 2, 2], &[1., 0., 0., 0., 0., 0., 0., 1.]);
        let y = transposed_conv_up2(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        assert_eq!(y.data(), &[1., 0., 2., 0., 0., 10., 0., 20.]);
    }

    #[test]
    fn dice_loss_examples() {
        let ones = Tensor::<f64>::ones(&[2, 2]);
        let zeros = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
        assert!((dice_loss(&zeros, &ones, 1.0).unwrap() - 0.8).abs() < 1e-15);
        let half = Tensor::<f64>::full(&[2, 2], 0.5);
        assert!((dice_loss(&half, &ones, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(dice_loss(&ones, &Tensor::ones(&[4]), 1.0).is_err());
    }
}
