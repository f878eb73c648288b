//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the tape once in reverse and leaves gradients in the grad slot of each
//! recorded tensor that requires them. Graphs are built per forward pass and
//! dropped afterwards; only first-order gradients are supported.

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Bilinear(Var),
    AvgPool(Var, usize),
    ConvT2 { x: Var, kernel: Var },
    Sum(Var),
    Dice { pred: Var, target: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&i| self.requires_grad(i));
        value.set_requires_grad(needs);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return dim_err(format!(
                "matmul_nt inner extents differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); m * n];
        ops::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return dim_err(format!(
                "bias {:?} does not match row width of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[C×H×W] + bias[C]` broadcast over pixels.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(bias).numel() != c {
            return dim_err(format!(
                "channel bias {:?} does not match {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, &bv) in data.chunks_mut(h * w).zip(b) {
            for v in plane {
                *v += bv;
            }
        }
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let rows = t.numel() / cols;
        let out = Tensor::new(t.shape(), ops::softmax_rows_raw(t.data(), rows, cols))?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return dim_err(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent of {:?}",
                self.shape(gamma),
                self.shape(beta),
                t.shape()
            ));
        }
        let rows = t.numel() / cols;
        let (out, cache) = ops::layer_norm_raw(
            t.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            rows,
            cols,
            eps,
        );
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return dim_err(format!("column slice {start}..{end} invalid for {:?}", self.shape(x)));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let out = Tensor::new(&[m, w], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > m {
            return dim_err(format!("row slice {start}..{end} invalid for {:?}", self.shape(x)));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(&[end - start, n], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect::<Result<_>>()?;
        let Some(&(m, _)) = dims.first() else {
            return dim_err("concat_cols of nothing");
        };
        if dims.iter().any(|&(r, _)| r != m) {
            return dim_err(format!("concat_cols row counts differ: {dims:?}"));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &(_, w)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect::<Result<_>>()?;
        let Some(&(_, n)) = dims.first() else {
            return dim_err("concat_rows of nothing");
        };
        if dims.iter().any(|&(_, c)| c != n) {
            return dim_err(format!("concat_rows widths differ: {dims:?}"));
        }
        let m: usize = dims.iter().map(|d| d.0).sum();
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Bilinear(x), &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool_downsample(self.value(x), factor)?;
        Ok(self.push(out, Op::AvgPool(x, factor), &[x]))
    }

    pub fn transposed_conv_up2(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::transposed_conv_up2(self.value(x), self.value(kernel))?;
        Ok(self.push(out, Op::ConvT2 { x, kernel }, &[x, kernel]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn dice_loss(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        let loss = ops::dice_loss(self.value(pred), self.value(target), eps)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice { pred, target, eps },
            &[pred, target],
        ))
    }

    /// Reverse accumulation from the scalar `loss`. Each recorded operation is
    /// visited once, in reverse order; tensors consumed more than once receive
    /// the sum of their consumers' contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Runs `f` on the gradient buffer of `v`, creating it on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).dims2().unwrap().1;
                acc(a, &mut |d| ops::gemm_nt(g, val(b).data(), d, m, n, k));
                acc(b, &mut |d| ops::gemm_tn(val(a).data(), g, d, k, m, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).dims2().unwrap().0;
                acc(a, &mut |d| ops::gemm_nn(g, val(b).data(), d, m, n, k));
                acc(b, &mut |d| ops::gemm_tn(g, val(a).data(), d, n, m, k));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |d| {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(val(b).data()) {
                        *dv += gv * bv;
                    }
                });
                acc(b, &mut |d| {
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(val(a).data()) {
                        *dv += gv * av;
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                let n = val(bias).numel();
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::AddChannelBias(x, bias) => {
                let plane = val(x).numel() / val(bias).numel();
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for (dv, chunk) in d.iter_mut().zip(g.chunks(plane)) {
                        *dv += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            &Op::Scale(x, s) => acc(x, &mut |d| {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += s * gv;
                }
            }),
            &Op::Transpose(x) => {
                let (m, n) = val(x).dims2().unwrap();
                acc(x, &mut |d| add_into(d, &ops::transpose_raw(g, n, m)));
            }
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            &Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().unwrap();
                acc(x, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let cols = val(*gamma).numel();
                let n = T::from_usize(cols).unwrap();
                let gam = val(*gamma).data();
                acc(*x, &mut |d| {
                    for (r, (dr, gr)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let xh = &cache.xhat[r * cols..(r + 1) * cols];
                        let rstd = cache.rstd[r];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            dr[c] += rstd * (gr[c] * gam[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (gr, xr) in g.chunks(cols).zip(cache.xhat.chunks(cols)) {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                            *dv += gv * xv;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(cols) {
                        add_into(d, gr);
                    }
                });
            }
            &Op::Gelu(x) => acc(x, &mut |d| {
                for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(val(x).data()) {
                    *dv += gv * ops::gelu_grad_scalar(xv);
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |d| {
                for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv += gv * yv * (T::one() - yv);
                }
            }),
            &Op::SliceCols { x, start } => {
                let n = val(x).dims2().unwrap().1;
                let w = out.dims2().unwrap().1;
                acc(x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut dr[start..start + w], gr);
                    }
                });
            }
            &Op::SliceRows { x, start } => {
                let n = val(x).dims2().unwrap().1;
                acc(x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let n = out.dims2().unwrap().1;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().unwrap().1;
                    acc(p, &mut |d| {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(n)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::Bilinear(x) => {
                let (c, h, w) = val(x).dims3().unwrap();
                let (_, oh, ow) = out.dims3().unwrap();
                acc(x, &mut |d| {
                    add_into(d, &ops::bilinear_backward_raw(g, c, h, w, oh, ow));
                });
            }
            &Op::AvgPool(x, f) => {
                let (c, h, w) = val(x).dims3().unwrap();
                let (oh, ow) = (h / f, w / f);
                let inv = T::one() / T::from_usize(f * f).unwrap();
                acc(x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[ch * h * w + y * w + xx] +=
                                    g[ch * oh * ow + (y / f) * ow + xx / f] * inv;
                            }
                        }
                    }
                });
            }
            &Op::ConvT2 { x, kernel } => {
                let (c, h, w) = val(x).dims3().unwrap();
                let co = val(kernel).shape()[1];
                let tiles = ops::conv_t2_gather(g, co, h, w);
                acc(x, &mut |d| {
                    ops::gemm_nt(val(kernel).data(), &tiles, d, c, co * 4, h * w)
                });
                acc(kernel, &mut |d| {
                    ops::gemm_nn(val(x).data(), &tiles, d, c, h * w, co * 4)
                });
            }
            &Op::Sum(x) => acc(x, &mut |d| {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }),
            &Op::Dice { pred, target, eps } => {
                let (p, t) = (val(pred).data(), val(target).data());
                let (inter, sp, st) = ops::dice_sums(p, t);
                let num = T::lit(2.0) * inter + eps;
                let den = sp + st + eps;
                let den2 = den * den;
                let two = T::lit(2.0);
                acc(pred, &mut |d| {
                    for (dv, &tv) in d.iter_mut().zip(t) {
                        *dv += g[0] * (num - two * tv * den) / den2;
                    }
                });
                acc(target, &mut |d| {
                    for (dv, &pv) in d.iter_mut().zip(p) {
                        *dv += g[0] * (num - two * pv * den) / den2;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
