//! Reverse-mode tape: eager forward evaluation, one reverse sweep.

use super::conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, out_extent, Geom2d, Geom3d,
};
use super::tensor::{Element, Tensor};
use super::NdiffError;

/// How convolutions read past the spatial borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps contribute zero.
    Zero,
    /// Out-of-range taps replicate the border sample, matching the slab
    /// border rule used on volumes.
    Replicate,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Value,
        w: Value,
        b: Value,
        geom: Geom2d,
    },
    Conv3d {
        x: Value,
        w: Value,
        b: Value,
        geom: Geom3d,
    },
    SubpixelUp {
        x: Value,
        k: usize,
        axis: usize,
    },
    Relu {
        x: Value,
    },
    Concat {
        xs: Vec<Value>,
    },
    Add {
        a: Value,
        b: Value,
    },
    Scale {
        x: Value,
        factor: T,
    },
    L1Loss {
        pred: Value,
        target: Value,
    },
}

/// Recording of one forward computation. Operations push nodes eagerly;
/// [`Tape::backward`] fills per-node gradients in a single reverse sweep.
pub struct Tape<T: Element> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs: bool) -> Value {
        self.ops.push(op);
        self.values.push(value);
        self.needs.push(needs);
        self.grads.push(None);
        Value(self.ops.len() - 1)
    }

    /// Inserts an input tensor. `requires_grad` marks it as a differentiation
    /// target; everything derived from it will carry gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Value {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target with respect to node `v`.
    pub fn grad(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn scalar_value(&self, v: Value) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    /// 2D cross-correlation: input `[C_in, H, W]`, weight
    /// `[C_out, C_in, kh, kw]` (odd kernels), bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        b: Value,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Value, NdiffError> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(NdiffError::ShapeMismatch(format!(
                "conv2d expects x[C,H,W], w[O,C,kh,kw], b[O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NdiffError::NonOddKernel(vec![kh, kw]));
        }
        if ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(NdiffError::ShapeMismatch(format!(
                "conv2d channel mismatch: x has {}, w expects {}, bias {}",
                xs[0], ws[1], bs[0]
            )));
        }
        let h_out = out_extent(xs[1], kh, stride, pad);
        let w_out = out_extent(xs[2], kw, stride, pad);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(NdiffError::ShapeMismatch(format!(
                    "conv2d spatial {}x{} too small for kernel {kh}x{kw} with pad {pad}",
                    xs[1], xs[2]
                )))
            }
        };
        let geom = Geom2d {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
            mode,
        };
        let out = conv2d_forward(
            self.values[x.0].data(),
            self.values[w.0].data(),
            self.values[b.0].data(),
            &geom,
        );
        let value = Tensor::new(vec![geom.c_out, h_out, w_out], out).expect("conv2d shape");
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value, needs))
    }

    /// 3D cross-correlation: input `[C_in, D, H, W]`, weight
    /// `[C_out, C_in, kd, kh, kw]`, bias `[C_out]`.
    pub fn conv3d(
        &mut self,
        x: Value,
        w: Value,
        b: Value,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Value, NdiffError> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 || bs.len() != 1 {
            return Err(NdiffError::ShapeMismatch(format!(
                "conv3d expects x[C,D,H,W], w[O,C,kd,kh,kw], b[O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (kd, kh, kw) = (ws[2], ws[3], ws[4]);
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(NdiffError::NonOddKernel(vec![kd, kh, kw]));
        }
        if ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(NdiffError::ShapeMismatch(format!(
                "conv3d channel mismatch: x has {}, w expects {}, bias {}",
                xs[0], ws[1], bs[0]
            )));
        }
        let d_out = out_extent(xs[1], kd, stride, pad);
        let h_out = out_extent(xs[2], kh, stride, pad);
        let w_out = out_extent(xs[3], kw, stride, pad);
        let (d_out, h_out, w_out) = match (d_out, h_out, w_out) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(NdiffError::ShapeMismatch(format!(
                    "conv3d spatial {:?} too small for kernel {kd}x{kh}x{kw} with pad {pad}",
                    &xs[1..]
                )))
            }
        };
        let geom = Geom3d {
            c_in: xs[0],
            d: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kd,
            kh,
            kw,
            stride,
            pad,
            d_out,
            h_out,
            w_out,
            mode,
        };
        let out = conv3d_forward(
            self.values[x.0].data(),
            self.values[w.0].data(),
            self.values[b.0].data(),
            &geom,
        );
        let value =
            Tensor::new(vec![geom.c_out, d_out, h_out, w_out], out).expect("conv3d shape");
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(Op::Conv3d { x, w, b, geom }, value, needs))
    }

    /// Pixel shuffle along one spatial axis: `[C*k, ..., A, ...]` becomes
    /// `[C, ..., A*k, ...]`, where output position `a*k + r` in channel group
    /// `g` reads input channel `g*k + r` at position `a`.
    pub fn subpixel_upsample_axis(
        &mut self,
        x: Value,
        k: usize,
        axis: usize,
    ) -> Result<Value, NdiffError> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() < 2 || axis == 0 || axis >= xs.len() {
            return Err(NdiffError::ShapeMismatch(format!(
                "subpixel axis {axis} invalid for shape {xs:?}"
            )));
        }
        if k == 0 || xs[0] % k != 0 {
            return Err(NdiffError::NonDivisibleChannels {
                channels: xs[0],
                k,
            });
        }
        let mut out_shape = xs.clone();
        out_shape[0] /= k;
        out_shape[axis] *= k;
        let mut out = Tensor::zeros(out_shape.clone());
        shuffle_axis(
            self.values[x.0].data(),
            &xs,
            out.data_mut(),
            &out_shape,
            k,
            axis,
            false,
        );
        let needs = self.needs[x.0];
        Ok(self.push(Op::SubpixelUp { x, k, axis }, out, needs))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let needs = self.needs[x.0];
        self.push(Op::Relu { x }, out, needs)
    }

    /// Stacks tensors along the channel axis; spatial shapes must agree.
    pub fn concat_channels(&mut self, xs: &[Value]) -> Result<Value, NdiffError> {
        if xs.is_empty() {
            return Err(NdiffError::ShapeMismatch("concat of no tensors".into()));
        }
        let first = self.values[xs[0].0].shape().to_vec();
        let mut channels = 0;
        for &v in xs {
            let s = self.values[v.0].shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NdiffError::ShapeMismatch(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    s, first
                )));
            }
            channels += s[0];
        }
        let mut shape = first.clone();
        shape[0] = channels;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &v in xs {
            data.extend_from_slice(self.values[v.0].data());
        }
        let value = Tensor::new(shape, data).expect("concat shape");
        let needs = xs.iter().any(|v| self.needs[v.0]);
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, value, needs))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, NdiffError> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(NdiffError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = self.values[a.0].clone();
        out.add_assign_tensor(&self.values[b.0]);
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn scale(&mut self, x: Value, factor: T) -> Value {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let needs = self.needs[x.0];
        self.push(Op::Scale { x, factor }, out, needs)
    }

    /// Mean absolute difference as a scalar node. The subgradient of `|x|`
    /// at zero is taken to be 0.
    pub fn l1_loss(&mut self, pred: Value, target: Value) -> Result<Value, NdiffError> {
        if self.values[pred.0].shape() != self.values[target.0].shape() {
            return Err(NdiffError::ShapeMismatch(format!(
                "l1_loss: {:?} vs {:?}",
                self.values[pred.0].shape(),
                self.values[target.0].shape()
            )));
        }
        let p = self.values[pred.0].data();
        let t = self.values[target.0].data();
        let mut acc = T::ZERO;
        for (a, b) in p.iter().zip(t.iter()) {
            acc += (*a - *b).abs();
        }
        let mean = acc / T::from_f64(p.len() as f64);
        let needs = self.needs[pred.0] || self.needs[target.0];
        Ok(self.push(Op::L1Loss { pred, target }, Tensor::scalar(mean), needs))
    }

    /// Backpropagates from a scalar node, accumulating gradients for every
    /// node that transitively requires them.
    pub fn backward(&mut self, loss: Value) -> Result<(), NdiffError> {
        if self.values[loss.0].len() != 1 {
            return Err(NdiffError::ShapeMismatch(format!(
                "backward target must be scalar, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            if !self.needs[id] || self.grads[id].is_none() {
                continue;
            }
            let gout = self.grads[id].take().expect("gradient present");
            self.step_back(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Value) -> &mut Tensor<T> {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.values[v.0].shape().to_vec()));
        }
        self.grads[v.0].as_mut().expect("just filled")
    }

    fn step_back(&mut self, id: usize, gout: &Tensor<T>) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                if self.needs[x.0] {
                    self.ensure_grad(x);
                }
                if self.needs[w.0] {
                    self.ensure_grad(w);
                }
                if self.needs[b.0] {
                    self.ensure_grad(b);
                }
                // Gradients accumulate in place; take each buffer in turn.
                let mut gx = if self.needs[x.0] { self.grads[x.0].take() } else { None };
                let mut gw = if self.needs[w.0] { self.grads[w.0].take() } else { None };
                let mut gb = if self.needs[b.0] { self.grads[b.0].take() } else { None };
                conv2d_backward(
                    self.values[x.0].data(),
                    self.values[w.0].data(),
                    gout.data(),
                    &geom,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    self.grads[x.0] = Some(t);
                }
                if let Some(t) = gw {
                    self.grads[w.0] = Some(t);
                }
                if let Some(t) = gb {
                    self.grads[b.0] = Some(t);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                if self.needs[x.0] {
                    self.ensure_grad(x);
                }
                if self.needs[w.0] {
                    self.ensure_grad(w);
                }
                if self.needs[b.0] {
                    self.ensure_grad(b);
                }
                let mut gx = if self.needs[x.0] { self.grads[x.0].take() } else { None };
                let mut gw = if self.needs[w.0] { self.grads[w.0].take() } else { None };
                let mut gb = if self.needs[b.0] { self.grads[b.0].take() } else { None };
                conv3d_backward(
                    self.values[x.0].data(),
                    self.values[w.0].data(),
                    gout.data(),
                    &geom,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    self.grads[x.0] = Some(t);
                }
                if let Some(t) = gw {
                    self.grads[w.0] = Some(t);
                }
                if let Some(t) = gb {
                    self.grads[b.0] = Some(t);
                }
            }
            Op::SubpixelUp { x, k, axis } => {
                let (x, k, axis) = (*x, *k, *axis);
                if !self.needs[x.0] {
                    return;
                }
                let in_shape = self.values[x.0].shape().to_vec();
                let out_shape = gout.shape().to_vec();
                let gx = self.ensure_grad(x);
                // Exact inverse scatter of the forward gather.
                shuffle_axis(gout.data(), &in_shape, gx.data_mut(), &out_shape, k, axis, true);
            }
            Op::Relu { x } => {
                let x = *x;
                if !self.needs[x.0] {
                    return;
                }
                let mask: Vec<bool> = self.values[x.0].data().iter().map(|&v| v > T::ZERO).collect();
                let gx = self.ensure_grad(x);
                for ((d, &g), m) in gx.data_mut().iter_mut().zip(gout.data()).zip(mask) {
                    if m {
                        *d += g;
                    }
                }
            }
            Op::Concat { xs } => {
                let xs = xs.clone();
                let spatial: usize = gout.shape()[1..].iter().product();
                let mut offset = 0;
                for v in xs {
                    let c = self.values[v.0].shape()[0];
                    let len = c * spatial;
                    if self.needs[v.0] {
                        let gseg = gout.data()[offset..offset + len].to_vec();
                        let gx = self.ensure_grad(v);
                        for (d, g) in gx.data_mut().iter_mut().zip(gseg) {
                            *d += g;
                        }
                    }
                    offset += len;
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for v in [a, b] {
                    if self.needs[v.0] {
                        let gx = self.ensure_grad(v);
                        for (d, &g) in gx.data_mut().iter_mut().zip(gout.data()) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if !self.needs[x.0] {
                    return;
                }
                let gx = self.ensure_grad(x);
                for (d, &g) in gx.data_mut().iter_mut().zip(gout.data()) {
                    *d += g * factor;
                }
            }
            Op::L1Loss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let g = gout.data()[0];
                let n = T::from_f64(self.values[pred.0].len() as f64);
                let signs: Vec<T> = self.values[pred.0]
                    .data()
                    .iter()
                    .zip(self.values[target.0].data())
                    .map(|(&p, &t)| {
                        if p > t {
                            T::ONE
                        } else if p < t {
                            -T::ONE
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                if self.needs[pred.0] {
                    let gp = self.ensure_grad(pred);
                    for (d, &s) in gp.data_mut().iter_mut().zip(signs.iter()) {
                        *d += g * s / n;
                    }
                }
                if self.needs[target.0] {
                    let gt = self.ensure_grad(target);
                    for (d, &s) in gt.data_mut().iter_mut().zip(signs.iter()) {
                        *d -= g * s / n;
                    }
                }
            }
        }
    }
}

/// Moves data between the `[C*k, ..., A, ...]` and `[C, ..., A*k, ...]`
/// layouts. With `inverse == false` copies input to output (upsample);
/// with `inverse == true` accumulates the output-layout buffer back into
/// the input-layout buffer (the backward scatter).
fn shuffle_axis<T: Element>(
    src_in_layout_or_dst: &[T],
    in_shape: &[usize],
    dst: &mut [T],
    out_shape: &[usize],
    k: usize,
    axis: usize,
    inverse: bool,
) {
    let rank = in_shape.len();
    let spatial_in = &in_shape[1..];
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let c_in = in_shape[0];
    let spatial_total: usize = spatial_in.iter().product();
    let mut idx = vec![0usize; rank - 1]; // spatial odometer in input coordinates
    for cin in 0..c_in {
        let g = cin / k;
        let r = cin % k;
        idx.iter_mut().for_each(|v| *v = 0);
        for _ in 0..spatial_total {
            let mut in_off = cin * in_strides[0];
            let mut out_off = g * out_strides[0];
            for (d, &i) in idx.iter().enumerate() {
                in_off += i * in_strides[d + 1];
                let oi = if d + 1 == axis { i * k + r } else { i };
                out_off += oi * out_strides[d + 1];
            }
            if inverse {
                dst[in_off] += src_in_layout_or_dst[out_off];
            } else {
                dst[out_off] = src_in_layout_or_dst[in_off];
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < spatial_in[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}
