//! Reverse-mode differentiation over a replayed operation tape.
//!
//! A [`Tape`] records every executed op together with the inputs its backward
//! rule needs. Calling [`Tape::backward`] visits the records in exact reverse
//! execution order and accumulates gradients per value id in a fixed order,
//! so a given graph always produces bit-identical gradients. One tape serves
//! one training step and is never shared across threads.

use crate::conv::{
    conv2d_backward, conv2d_forward, conv_dims, depthwise_backward, depthwise_dims, depthwise_forward, ConvPath,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{validate_axes, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&Tensor<S>, &mut GradSink<S>)>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    backward: Option<BackFn<S>>,
    op: &'static str,
}

/// Collects gradient contributions during the reverse sweep.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut [Option<Tensor<S>>],
    needs: &'a [bool],
}

impl<S: Scalar> GradSink<'_, S> {
    /// Whether anything upstream of `v` wants a gradient. Lets expensive
    /// rules (conv input grads for constant frames) skip dead work.
    #[inline]
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: Tensor<S>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.accumulate(&g).expect("gradient shape"),
            slot => *slot = Some(g),
        }
    }
}

/// Gradients of leaf values after a backward pass. Intermediate gradients
/// are dropped as soon as their consumers have run.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    conv_path: ConvPath,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), conv_path: ConvPath::Im2col, check_finite: cfg!(debug_assertions) }
    }

    pub fn with_conv_path(path: ConvPath) -> Self {
        Tape { conv_path: path, ..Self::new() }
    }

    /// Toggles the post-op NaN/Inf scan (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, needs_grad: true, backward: None, op: "leaf" });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, needs_grad: false, backward: None, op: "constant" });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push_op(&mut self, op: &'static str, value: Tensor<S>, parents: &[Var], backward: BackFn<S>) -> Result<Var> {
        if self.check_finite && !value.is_all_finite() {
            return Err(Error::NonFinite(format!("op '{op}' produced a non-finite value")));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward = needs_grad.then_some(backward);
        self.nodes.push(Node { value, needs_grad, backward, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::ONE));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || grads[id].is_none() {
                continue;
            }
            if let Some(back) = &node.backward {
                let g = grads[id].take().expect("grad present");
                let mut sink = GradSink { grads: &mut grads, needs: &needs };
                back(&g, &mut sink);
            }
        }
        Ok(Gradients { grads })
    }

    /// Like [`Tape::backward`] but accumulating wall time per op kind.
    /// Diagnostics only.
    pub fn backward_profiled(&self, loss: Var) -> Result<Vec<(&'static str, f64)>> {
        use std::collections::HashMap;
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::ONE));
        let mut times: HashMap<&'static str, f64> = HashMap::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || grads[id].is_none() {
                continue;
            }
            if let Some(back) = &node.backward {
                let g = grads[id].take().expect("grad present");
                let mut sink = GradSink { grads: &mut grads, needs: &needs };
                let t0 = std::time::Instant::now();
                back(&g, &mut sink);
                *times.entry(node.op).or_default() += t0.elapsed().as_secs_f64();
            }
        }
        let mut v: Vec<(&'static str, f64)> = times.into_iter().collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        Ok(v)
    }

    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push_op(
            "sub",
            out,
            &[a, b],
            Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.map(|v| -v));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.zip_map(&vb, |x, y| x * y)?;
        self.push_op(
            "mul",
            out,
            &[a, b],
            Box::new(move |g, sink| {
                if sink.needs(a) {
                    sink.add(a, g.zip_map(&vb, |gi, y| gi * y).expect("mul grad"));
                }
                if sink.needs(b) {
                    sink.add(b, g.zip_map(&va, |gi, x| gi * x).expect("mul grad"));
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Result<Var> {
        let c = S::from_f64(f);
        let out = self.value(a).map(|x| x * c);
        self.push_op("scale", out, &[a], Box::new(move |g, sink| sink.add(a, g.map(|v| v * c))))
    }

    pub fn add_scalar(&mut self, a: Var, f: f64) -> Result<Var> {
        let c = S::from_f64(f);
        let out = self.value(a).map(|x| x + c);
        self.push_op("add_scalar", out, &[a], Box::new(move |g, sink| sink.add(a, g.clone())))
    }

    // ── Elementwise unary ───────────────────────────────────────────

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let va = self.value(a).clone();
        if kind == UnaryKind::Log && self.check_finite {
            if let Some(v) = va.data().iter().find(|v| **v <= S::ZERO) {
                return Err(Error::InvalidArgument(format!("log of non-positive value {v}")));
            }
        }
        let out = match kind {
            UnaryKind::Sigmoid => va.map(|x| S::ONE / (S::ONE + (-x).exp())),
            UnaryKind::Tanh => va.map(|x| x.tanh()),
            UnaryKind::Relu => va.map(|x| x.maxs(S::ZERO)),
            UnaryKind::Exp => va.map(|x| x.exp()),
            UnaryKind::Log => va.map(|x| x.ln()),
            UnaryKind::Square => va.map(|x| x * x),
        };
        let vy = out.clone();
        let name: &'static str = match kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
        };
        self.push_op(
            name,
            out,
            &[a],
            Box::new(move |g, sink| {
                let two = S::from_f64(2.0);
                let dx = match kind {
                    UnaryKind::Sigmoid => g.zip_map(&vy, |gi, y| gi * y * (S::ONE - y)),
                    UnaryKind::Tanh => g.zip_map(&vy, |gi, y| gi * (S::ONE - y * y)),
                    // relu gradient at exactly 0 is defined as 0.
                    UnaryKind::Relu => g.zip_map(&va, |gi, x| if x > S::ZERO { gi } else { S::ZERO }),
                    UnaryKind::Exp => g.zip_map(&vy, |gi, y| gi * y),
                    UnaryKind::Log => g.zip_map(&va, |gi, x| gi / x),
                    UnaryKind::Square => g.zip_map(&va, |gi, x| gi * two * x),
                };
                sink.add(a, dx.expect("unary grad"));
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }

    /// Clamp with pass-through gradient inside the bounds, zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo_s, hi_s) = (S::from_f64(lo), S::from_f64(hi));
        let va = self.value(a).clone();
        let out = va.map(|x| x.maxs(lo_s).mins(hi_s));
        self.push_op(
            "clamp",
            out,
            &[a],
            Box::new(move |g, sink| {
                let dx = g
                    .zip_map(&va, |gi, x| if x >= lo_s && x <= hi_s { gi } else { S::ZERO })
                    .expect("clamp grad");
                sink.add(a, dx);
            }),
        )
    }

    // ── Convolutions ────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let d = conv_dims(&vx, &vw, &vb, stride, pad)?;
        let out = conv2d_forward(&vx, &vw, &vb, stride, pad, self.conv_path)?;
        let path = self.conv_path;
        self.push_op(
            "conv2d",
            out,
            &[x, weight, bias],
            Box::new(move |g, sink| {
                let (dx, dw, db) = conv2d_backward(g, &vx, &vw, &d, path, sink.needs(x));
                if let Some(dx) = dx {
                    sink.add(x, dx);
                }
                sink.add(weight, dw);
                sink.add(bias, db);
            }),
        )
    }

    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let d = depthwise_dims(&vx, &vw, &vb, stride, pad)?;
        let out = depthwise_forward(&vx, &vw, &vb, stride, pad)?;
        self.push_op(
            "depthwise_conv2d",
            out,
            &[x, weight, bias],
            Box::new(move |g, sink| {
                let (dx, dw, db) = depthwise_backward(g, &vx, &vw, &d, sink.needs(x));
                if let Some(dx) = dx {
                    sink.add(x, dx);
                }
                sink.add(weight, dw);
                sink.add(bias, db);
            }),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axes: &[usize], keepdims: bool) -> Result<Var> {
        let va = self.value(a).clone();
        validate_axes(va.shape(), axes)?;
        let in_shape = va.shape().to_vec();
        let reduced: Vec<bool> = {
            let mut m = vec![false; in_shape.len()];
            for &ax in axes {
                m[ax] = true;
            }
            m
        };
        let mut out_shape: Vec<usize> = Vec::new();
        for (i, &d) in in_shape.iter().enumerate() {
            if reduced[i] {
                if keepdims {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(d);
            }
        }
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let out_numel: usize = out_shape.iter().product();
        let scale = match kind {
            ReduceKind::Sum => S::ONE,
            ReduceKind::Mean => S::from_f64(1.0 / count as f64),
        };

        // Hot shapes take direct loops; anything else goes through the
        // generic index mapping.
        let all_axes = reduced.iter().all(|&r| r);
        let spatial_pool = in_shape.len() == 4 && reduced == [false, false, true, true];

        if all_axes {
            let mut acc = S::ZERO;
            for &v in va.data() {
                acc += v;
            }
            let out = Tensor::new(out_shape, vec![acc * scale])?;
            let shape = in_shape.clone();
            return self.push_op(
                "reduce",
                out,
                &[a],
                Box::new(move |g, sink| {
                    sink.add(a, Tensor::filled(&shape, g.data()[0] * scale));
                }),
            );
        }
        if spatial_pool {
            let plane = in_shape[2] * in_shape[3];
            let nc = in_shape[0] * in_shape[1];
            let mut out = vec![S::ZERO; nc];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = S::ZERO;
                for &v in &va.data()[i * plane..(i + 1) * plane] {
                    acc += v;
                }
                *o = acc * scale;
            }
            let out = Tensor::new(out_shape, out)?;
            let shape = in_shape.clone();
            return self.push_op(
                "reduce",
                out,
                &[a],
                Box::new(move |g, sink| {
                    let gd = g.data();
                    let mut dx = vec![S::ZERO; nc * plane];
                    for i in 0..nc {
                        dx[i * plane..(i + 1) * plane].fill(gd[i] * scale);
                    }
                    sink.add(a, Tensor::new(shape.clone(), dx).expect("reduce grad"));
                }),
            );
        }

        let map = index_map(&in_shape, &reduced, keepdims);
        let mut out = vec![S::ZERO; out_numel];
        for (i, &v) in va.data().iter().enumerate() {
            out[map.out_index(i)] += v;
        }
        if kind == ReduceKind::Mean {
            for v in out.iter_mut() {
                *v = *v * scale;
            }
        }
        let out = Tensor::new(out_shape, out)?;
        self.push_op(
            "reduce",
            out,
            &[a],
            Box::new(move |g, sink| {
                let gd = g.data();
                let dx = Tensor::from_fn(va.shape(), |i| gd[map.out_index(i)] * scale);
                sink.add(a, dx);
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        let v = self.reduce(a, ReduceKind::Sum, &axes, false)?;
        Ok(v)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Mean, &axes, false)
    }

    /// Global average pool: mean over H and W, keeping `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool needs rank 4, got {:?}",
                self.value(a).shape()
            )));
        }
        self.reduce(a, ReduceKind::Mean, &[2, 3], true)
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let in_shape = self.value(a).shape().to_vec();
        self.push_op(
            "reshape",
            out,
            &[a],
            Box::new(move |g, sink| {
                sink.add(a, g.reshaped(&in_shape).expect("reshape grad"));
            }),
        )
    }

    pub fn concat_ch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).clone();
        if first.rank() != 4 {
            return Err(Error::ShapeMismatch("concat_ch needs rank-4 inputs".into()));
        }
        let (n, h, w) = (first.dim(0), first.dim(2), first.dim(3));
        let mut chans = Vec::with_capacity(parts.len());
        let mut total_c = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 4 || v.dim(0) != n || v.dim(2) != h || v.dim(3) != w {
                return Err(Error::ShapeMismatch(format!(
                    "concat_ch mismatch: {:?} vs [N={n},*,{h},{w}]",
                    v.shape()
                )));
            }
            chans.push(v.dim(1));
            total_c += v.dim(1);
        }
        let plane = h * w;
        let mut out = vec![S::ZERO; n * total_c * plane];
        for ni in 0..n {
            let mut c0 = 0;
            for (&p, &pc) in parts.iter().zip(chans.iter()) {
                let src = self.value(p).data();
                let src_off = ni * pc * plane;
                let dst_off = (ni * total_c + c0) * plane;
                out[dst_off..dst_off + pc * plane].copy_from_slice(&src[src_off..src_off + pc * plane]);
                c0 += pc;
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], out)?;
        let parts: Vec<Var> = parts.to_vec();
        self.push_op(
            "concat_ch",
            out,
            &parts.clone(),
            Box::new(move |g, sink| {
                let gd = g.data();
                let mut c0 = 0;
                for (&p, &pc) in parts.iter().zip(chans.iter()) {
                    if sink.needs(p) {
                        let mut part = vec![S::ZERO; n * pc * plane];
                        for ni in 0..n {
                            let src_off = (ni * total_c + c0) * plane;
                            let dst_off = ni * pc * plane;
                            part[dst_off..dst_off + pc * plane]
                                .copy_from_slice(&gd[src_off..src_off + pc * plane]);
                        }
                        sink.add(p, Tensor::new(vec![n, pc, h, w], part).expect("concat grad"));
                    }
                    c0 += pc;
                }
            }),
        )
    }

    /// Channels `[start, start+len)` of a rank-4 tensor.
    pub fn slice_ch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a).clone();
        if va.rank() != 4 {
            return Err(Error::ShapeMismatch("slice_ch needs rank 4".into()));
        }
        let (n, c, h, w) = (va.dim(0), va.dim(1), va.dim(2), va.dim(3));
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = vec![S::ZERO; n * len * plane];
        for ni in 0..n {
            let src = (ni * c + start) * plane;
            out[ni * len * plane..(ni + 1) * len * plane].copy_from_slice(&va.data()[src..src + len * plane]);
        }
        let out = Tensor::new(vec![n, len, h, w], out)?;
        self.push_op(
            "slice_ch",
            out,
            &[a],
            Box::new(move |g, sink| {
                let mut dx = vec![S::ZERO; n * c * plane];
                for ni in 0..n {
                    let dst = (ni * c + start) * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&g.data()[ni * len * plane..(ni + 1) * len * plane]);
                }
                sink.add(a, Tensor::new(vec![n, c, h, w], dx).expect("slice grad"));
            }),
        )
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a).clone();
        if va.rank() != 4 {
            return Err(Error::ShapeMismatch("upsample2x needs rank 4".into()));
        }
        let (n, c, h, w) = (va.dim(0), va.dim(1), va.dim(2), va.dim(3));
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![S::ZERO; n * c * h2 * w2];
        let src = va.data();
        for nc in 0..n * c {
            for y in 0..h2 {
                let sy = y / 2;
                let srow = nc * h * w + sy * w;
                let drow = nc * h2 * w2 + y * w2;
                for x in 0..w2 {
                    out[drow + x] = src[srow + x / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push_op(
            "upsample2x",
            out,
            &[a],
            Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![S::ZERO; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h2 {
                        let srow = nc * h * w + (y / 2) * w;
                        let drow = nc * h2 * w2 + y * w2;
                        for x in 0..w2 {
                            dx[srow + x / 2] += gd[drow + x];
                        }
                    }
                }
                sink.add(a, Tensor::new(vec![n, c, h, w], dx).expect("upsample grad"));
            }),
        )
    }

    /// Broadcasts `[N,C,1,1]` across a spatial extent.
    pub fn broadcast_hw(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let va = self.value(a).clone();
        if va.rank() != 4 || va.dim(2) != 1 || va.dim(3) != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast_hw needs [N,C,1,1], got {:?}",
                va.shape()
            )));
        }
        let (n, c) = (va.dim(0), va.dim(1));
        let mut out = vec![S::ZERO; n * c * h * w];
        for nc in 0..n * c {
            out[nc * h * w..(nc + 1) * h * w].fill(va.data()[nc]);
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push_op(
            "broadcast_hw",
            out,
            &[a],
            Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![S::ZERO; n * c];
                for nc in 0..n * c {
                    let mut acc = S::ZERO;
                    for &v in &gd[nc * h * w..(nc + 1) * h * w] {
                        acc += v;
                    }
                    dx[nc] = acc;
                }
                sink.add(a, Tensor::new(vec![n, c, 1, 1], dx).expect("broadcast grad"));
            }),
        )
    }

    /// `scale[N,C,1,1] * x[N,C,H,W]`, the squeeze-and-excitation product.
    pub fn mul_bcast_hw(&mut self, scale: Var, x: Var) -> Result<Var> {
        let vs = self.value(scale).clone();
        let vx = self.value(x).clone();
        if vs.rank() != 4 || vx.rank() != 4 || vs.dim(0) != vx.dim(0) || vs.dim(1) != vx.dim(1) || vs.dim(2) != 1 || vs.dim(3) != 1 {
            return Err(Error::ShapeMismatch(format!(
                "mul_bcast_hw: scale {:?} vs x {:?}",
                vs.shape(),
                vx.shape()
            )));
        }
        let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let plane = h * w;
        let mut out = vec![S::ZERO; n * c * plane];
        for nc in 0..n * c {
            let s = vs.data()[nc];
            for (o, &v) in out[nc * plane..(nc + 1) * plane].iter_mut().zip(&vx.data()[nc * plane..(nc + 1) * plane]) {
                *o = s * v;
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push_op(
            "mul_bcast_hw",
            out,
            &[scale, x],
            Box::new(move |g, sink| {
                let gd = g.data();
                if sink.needs(scale) {
                    let mut ds = vec![S::ZERO; n * c];
                    for nc in 0..n * c {
                        let mut acc = S::ZERO;
                        for (gi, xi) in gd[nc * plane..(nc + 1) * plane].iter().zip(&vx.data()[nc * plane..(nc + 1) * plane]) {
                            acc += *gi * *xi;
                        }
                        ds[nc] = acc;
                    }
                    sink.add(scale, Tensor::new(vec![n, c, 1, 1], ds).expect("scale grad"));
                }
                if sink.needs(x) {
                    let mut dx = vec![S::ZERO; n * c * plane];
                    for nc in 0..n * c {
                        let s = vs.data()[nc];
                        for (o, &gi) in dx[nc * plane..(nc + 1) * plane].iter_mut().zip(&gd[nc * plane..(nc + 1) * plane]) {
                            *o = s * gi;
                        }
                    }
                    sink.add(x, Tensor::new(vec![n, c, h, w], dx).expect("x grad"));
                }
            }),
        )
    }

    /// `mask[N,1,H,W] * x[N,C,H,W]`, the fusion product with the mask
    /// broadcast across color channels.
    pub fn mul_bcast_ch(&mut self, mask: Var, x: Var) -> Result<Var> {
        let vm = self.value(mask).clone();
        let vx = self.value(x).clone();
        if vm.rank() != 4 || vx.rank() != 4 || vm.dim(0) != vx.dim(0) || vm.dim(1) != 1 || vm.dim(2) != vx.dim(2) || vm.dim(3) != vx.dim(3) {
            return Err(Error::ShapeMismatch(format!(
                "mul_bcast_ch: mask {:?} vs x {:?}",
                vm.shape(),
                vx.shape()
            )));
        }
        let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let plane = h * w;
        let mut out = vec![S::ZERO; n * c * plane];
        for ni in 0..n {
            let m = &vm.data()[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    out[off + i] = m[i] * vx.data()[off + i];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push_op(
            "mul_bcast_ch",
            out,
            &[mask, x],
            Box::new(move |g, sink| {
                let gd = g.data();
                if sink.needs(mask) {
                    let mut dm = vec![S::ZERO; n * plane];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                dm[ni * plane + i] += gd[off + i] * vx.data()[off + i];
                            }
                        }
                    }
                    sink.add(mask, Tensor::new(vec![n, 1, h, w], dm).expect("mask grad"));
                }
                if sink.needs(x) {
                    let mut dx = vec![S::ZERO; n * c * plane];
                    for ni in 0..n {
                        let m = &vm.data()[ni * plane..(ni + 1) * plane];
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                dx[off + i] = m[i] * gd[off + i];
                            }
                        }
                    }
                    sink.add(x, Tensor::new(vec![n, c, h, w], dx).expect("x grad"));
                }
            }),
        )
    }

    /// Softmax over the channel axis of a rank-4 tensor.
    pub fn softmax_ch(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a).clone();
        if va.rank() != 4 {
            return Err(Error::ShapeMismatch("softmax_ch needs rank 4".into()));
        }
        let (n, c, h, w) = (va.dim(0), va.dim(1), va.dim(2), va.dim(3));
        let plane = h * w;
        let mut out = vec![S::ZERO; n * c * plane];
        let src = va.data();
        for ni in 0..n {
            for i in 0..plane {
                let mut mx = src[(ni * c) * plane + i];
                for ci in 1..c {
                    mx = mx.maxs(src[(ni * c + ci) * plane + i]);
                }
                let mut denom = S::ZERO;
                for ci in 0..c {
                    let e = (src[(ni * c + ci) * plane + i] - mx).exp();
                    out[(ni * c + ci) * plane + i] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out[(ni * c + ci) * plane + i] = out[(ni * c + ci) * plane + i] / denom;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let vy = out.clone();
        self.push_op(
            "softmax_ch",
            out,
            &[a],
            Box::new(move |g, sink| {
                let gd = g.data();
                let yd = vy.data();
                let mut dx = vec![S::ZERO; n * c * plane];
                for ni in 0..n {
                    for i in 0..plane {
                        let mut dot = S::ZERO;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * plane + i;
                            dot += gd[idx] * yd[idx];
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * plane + i;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                sink.add(a, Tensor::new(vec![n, c, h, w], dx).expect("softmax grad"));
            }),
        )
    }
}

/// Precomputed strides for mapping input indices to reduced-output indices.
struct IndexMap {
    in_shape: Vec<usize>,
    out_stride: Vec<usize>,
}

impl IndexMap {
    fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in (0..self.in_shape.len()).rev() {
            let coord = flat % self.in_shape[d];
            flat /= self.in_shape[d];
            out += coord * self.out_stride[d];
        }
        out
    }
}

fn index_map(in_shape: &[usize], reduced: &[bool], keepdims: bool) -> IndexMap {
    // Stride 0 on reduced axes collapses them.
    let mut out_dims: Vec<usize> = Vec::new();
    for (i, &d) in in_shape.iter().enumerate() {
        if reduced[i] {
            if keepdims {
                out_dims.push(1);
            }
        } else {
            out_dims.push(d);
        }
    }
    let mut strides = vec![0usize; in_shape.len()];
    let mut acc = 1usize;
    let mut oi = out_dims.len();
    for d in (0..in_shape.len()).rev() {
        if reduced[d] {
            if keepdims {
                oi -= 1;
                // dimension of size 1: stride irrelevant, coord always 0 via stride 0
            }
            strides[d] = 0;
        } else {
            oi = oi.saturating_sub(1);
            strides[d] = acc;
            acc *= in_shape[d];
        }
    }
    let _ = oi;
    IndexMap { in_shape: in_shape.to_vec(), out_stride: strides }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        let h = t.tanh(x).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        assert_eq!(t.value(h).item(), 0.0);
    }

    #[test]
    fn relu_gradient_sign() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2], vec![2.0, -2.0]).unwrap());
        let r = t.relu(x).unwrap();
        let s = t.sum_all(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum_all(x).unwrap();
        assert_eq!(t.value(s).item(), 6.0);

        let z = t.leaf(Tensor::zeros(&[4]));
        let m = t.mean_all(z).unwrap();
        assert_eq!(t.value(m).item(), 0.0);

        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_axes_keepdims() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap());
        let p = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 2, 1, 1]);
        assert_eq!(t.value(p).data(), &[2.5, 6.5]);
        assert!(t.reduce(x, ReduceKind::Sum, &[7], false).is_err());
    }

    #[test]
    fn two_loss_accumulation_is_linear() {
        // backward(a+b) == backward(a) + backward(b) for a shared input
        let run = |combined: bool| -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
            let sq = t.square(x).unwrap();
            let l1 = t.sum_all(sq).unwrap();
            let sg = t.sigmoid(x).unwrap();
            let l2 = t.sum_all(sg).unwrap();
            if combined {
                let l = t.add(l1, l2).unwrap();
                let g = t.backward(l).unwrap();
                g.get(x).unwrap().data().to_vec()
            } else {
                let g1 = t.backward(l1).unwrap();
                let g2 = t.backward(l2).unwrap();
                g1.get(x)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(g2.get(x).unwrap().data())
                    .map(|(a, b)| a + b)
                    .collect()
            }
        };
        let a = run(true);
        let b = run(false);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let go = || -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()));
            let w = t.leaf(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
            let b = t.leaf(Tensor::from_fn(&[3], |i| i as f64 * 0.1));
            let y = t.conv2d(x, w, b, 1, 1).unwrap();
            let s = t.sigmoid(y).unwrap();
            t.value(s).data().to_vec()
        };
        let a = go();
        let b = go();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn log_rejects_non_positive_when_checking() {
        let mut t = Tape::<f64>::new();
        t.set_check_finite(true);
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        assert!(t.unary(x, UnaryKind::Log).is_err());
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin() * 3.0));
        let y = t.softmax_ch(x).unwrap();
        let v = t.value(y);
        for n in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|c| v.data()[(n * 3 + c) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let b = t.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| 100.0 + i as f64));
        let cat = t.concat_ch(&[a, b]).unwrap();
        assert_eq!(t.value(cat).shape(), &[1, 3, 2, 2]);
        let back = t.slice_ch(cat, 2, 1).unwrap();
        assert_eq!(t.value(back).data(), t.value(b).data());
    }
}
