//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a valid topological order. [`Graph::backward`] walks the tape in exact
//! reverse order and accumulates vector-Jacobian products into the inputs of
//! each node, so a value used several times receives the sum of all of its
//! contributions.
//!
//! Convolutions are cross-correlations (the kernel is not flipped).

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; requires odd kernels.
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleAxis {
        x: Var,
        w: Var,
        axis: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Covariance {
        input: Var,
        scale: f64,
        centered: Vec<f64>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (h, w, din) = self.value(input).hwd()?;
        let (kh, kw, kin, dout) = match self.shape(kernel) {
            &[a, b, c, d] => (a, b, c, d),
            s => {
                return Err(Error::shape(format!(
                    "conv kernel must be rank 4, got {s:?}"
                )))
            }
        };
        if kin != din {
            return Err(Error::shape(format!(
                "conv expects {kin} input channels, feature map has {din}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "conv bias must have shape [{dout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(format!(
                        "\"same\" padding needs odd kernel dims, got {kh}x{kw}"
                    )));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(Error::shape(format!(
                "{kh}x{kw} kernel does not fit a {h}x{w} input"
            )));
        }
        let oh = (h + 2 * pad.0 - kh) / stride + 1;
        let ow = (w + 2 * pad.1 - kw) / stride + 1;
        let geo = ConvGeometry {
            h,
            w,
            din,
            kh,
            kw,
            dout,
            oh,
            ow,
            stride,
            pad,
        };
        let mut out = vec![0.0; oh * ow * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        conv_forward(
            &geo,
            self.value(input).data(),
            self.value(kernel).data(),
            &mut out,
        );
        let rg = self.needs(&[input, kernel]) || bias.is_some_and(|b| self.needs(&[b]));
        let value = Tensor::new(vec![oh, ow, dout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// `out[i_0, .., i_n] = in[j]` where `j[axes[a]] = i_a`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_permutation(axes, shape.len())?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&shape, axes, |dst, s| out[dst] = src[s]);
        let rg = self.needs(&[input]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Channels `[start, start + len)` of a feature map.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (h, w, d) = self.value(input).hwd()?;
        if len == 0 || start + len > d {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {d} channels",
                start + len
            )));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(h * w * len);
        for px in src.chunks_exact(d) {
            out.extend_from_slice(&px[start..start + len]);
        }
        let rg = self.needs(&[input]);
        let value = Tensor::new(vec![h, w, len], out)?;
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    /// Splits the channel axis into `parts` contiguous, equally sized slices.
    pub fn split_channels(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let (_, _, d) = self.value(input).hwd()?;
        if parts == 0 || d % parts != 0 {
            return Err(Error::shape(format!(
                "cannot split {d} channels into {parts} equal parts"
            )));
        }
        let len = d / parts;
        (0..parts)
            .map(|p| self.slice_channels(input, p * len, len))
            .collect()
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::arg("concat_channels needs at least one input"));
        };
        let (h, w, _) = self.value(first).hwd()?;
        let mut depths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vh, vw, vd) = self.value(v).hwd()?;
            if (vh, vw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat_channels spatial mismatch: {h}x{w} vs {vh}x{vw}"
                )));
            }
            depths.push(vd);
        }
        let total: usize = depths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&v, &d) in inputs.iter().zip(&depths) {
                out.extend_from_slice(&self.value(v).data()[px * d..(px + 1) * d]);
            }
        }
        let rg = self.needs(inputs);
        let value = Tensor::new(vec![h, w, total], out)?;
        Ok(self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Multiplies every element of `x` by `w[index along axis]`.
    pub fn scale_axis(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let n = self.value(w).numel();
        if n != shape[axis] {
            return Err(Error::shape(format!(
                "scale_axis weight has {n} entries, axis {axis} has {}",
                shape[axis]
            )));
        }
        let stride = strides(&shape)[axis];
        let len = shape[axis];
        let wv = self.value(w).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[(i / stride) % len])
            .collect();
        let rg = self.needs(&[x, w]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ScaleAxis { x, w, axis }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = map(self.value(input), |v| v.max(0.0));
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = map(self.value(input), sigmoid);
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Channel covariance of an `A x B x C` map, viewed as a `C x N` matrix
    /// with `N = A * B`: `scale * (X - mean)(X - mean)^T`.
    pub fn covariance(&mut self, input: Var, normalize: bool) -> Result<Var> {
        let (a, b, c) = self.value(input).hwd()?;
        let n = a * b;
        let scale = if normalize { 1.0 / n as f64 } else { 1.0 };
        let src = self.value(input).data();
        // shifted by the first pixel, so constant channels centre to exact zeros
        let shift = src[..c].to_vec();
        let mut mean = vec![0.0; c];
        for px in src.chunks_exact(c) {
            for ((m, &v), s) in mean.iter_mut().zip(px).zip(&shift) {
                *m += v - s;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let centered: Vec<f64> = src
            .chunks_exact(c)
            .flat_map(|px| {
                px.iter()
                    .zip(&shift)
                    .zip(&mean)
                    .map(|((v, s), m)| (v - s) - m)
            })
            .collect();
        let mut cov = vec![0.0; c * c];
        for px in centered.chunks_exact(c) {
            for p in 0..c {
                let xp = px[p];
                let row = &mut cov[p * c..(p + 1) * c];
                for q in p..c {
                    row[q] += xp * px[q];
                }
            }
        }
        for p in 0..c {
            for q in p..c {
                let v = cov[p * c + q] * scale;
                cov[p * c + q] = v;
                cov[q * c + p] = v;
            }
        }
        let rg = self.needs(&[input]);
        let value = Tensor::new(vec![c, c], cov)?;
        Ok(self.push(
            value,
            Op::Covariance {
                input,
                scale,
                centered,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (h, w, d) = self.value(input).hwd()?;
        let mut out = vec![0.0; d];
        for px in self.value(input).data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.needs(&[input]);
        let value = Tensor::new(vec![d], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Categorical cross-entropy of `softmax(logits)` against `target`,
    /// evaluated with a max shift.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        let k = z.len();
        if k < 2 {
            return Err(Error::arg(format!(
                "cross-entropy needs >= 2 classes, got {k}"
            )));
        }
        if target >= k {
            return Err(Error::arg(format!(
                "class index {target} out of range for {k} classes"
            )));
        }
        let probs = softmax(z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = (lse - z[target]).max(0.0);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`. Every `requires_grad` leaf gets
    /// an entry, zero-filled when it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut leaves, idx)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut [Option<Tensor>],
        idx: usize,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (h, w, din) = x.hwd()?;
                let ks = k.shape();
                let (oh, ow, dout) = node.value.hwd()?;
                let geo = ConvGeometry {
                    h,
                    w,
                    din,
                    kh: ks[0],
                    kw: ks[1],
                    dout,
                    oh,
                    ow,
                    stride: *stride,
                    pad: *pad,
                };
                let want_x = self.nodes[input.0].requires_grad;
                let want_k = self.nodes[kernel.0].requires_grad;
                let mut dx = want_x.then(|| vec![0.0; x.numel()]);
                let mut dk = want_k.then(|| vec![0.0; k.numel()]);
                conv_backward(
                    &geo,
                    x.data(),
                    k.data(),
                    &g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks_exact(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Permute { input, axes } => {
                let shape = self.shape(*input);
                let mut dx = vec![0.0; g.len()];
                for_each_permuted(shape, axes, |dst, src| dx[src] = g[dst]);
                accumulate(grads, *input, dx);
            }
            Op::Reshape { input } => accumulate(grads, *input, g),
            Op::SliceChannels { input, start } => {
                let (_, _, d) = self.value(*input).hwd()?;
                let (_, _, len) = node.value.hwd()?;
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (px, row) in g.chunks_exact(len).enumerate() {
                    dx[px * d + start..px * d + start + len].copy_from_slice(row);
                }
                accumulate(grads, *input, dx);
            }
            Op::ConcatChannels { inputs } => {
                let (h, w, total) = node.value.hwd()?;
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[2];
                    if self.nodes[v.0].requires_grad {
                        let mut dv = Vec::with_capacity(h * w * d);
                        for px in 0..h * w {
                            dv.extend_from_slice(&g[px * total + offset..px * total + offset + d]);
                        }
                        accumulate(grads, v, dv);
                    }
                    offset += d;
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.clone());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, zip_map(&g, bv, |x, y| x * y));
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, zip_map(&g, av, |x, y| x * y));
                }
            }
            Op::ScaleAxis { x, w, axis } => {
                let shape = self.shape(*x);
                let stride = strides(shape)[*axis];
                let len = shape[*axis];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.nodes[x.0].requires_grad {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * wv[(i / stride) % len])
                        .collect();
                    accumulate(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; len];
                    for (i, (&gv, &v)) in g.iter().zip(xv).enumerate() {
                        dw[(i / stride) % len] += gv * v;
                    }
                    accumulate(grads, *w, dw);
                }
            }
            Op::Relu { input } => {
                let xv = self.value(*input).data();
                let dx = zip_map(&g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 });
                accumulate(grads, *input, dx);
            }
            Op::Sigmoid { input } => {
                let yv = node.value.data();
                let dx = zip_map(&g, yv, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *input, dx);
            }
            Op::Covariance {
                input,
                scale,
                centered,
            } => {
                let c = node.value.shape()[0];
                let n = centered.len() / c;
                // symmetric part of the upstream gradient
                let mut sym = vec![0.0; c * c];
                for p in 0..c {
                    for q in 0..c {
                        sym[p * c + q] = scale * (g[p * c + q] + g[q * c + p]);
                    }
                }
                let mut dx = vec![0.0; centered.len()];
                for (px, out) in centered.chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                    for p in 0..c {
                        let row = &sym[p * c..(p + 1) * c];
                        out[p] = row.iter().zip(px).map(|(s, x)| s * x).sum();
                    }
                }
                // project out the mean: the centering is a linear projection
                let mut mean = vec![0.0; c];
                for px in dx.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(px) {
                        *m += v;
                    }
                }
                for px in dx.chunks_exact_mut(c) {
                    for (v, m) in px.iter_mut().zip(&mean) {
                        *v -= m / n as f64;
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let (h, w, d) = self.value(*input).hwd()?;
                let n = (h * w) as f64;
                let mut dx = Vec::with_capacity(h * w * d);
                for _ in 0..h * w {
                    dx.extend(g.iter().map(|v| v / n));
                }
                accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let dx = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g[0] * (p - if i == *target { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::arg(format!(
            "permutation {axes:?} has wrong length for rank {rank}"
        )));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::arg(format!(
                "{axes:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Calls `f(out_offset, in_offset)` for every element of the permuted tensor.
fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..numel {
        f(dst, src);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

struct ConvGeometry {
    h: usize,
    w: usize,
    din: usize,
    kh: usize,
    kw: usize,
    dout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: (usize, usize),
}

impl ConvGeometry {
    /// Input coordinate hit by output `o` and kernel tap `k` along one axis.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < len).then_some(pos)
    }
}

fn conv_forward(geo: &ConvGeometry, x: &[f64], k: &[f64], out: &mut [f64]) {
    let ConvGeometry {
        h,
        w,
        din,
        kh,
        kw,
        dout,
        oh,
        ow,
        stride,
        pad,
    } = *geo;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * dout..(oy * ow + ox + 1) * dout];
            for ky in 0..kh {
                let Some(iy) = ConvGeometry::source(oy, ky, stride, pad.0, h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = ConvGeometry::source(ox, kx, stride, pad.1, w) else {
                        continue;
                    };
                    let xin = &x[(iy * w + ix) * din..(iy * w + ix + 1) * din];
                    let kbase = (ky * kw + kx) * din * dout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &k[kbase + ci * dout..kbase + (ci + 1) * dout];
                        for (o, &kv) in row.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    geo: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let ConvGeometry {
        h,
        w,
        din,
        kh,
        kw,
        dout,
        oh,
        ow,
        stride,
        pad,
    } = *geo;
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &g[(oy * ow + ox) * dout..(oy * ow + ox + 1) * dout];
            for ky in 0..kh {
                let Some(iy) = ConvGeometry::source(oy, ky, stride, pad.0, h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = ConvGeometry::source(ox, kx, stride, pad.1, w) else {
                        continue;
                    };
                    let xbase = (iy * w + ix) * din;
                    let kbase = (ky * kw + kx) * din * dout;
                    for ci in 0..din {
                        let krange = kbase + ci * dout..kbase + (ci + 1) * dout;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xbase + ci] += k[krange.clone()]
                                .iter()
                                .zip(grow)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            let xv = x[xbase + ci];
                            for (d, &gv) in dk[krange].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
