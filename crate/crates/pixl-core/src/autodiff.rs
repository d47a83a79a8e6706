//! Dense f32 tensor engine with reverse-mode differentiation.
//!
//! Computation is recorded on an arena tape: every op appends a node holding
//! its forward value and enough context to push gradients to its parents.
//! Backward walks the tape in reverse insertion order, which makes gradient
//! reduction order — and therefore whole training trajectories — bit-exact
//! across runs. Parameters are persistent leaf nodes; transient forward nodes
//! are dropped by [`Graph::reset`] between steps.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};
use thiserror::Error;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// How out-of-bounds taps are read by padded convolutions. `Replicate`
/// clamps to the border pixel, which keeps convolutions of constant fields
/// exactly constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    Matmul(usize, usize),
    Reshape(usize),
    Transpose(usize, usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Conv2d { input: usize, weight: usize, stride: usize, pad: usize, groups: usize, pad_mode: PadMode },
    UpsampleBilinear(usize),
    LayerNorm { input: usize, gamma: usize, beta: usize, mean: Vec<f32>, invstd: Vec<f32> },
    Gelu(usize),
    Softmax(usize),
    Sigmoid(usize),
    Abs(usize),
    Clip01(usize),
    SumAll(usize),
    RotatePairs { input: usize, cos: ArrayD<f32>, sin: ArrayD<f32> },
    Patchify { input: usize, p: usize },
    GridFromTokens { input: usize },
    TokensFromGrid(usize),
}

struct Node {
    value: ArrayD<f32>,
    grad: Option<ArrayD<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Arena tape holding parameters and the current forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    persistent: usize,
}

const LN_EPS: f32 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persistent leaf with gradient tracking. Call before [`Graph::freeze`].
    pub fn param(&mut self, value: ArrayD<f32>) -> Tensor {
        assert_eq!(
            self.persistent, 0,
            "params must be registered before the graph is frozen"
        );
        self.push(value, true, Op::Leaf)
    }

    /// Mark all nodes registered so far as persistent across [`Graph::reset`].
    pub fn freeze(&mut self) {
        self.persistent = self.nodes.len();
    }

    /// Transient leaf without gradient tracking.
    pub fn input(&mut self, value: ArrayD<f32>) -> Tensor {
        self.push(value, false, Op::Leaf)
    }

    /// Drop all transient nodes, keeping parameters and their gradients.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<f32> {
        &self.nodes[t.0].value
    }

    /// Overwrite a leaf's value in place (optimizer updates, data reloads).
    pub fn set_value(&mut self, t: Tensor, value: ArrayD<f32>) {
        assert_eq!(
            self.nodes[t.0].value.shape(),
            value.shape(),
            "set_value shape mismatch: {:?} vs {:?}",
            self.nodes[t.0].value.shape(),
            value.shape()
        );
        self.nodes[t.0].value = value;
    }

    pub fn scalar_value(&self, t: Tensor) -> f32 {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.len(), 1, "scalar_value on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<f32>> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: ArrayD<f32>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        // ndarray's dot can hand back column-major arrays; keep the tape
        // uniformly C-contiguous so flat indexing and serialization are safe
        let value = to_standard(value);
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    // -- elementwise and broadcast ------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Mul(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f32) -> Tensor {
        let value = self.value(a).mapv(|x| x + c);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f32) -> Tensor {
        let value = self.value(a).mapv(|x| x * c);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::MulScalar(a.0, c))
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {sa:?} vs {sb:?}"
        );
        let va = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let value = va.dot(&vb).into_dyn();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Matmul(a.0, b.0))
    }

    // -- structure -----------------------------------------------------------

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(
            self.value(a).len(),
            len,
            "reshape of {:?} to incompatible {:?}",
            self.shape(a),
            shape
        );
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Reshape(a.0))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Tensor, ax0: usize, ax1: usize) -> Tensor {
        let nd = self.value(a).ndim();
        assert!(ax0 < nd && ax1 < nd, "transpose axes ({ax0},{ax1}) out of range for {nd}-d");
        let mut view = self.value(a).view();
        view.swap_axes(ax0, ax1);
        let value = view.as_standard_layout().to_owned();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Transpose(a.0, ax0, ax1))
    }

    pub fn concat(&mut self, inputs: &[Tensor], axis: usize) -> Tensor {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let views: Vec<ArrayViewD<f32>> = inputs.iter().map(|t| self.value(*t).view()).collect();
        let value = concatenate(Axis(axis), &views).unwrap_or_else(|_| {
            let shapes: Vec<_> = inputs.iter().map(|t| self.shape(*t).to_vec()).collect();
            panic!("concat shape mismatch along axis {axis}: {shapes:?}")
        });
        let needs = inputs.iter().any(|t| self.needs(t.0));
        let ids = inputs.iter().map(|t| t.0).collect();
        self.push(value, needs, Op::Concat { inputs: ids, axis })
    }

    pub fn slice(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape(a);
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice [{start}..{}] on axis {axis} of {shape:?}",
            start + len
        );
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Slice { input: a.0, axis, start })
    }

    // -- convolution and resampling -------------------------------------------

    /// Grouped 2-D convolution of `[C_in, H, W]` with `[C_out, C_in/groups,
    /// kh, kw]`, padding `pad` on all sides, square stride.
    pub fn conv2d(
        &mut self,
        input: Tensor,
        weight: Tensor,
        stride: usize,
        pad: usize,
        groups: usize,
        pad_mode: PadMode,
    ) -> Tensor {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        assert!(
            si.len() == 3 && sw.len() == 4 && si[0] == sw[1] * groups && sw[0] % groups == 0,
            "conv2d shape mismatch: input {si:?} vs weight {sw:?} with {groups} groups"
        );
        let (h, w) = (si[1], si[2]);
        let (kh, kw) = (sw[2], sw[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let cin_g = sw[1];
        let cout_g = sw[0] / groups;

        let x = self.value(input).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wt = self.value(weight);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[sw[0], oh, ow]));
        for g in 0..groups {
            let col = im2col(&x, g * cin_g, cin_g, kh, kw, stride, pad, oh, ow, pad_mode);
            let wmat = wt
                .slice_axis(Axis(0), Slice::from(g * cout_g..(g + 1) * cout_g))
                .to_owned()
                .into_shape_with_order((cout_g, cin_g * kh * kw))
                .unwrap();
            let res = wmat.dot(&col); // [cout_g, oh*ow]
            for (c, row) in res.outer_iter().enumerate() {
                let mut dst = out.slice_mut(ndarray::s![g * cout_g + c, .., ..]);
                dst.assign(&row.into_shape_with_order((oh, ow)).unwrap());
            }
        }
        let needs = self.needs(input.0) || self.needs(weight.0);
        self.push(
            out,
            needs,
            Op::Conv2d { input: input.0, weight: weight.0, stride, pad, groups, pad_mode },
        )
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]` with half-pixel
    /// centers and clamped borders.
    pub fn upsample_bilinear(&mut self, a: Tensor, out_h: usize, out_w: usize) -> Tensor {
        let s = self.shape(a);
        assert!(s.len() == 3, "upsample_bilinear expects [C,H,W], got {s:?}");
        assert!(out_h > 0 && out_w > 0, "upsample to empty {out_h}x{out_w}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.value(a);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[c, out_h, out_w]));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (y0, y1, fy) = sample_coords(oy, out_h, h);
                let (x0, x1, fx) = sample_coords(ox, out_w, w);
                for ch in 0..c {
                    let v = x[[ch, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                        + x[[ch, y0, x1]] * (1.0 - fy) * fx
                        + x[[ch, y1, x0]] * fy * (1.0 - fx)
                        + x[[ch, y1, x1]] * fy * fx;
                    out[[ch, oy, ox]] = v;
                }
            }
        }
        let needs = self.needs(a.0);
        self.push(out, needs, Op::UpsampleBilinear(a.0))
    }

    // -- normalization and nonlinearities ---------------------------------------

    /// Normalize the last axis to zero mean / unit variance, then scale and
    /// shift with `gamma`/`beta` (both shaped like the last axis).
    pub fn layer_norm(&mut self, a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
        let s = self.shape(a).to_vec();
        let d = *s.last().expect("layer_norm on 0-d tensor");
        assert!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm scale shapes {:?}/{:?} vs feature dim [{d}]",
            self.shape(gamma),
            self.shape(beta)
        );
        let rows = self.value(a).len() / d;
        let x = self.value(a).view().into_shape_with_order((rows, d)).unwrap();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = ndarray::Array2::<f32>::zeros((rows, d));
        let mut means = Vec::with_capacity(rows);
        let mut invstds = Vec::with_capacity(rows);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let invstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[[r, j]] = (row[j] - mean) * invstd * g[j] + b[j];
            }
            means.push(mean);
            invstds.push(invstd);
        }
        let value = out.into_dyn().into_shape_with_order(IxDyn(&s)).unwrap();
        let needs = self.needs(a.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            value,
            needs,
            Op::LayerNorm { input: a.0, gamma: gamma.0, beta: beta.0, mean: means, invstd: invstds },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(gelu_fwd);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Gelu(a.0))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a).to_vec();
        let d = *s.last().expect("softmax on 0-d tensor");
        let rows = self.value(a).len() / d;
        let x = self.value(a).view().into_shape_with_order((rows, d)).unwrap();
        let mut out = ndarray::Array2::<f32>::zeros((rows, d));
        for (r, row) in x.outer_iter().enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[[r, j]] = e;
                sum += e;
            }
            for j in 0..d {
                out[[r, j]] /= sum;
            }
        }
        let value = out.into_dyn().into_shape_with_order(IxDyn(&s)).unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Softmax(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(f32::abs);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Abs(a.0))
    }

    /// Clamp to [0,1]; gradient passes through only where the input lies
    /// strictly inside the interval.
    pub fn clip01(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Clip01(a.0))
    }

    // -- reductions ---------------------------------------------------------

    /// Sum all elements into a 0-d scalar tensor.
    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let needs = self.needs(a.0);
        self.push(value, needs, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len() as f32;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    // -- positional rotation and layout ---------------------------------------

    /// Rotate adjacent lane pairs `(2i, 2i+1)` of the last axis by per-element
    /// angles given as `cos`/`sin` tables shaped `[..., last/2]`.
    pub fn rotate_pairs(&mut self, a: Tensor, cos: ArrayD<f32>, sin: ArrayD<f32>) -> Tensor {
        let s = self.shape(a).to_vec();
        let d = *s.last().expect("rotate_pairs on 0-d tensor");
        assert!(d % 2 == 0, "rotate_pairs needs an even last axis, got {s:?}");
        let mut half = s.clone();
        *half.last_mut().unwrap() = d / 2;
        assert!(
            cos.shape() == half.as_slice() && sin.shape() == half.as_slice(),
            "rotation tables {:?}/{:?} vs expected {half:?}",
            cos.shape(),
            sin.shape()
        );
        let rows = self.value(a).len() / d;
        let x = self.value(a).view().into_shape_with_order((rows, d)).unwrap();
        let cv = cos.view().into_shape_with_order((rows, d / 2)).unwrap();
        let sv = sin.view().into_shape_with_order((rows, d / 2)).unwrap();
        let mut out = ndarray::Array2::<f32>::zeros((rows, d));
        for r in 0..rows {
            for i in 0..d / 2 {
                let (x0, x1) = (x[[r, 2 * i]], x[[r, 2 * i + 1]]);
                let (c, sn) = (cv[[r, i]], sv[[r, i]]);
                out[[r, 2 * i]] = x0 * c - x1 * sn;
                out[[r, 2 * i + 1]] = x0 * sn + x1 * c;
            }
        }
        let value = out.into_dyn().into_shape_with_order(IxDyn(&s)).unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::RotatePairs { input: a.0, cos, sin })
    }

    /// `[C, H, W]` → `[(H/p)(W/p), C·p·p]`: row-major token grid, features
    /// ordered channel-major then row-major within the patch.
    pub fn patchify(&mut self, a: Tensor, p: usize) -> Tensor {
        let s = self.shape(a).to_vec();
        assert!(
            s.len() == 3 && s[1] % p == 0 && s[2] % p == 0,
            "patchify({p}) on incompatible shape {s:?}"
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let x = self.value(a);
        let mut out = ndarray::Array2::<f32>::zeros((gh * gw, c * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[t, ch * p * p + dy * p + dx]] =
                                x[[ch, gy * p + dy, gx * p + dx]];
                        }
                    }
                }
            }
        }
        let needs = self.needs(a.0);
        self.push(out.into_dyn(), needs, Op::Patchify { input: a.0, p })
    }

    /// `[H·W, C]` tokens → `[C, H, W]` grid (row-major token order).
    pub fn grid_from_tokens(&mut self, a: Tensor, h: usize, w: usize) -> Tensor {
        let s = self.shape(a).to_vec();
        assert!(
            s.len() == 2 && s[0] == h * w,
            "grid_from_tokens: {s:?} does not hold {h}x{w} tokens"
        );
        let c = s[1];
        let x = self.value(a);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[c, h, w]));
        for t in 0..h * w {
            for ch in 0..c {
                out[[ch, t / w, t % w]] = x[[t, ch]];
            }
        }
        let needs = self.needs(a.0);
        self.push(out, needs, Op::GridFromTokens { input: a.0 })
    }

    /// `[C, H, W]` grid → `[H·W, C]` tokens (row-major token order).
    pub fn tokens_from_grid(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 3, "tokens_from_grid expects [C,H,W], got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.value(a);
        let mut out = ndarray::Array2::<f32>::zeros((h * w, c));
        for t in 0..h * w {
            for ch in 0..c {
                out[[t, ch]] = x[[ch, t / w, t % w]];
            }
        }
        let needs = self.needs(a.0);
        self.push(out.into_dyn(), needs, Op::TokensFromGrid(a.0))
    }

    // -- backward -------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that tracks them; call [`Graph::zero_grads`] between
    /// optimizer steps.
    pub fn backward(&mut self, loss: Tensor) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward on non-scalar tensor of shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0);
        accumulate(&mut self.nodes[loss.0].grad, seed);

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            // Transient node gradients are consumed exactly once per sweep;
            // parameter (leaf) gradients persist for the optimizer.
            let grad = if id >= self.persistent {
                self.nodes[id].grad.take().unwrap()
            } else {
                self.nodes[id].grad.clone().unwrap()
            };
            self.backward_node(id, grad);
        }
    }

    fn backward_node(&mut self, id: usize, grad: ArrayD<f32>) {
        // (parent, contribution) pairs computed immutably, applied after
        let mut pushes: Vec<(usize, ArrayD<f32>)> = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    pushes.push((a, reduce_to_shape(grad.clone(), self.nodes[a].value.shape())));
                }
                if self.needs(b) {
                    pushes.push((b, reduce_to_shape(grad.clone(), self.nodes[b].value.shape())));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    pushes.push((a, reduce_to_shape(grad.clone(), self.nodes[a].value.shape())));
                }
                if self.needs(b) {
                    pushes.push((b, reduce_to_shape(grad.mapv(|v| -v), self.nodes[b].value.shape())));
                }
            }
            &Op::Mul(a, b) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                if self.needs(a) {
                    let bv = self.nodes[b].value.broadcast(IxDyn(&out_shape)).unwrap();
                    pushes.push((a, reduce_to_shape(&grad * &bv, self.nodes[a].value.shape())));
                }
                if self.needs(b) {
                    let av = self.nodes[a].value.broadcast(IxDyn(&out_shape)).unwrap();
                    pushes.push((b, reduce_to_shape(&grad * &av, self.nodes[b].value.shape())));
                }
            }
            &Op::AddScalar(a) => pushes.push((a, grad)),
            &Op::MulScalar(a, c) => pushes.push((a, grad.mapv(|v| v * c))),
            &Op::Matmul(a, b) => {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let va = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
                let vb = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(a) {
                    pushes.push((a, g.dot(&vb.t()).into_dyn()));
                }
                if self.needs(b) {
                    pushes.push((b, va.t().dot(&g).into_dyn()));
                }
            }
            &Op::Reshape(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                pushes.push((a, grad.into_shape_with_order(IxDyn(&shape)).unwrap()));
            }
            &Op::Transpose(a, ax0, ax1) => {
                let mut view = grad.view();
                view.swap_axes(ax0, ax1);
                pushes.push((a, view.as_standard_layout().to_owned()));
            }
            Op::Concat { inputs, axis } => {
                let (inputs, axis) = (inputs.clone(), *axis);
                let mut offset = 0;
                for pid in inputs {
                    let extent = self.nodes[pid].value.shape()[axis];
                    if self.needs(pid) {
                        let piece = grad
                            .slice_axis(Axis(axis), Slice::from(offset..offset + extent))
                            .to_owned();
                        pushes.push((pid, piece));
                    }
                    offset += extent;
                }
            }
            &Op::Slice { input, axis, start } => {
                let mut full = ArrayD::<f32>::zeros(self.nodes[input].value.raw_dim());
                let len = grad.shape()[axis];
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(&grad);
                pushes.push((input, full));
            }
            &Op::Conv2d { input, weight, stride, pad, groups, pad_mode } => {
                pushes.extend(
                    self.conv2d_backward(input, weight, stride, pad, groups, pad_mode, &grad),
                );
            }
            &Op::UpsampleBilinear(a) => {
                let si = self.nodes[a].value.shape().to_vec();
                let so = grad.shape();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (oh, ow) = (so[1], so[2]);
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&si));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, y1, fy) = sample_coords(oy, oh, h);
                        let (x0, x1, fx) = sample_coords(ox, ow, w);
                        for ch in 0..c {
                            let g = grad[[ch, oy, ox]];
                            dx[[ch, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                            dx[[ch, y0, x1]] += g * (1.0 - fy) * fx;
                            dx[[ch, y1, x0]] += g * fy * (1.0 - fx);
                            dx[[ch, y1, x1]] += g * fy * fx;
                        }
                    }
                }
                pushes.push((a, dx));
            }
            Op::LayerNorm { input, gamma, beta, mean, invstd } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let d = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.len() / d;
                let g2 = grad.view().into_shape_with_order((rows, d)).unwrap();
                let x = self.nodes[input]
                    .value
                    .view()
                    .into_shape_with_order((rows, d))
                    .unwrap();
                let gam = &self.nodes[gamma].value;
                let mut dx = ndarray::Array2::<f32>::zeros((rows, d));
                let mut dgamma = ndarray::Array1::<f32>::zeros(d);
                let mut dbeta = ndarray::Array1::<f32>::zeros(d);
                for r in 0..rows {
                    let (m, is) = (mean[r], invstd[r]);
                    let mut sum_gy = 0.0f32;
                    let mut sum_gy_xhat = 0.0f32;
                    for j in 0..d {
                        let xhat = (x[[r, j]] - m) * is;
                        let gy = g2[[r, j]] * gam[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dgamma[j] += g2[[r, j]] * xhat;
                        dbeta[j] += g2[[r, j]];
                    }
                    for j in 0..d {
                        let xhat = (x[[r, j]] - m) * is;
                        let gy = g2[[r, j]] * gam[j];
                        dx[[r, j]] =
                            is * (gy - (sum_gy + xhat * sum_gy_xhat) / d as f32);
                    }
                }
                if self.needs(input) {
                    let shape = self.nodes[input].value.shape().to_vec();
                    pushes.push((input, dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()));
                }
                if self.needs(gamma) {
                    pushes.push((gamma, dgamma.into_dyn()));
                }
                if self.needs(beta) {
                    pushes.push((beta, dbeta.into_dyn()));
                }
            }
            &Op::Gelu(a) => {
                let dx = self.nodes[a].value.mapv(gelu_bwd);
                pushes.push((a, &grad * &dx));
            }
            &Op::Softmax(a) => {
                let d = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.len() / d;
                let y = self.nodes[id].value.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = grad.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = ndarray::Array2::<f32>::zeros((rows, d));
                for r in 0..rows {
                    let mut dotp = 0.0f32;
                    for j in 0..d {
                        dotp += g2[[r, j]] * y[[r, j]];
                    }
                    for j in 0..d {
                        dx[[r, j]] = y[[r, j]] * (g2[[r, j]] - dotp);
                    }
                }
                let shape = self.nodes[a].value.shape().to_vec();
                pushes.push((a, dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()));
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let dx = y.mapv(|v| v * (1.0 - v));
                pushes.push((a, &grad * &dx));
            }
            &Op::Abs(a) => {
                let sign = self.nodes[a].value.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                pushes.push((a, &grad * &sign));
            }
            &Op::Clip01(a) => {
                let mask = self.nodes[a].value.mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
                pushes.push((a, &grad * &mask));
            }
            &Op::SumAll(a) => {
                let g = *grad.iter().next().unwrap();
                pushes.push((a, ArrayD::from_elem(self.nodes[a].value.raw_dim(), g)));
            }
            Op::RotatePairs { input, cos, sin } => {
                let input = *input;
                let d = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.len() / d;
                let g2 = grad.view().into_shape_with_order((rows, d)).unwrap();
                let cv = cos.view().into_shape_with_order((rows, d / 2)).unwrap();
                let sv = sin.view().into_shape_with_order((rows, d / 2)).unwrap();
                let mut dx = ndarray::Array2::<f32>::zeros((rows, d));
                for r in 0..rows {
                    for i in 0..d / 2 {
                        let (g0, g1) = (g2[[r, 2 * i]], g2[[r, 2 * i + 1]]);
                        let (c, sn) = (cv[[r, i]], sv[[r, i]]);
                        dx[[r, 2 * i]] = g0 * c + g1 * sn;
                        dx[[r, 2 * i + 1]] = -g0 * sn + g1 * c;
                    }
                }
                let shape = self.nodes[input].value.shape().to_vec();
                pushes.push((input, dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()));
            }
            &Op::Patchify { input, p } => {
                let si = self.nodes[input].value.shape().to_vec();
                let (c, _h, w) = (si[0], si[1], si[2]);
                let gw = w / p;
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&si));
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                for t in 0..g2.shape()[0] {
                    let (gy, gx) = (t / gw, t % gw);
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx_ in 0..p {
                                dx[[ch, gy * p + dy, gx * p + dx_]] =
                                    g2[[t, ch * p * p + dy * p + dx_]];
                            }
                        }
                    }
                }
                pushes.push((input, dx));
            }
            &Op::GridFromTokens { input } => {
                let so = self.nodes[id].value.shape().to_vec();
                let (c, h, w) = (so[0], so[1], so[2]);
                let mut dx = ndarray::Array2::<f32>::zeros((h * w, c));
                for t in 0..h * w {
                    for ch in 0..c {
                        dx[[t, ch]] = grad[[ch, t / w, t % w]];
                    }
                }
                pushes.push((input, dx.into_dyn()));
            }
            &Op::TokensFromGrid(a) => {
                let si = self.nodes[a].value.shape().to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&si));
                for t in 0..h * w {
                    for ch in 0..c {
                        dx[[ch, t / w, t % w]] = g2[[t, ch]];
                    }
                }
                pushes.push((a, dx));
            }
        }
        for (pid, contribution) in pushes {
            if self.nodes[pid].needs_grad {
                accumulate(&mut self.nodes[pid].grad, contribution);
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: usize,
        weight: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        pad_mode: PadMode,
        grad: &ArrayD<f32>,
    ) -> Vec<(usize, ArrayD<f32>)> {
        let si = self.nodes[input].value.shape().to_vec();
        let sw = self.nodes[weight].value.shape().to_vec();
        let (kh, kw) = (sw[2], sw[3]);
        let cin_g = sw[1];
        let cout_g = sw[0] / groups;
        let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
        let x = self.nodes[input].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wt = &self.nodes[weight].value;

        let mut dw = ArrayD::<f32>::zeros(IxDyn(&sw));
        let mut dx = ArrayD::<f32>::zeros(IxDyn(&si));
        for g in 0..groups {
            let mut gout = ndarray::Array2::<f32>::zeros((cout_g, oh * ow));
            for c in 0..cout_g {
                let src = grad.slice(ndarray::s![g * cout_g + c, .., ..]);
                gout.row_mut(c).assign(&src.into_shape_with_order(oh * ow).unwrap());
            }
            if self.needs(weight) {
                let col = im2col(&x, g * cin_g, cin_g, kh, kw, stride, pad, oh, ow, pad_mode);
                let dwm = gout.dot(&col.t()); // [cout_g, cin_g*kh*kw]
                for c in 0..cout_g {
                    let dst = dw.slice_mut(ndarray::s![g * cout_g + c, .., .., ..]);
                    let row = dwm.row(c).into_shape_with_order((cin_g, kh, kw)).unwrap();
                    ndarray::Zip::from(dst).and(&row).for_each(|d, &s| *d = s);
                }
            }
            if self.needs(input) {
                let wmat = wt
                    .slice_axis(Axis(0), Slice::from(g * cout_g..(g + 1) * cout_g))
                    .to_owned()
                    .into_shape_with_order((cout_g, cin_g * kh * kw))
                    .unwrap();
                let dcol = wmat.t().dot(&gout); // [cin_g*kh*kw, oh*ow]
                col2im(&dcol, &mut dx, g * cin_g, cin_g, kh, kw, stride, pad, oh, ow, pad_mode);
            }
        }
        let mut out = Vec::new();
        if self.needs(input) {
            out.push((input, dx));
        }
        if self.needs(weight) {
            out.push((weight, dw));
        }
        out
    }
}

/// Scaled dot-product attention for one head: `softmax(QKᵀ/√d_h)V` with
/// Q,K,V shaped `[T, d_h]`. Composite of primitive ops, so its gradient
/// follows from theirs.
pub fn attention(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> Tensor {
    let dh = *g.shape(q).last().expect("attention on 0-d q");
    let kt = g.transpose(k, 0, 1);
    let logits = g.matmul(q, kt);
    let scaled = g.mul_scalar(logits, 1.0 / (dh as f32).sqrt());
    let weights = g.softmax(scaled);
    g.matmul(weights, v)
}

fn accumulate(slot: &mut Option<ArrayD<f32>>, contribution: ArrayD<f32>) {
    match slot {
        Some(g) => *g += &contribution,
        None => *slot = Some(to_standard(contribution)),
    }
}

fn to_standard(a: ArrayD<f32>) -> ArrayD<f32> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn gelu_fwd(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Half-pixel-center source coordinates for bilinear resampling.
fn sample_coords(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, (pos - i0 as f64) as f32)
}

fn broadcast_binary(
    a: &ArrayD<f32>,
    b: &ArrayD<f32>,
    opname: &str,
    f: impl Fn(f32, f32) -> f32,
) -> ArrayD<f32> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|o, &y| *o = f(*o, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("{opname} shape mismatch: {:?} vs {:?}", a.shape(), b.shape())
    });
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = av.to_owned();
    ndarray::Zip::from(&mut out).and(&bv).for_each(|o, &y| *o = f(*o, y));
    out
}

/// Right-aligned broadcast shape, or None if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum a broadcast-shaped gradient back down to the original input shape.
fn reduce_to_shape(mut g: ArrayD<f32>, target: &[usize]) -> ArrayD<f32> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Map a padded tap coordinate to a source index, or None when the tap
/// falls outside and the mode is zero padding.
fn tap_index(o: usize, stride: usize, k: usize, pad: usize, len: usize, mode: PadMode) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ndarray::ArrayView3<f32>,
    ch_start: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mode: PadMode,
) -> ndarray::Array2<f32> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut col = ndarray::Array2::<f32>::zeros((cin_g * kh * kw, oh * ow));
    for c in 0..cin_g {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let Some(iy) = tap_index(oy, stride, ky, pad, h, mode) else { continue };
                    for ox in 0..ow {
                        let Some(ix) = tap_index(ox, stride, kx, pad, w, mode) else { continue };
                        col[[row, oy * ow + ox]] = x[[ch_start + c, iy, ix]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &ndarray::Array2<f32>,
    dx: &mut ArrayD<f32>,
    ch_start: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mode: PadMode,
) {
    let (h, w) = (dx.shape()[1], dx.shape()[2]);
    for c in 0..cin_g {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let Some(iy) = tap_index(oy, stride, ky, pad, h, mode) else { continue };
                    for ox in 0..ow {
                        let Some(ix) = tap_index(ox, stride, kx, pad, w, mode) else { continue };
                        dx[[ch_start + c, iy, ix]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moment accumulators aligned index-for-index with a parameter list.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl AdamWState {
    pub fn new(graph: &Graph, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(graph.value(*p).raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(graph.value(*p).raw_dim())).collect();
        Self { step: 0, m, v }
    }
}

impl AdamW {
    /// One update over all parameters. Missing gradients count as zero;
    /// decoupled weight decay applies regardless.
    pub fn step(
        &self,
        graph: &mut Graph,
        params: &[Tensor],
        state: &mut AdamWState,
        lr: f32,
    ) {
        assert_eq!(params.len(), state.m.len(), "optimizer state/param count mismatch");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let zero;
            let grad = match graph.grad(*p) {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(graph.value(*p).raw_dim());
                    &zero
                }
            };
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let mut value = graph.value(*p).clone();
            ndarray::Zip::from(&mut value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
            graph.set_value(*p, value);
        }
    }
}

/// Global L2 gradient clipping. Returns the pre-clip norm; rescales all
/// gradients by `max_norm/total` only when the total exceeds `max_norm`.
pub fn clip_grad_norm(graph: &mut Graph, params: &[Tensor], max_norm: f32) -> f32 {
    let mut total_sq = 0.0f64;
    for p in params {
        if let Some(g) = graph.grad(*p) {
            total_sq += g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
        }
    }
    let total = total_sq.sqrt() as f32;
    if total > max_norm {
        let scale = max_norm / total;
        for p in params {
            if let Some(g) = graph.nodes[p.0].grad.as_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PXLCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Write a checkpoint: versioned header, free-form metadata string, then
/// little-endian `(name, shape, f32 payload)` records.
pub fn save_checkpoint(
    path: &Path,
    meta: &str,
    records: &[(&str, &ArrayD<f32>)],
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for d in tensor.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Read back a checkpoint: metadata string plus named tensors in file order.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<(String, ArrayD<f32>)>), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *cursor + n > bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
    };

    if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = take_u32(&mut cursor)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = take_u32(&mut cursor)? as usize;
    let meta = String::from_utf8(take(&mut cursor, meta_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let count = take_u32(&mut cursor)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("record name is not UTF-8".into()))?;
        let ndim = take_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut cursor)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut cursor, len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| CheckpointError::Corrupt(format!("record {name}: {e}")))?;
        records.push((name, tensor));
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after records".into()));
    }
    Ok((meta, records))
}
