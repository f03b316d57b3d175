//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and whatever it needs for the backward pass. [`Graph::backward`]
//! walks the tape in exact reverse creation order. Nodes whose inputs do not
//! require gradients are never differentiated, which is how frozen networks
//! and detached targets are expressed.
//!
//! Layout is row-major `batch × channel × height × width`. There is no
//! broadcasting apart from the per-channel bias of [`Graph::conv2d`].
//!
//! # Conventions
//!
//! * `conv2d` uses zero padding.
//! * `leaky_relu` has gradient `slope` at exactly `x == 0`.
//! * `bilinear_upsample` follows the half-pixel ("align corners = false")
//!   convention: output index `i` samples source coordinate
//!   `(i + 0.5) * in / out - 0.5`, clamped below at `0`; the two taps are
//!   `floor(src)` and `min(floor(src) + 1, in - 1)` with weights
//!   `1 - frac` and `frac`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardAlreadyRun,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub const MAX_RANK: usize = 4;

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > Self::MAX_RANK {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("rank exceeds {}", Self::MAX_RANK),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                reason: format!("{} elements supplied for {} slots", data.len(), numel),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        assert!(shape.len() <= Self::MAX_RANK, "rank exceeds {}", Self::MAX_RANK);
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Shape as `[b, c, h, w]`, or an error naming the operation.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            other => Err(TensorError::InvalidShape {
                shape: other.to_vec(),
                reason: format!("{op} expects a rank-4 tensor"),
            }),
        }
    }

    /// Copy of batch item `index` as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.dims4("batch_item")?;
        if index >= b {
            return Err(TensorError::InvalidArgument {
                op: "batch_item",
                reason: format!("index {index} out of range for batch {b}"),
            });
        }
        let stride = c * h * w;
        Ok(Tensor {
            shape: vec![1, c, h, w],
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(TensorError::InvalidArgument {
            op: "stack_batch",
            reason: "no tensors supplied".into(),
        })?;
        let [_, c, h, w] = first.dims4("stack_batch")?;
        let mut data = Vec::new();
        let mut batch = 0;
        for item in items {
            let [b, ci, hi, wi] = item.dims4("stack_batch")?;
            if (ci, hi, wi) != (c, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch",
                    left: first.shape.clone(),
                    right: item.shape.clone(),
                });
            }
            batch += b;
            data.extend_from_slice(&item.data);
        }
        Ok(Tensor {
            shape: vec![batch, c, h, w],
            data,
        })
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// One interpolation tap pair along an axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn upsample_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col buffers, one [patch_len, out_len] block per batch item;
        // kept only when the weight needs a gradient.
        cols: Option<Vec<f64>>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    Upsample {
        input: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    LnClamped {
        input: Var,
        floor: f64,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Mul {
        left: Var,
        right: Var,
    },
    Sum {
        input: Var,
    },
    Linear {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. Confined to one thread; values may be copied out freely.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Adds a leaf. Trainable leaves receive a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copies `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Output shapes of every node, in creation order.
    pub fn node_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape.clone()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let x = self.value(input);
        let w = self.value(weight);
        let [batch, c_in, height, width] = x.dims4("conv2d")?;
        let [c_out, w_cin, kh, kw] = w.dims4("conv2d")?;
        if w_cin != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.shape.clone(),
                right: w.shape.clone(),
            });
        }
        if self.value(bias).shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: w.shape.clone(),
                right: self.value(bias).shape.clone(),
            });
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(TensorError::InvalidShape {
                shape: x.shape.clone(),
                reason: format!("padded input smaller than {kh}x{kw} kernel"),
            });
        }
        let geom = ConvGeom {
            batch,
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };
        let keep_cols = self.requires_grad(weight);
        let patch = geom.patch_len();
        let out_len = geom.out_len();
        let mut out = vec![0.0; batch * c_out * out_len];
        let mut cols_all = if keep_cols {
            vec![0.0; batch * patch * out_len]
        } else {
            Vec::new()
        };
        let mut cols_tmp = if keep_cols {
            Vec::new()
        } else {
            vec![0.0; patch * out_len]
        };
        let x = &self.nodes[input.0].value.data;
        let w = &self.nodes[weight.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let in_len = c_in * height * width;
        for n in 0..batch {
            let cols = if keep_cols {
                &mut cols_all[n * patch * out_len..(n + 1) * patch * out_len]
            } else {
                &mut cols_tmp[..]
            };
            im2col(&x[n * in_len..(n + 1) * in_len], &geom, cols);
            let out_n = &mut out[n * c_out * out_len..(n + 1) * c_out * out_len];
            for (co, row) in out_n.chunks_mut(out_len).enumerate() {
                row.fill(b[co]);
            }
            gemm(
                c_out,
                patch,
                out_len,
                w,
                (patch as isize, 1),
                cols,
                (out_len as isize, 1),
                1.0,
                out_n,
            );
        }
        let requires = self.any_requires(&[input, weight, bias]);
        let value = Tensor {
            shape: vec![batch, c_out, geom.out_h, geom.out_w],
            data: out,
        };
        Ok(self.push(
            value,
            requires,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep_cols.then_some(cols_all),
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let data = self
            .value(input)
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.unary(input, data, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let data = self.value(input).data.iter().map(|&v| sigmoid(v)).collect();
        self.unary(input, data, Op::Sigmoid { input })
    }

    /// Per-pixel softmax over the channel axis of a `[B, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [batch, channels, h, w] = x.dims4("softmax_channels")?;
        if channels < 2 {
            return Err(TensorError::InvalidShape {
                shape: x.shape.clone(),
                reason: "softmax_channels needs at least 2 channels".into(),
            });
        }
        let plane = h * w;
        let mut out = vec![0.0; x.data.len()];
        let mut scratch = vec![0.0; channels];
        for n in 0..batch {
            let base = n * channels * plane;
            for p in 0..plane {
                let mut max = f64::NEG_INFINITY;
                for c in 0..channels {
                    max = max.max(x.data[base + c * plane + p]);
                }
                let mut total = 0.0;
                for (c, s) in scratch.iter_mut().enumerate() {
                    *s = (x.data[base + c * plane + p] - max).exp();
                    total += *s;
                }
                for (c, s) in scratch.iter().enumerate() {
                    out[base + c * plane + p] = s / total;
                }
            }
        }
        Ok(self.unary(input, out, Op::SoftmaxChannels { input }))
    }

    /// Bilinear resize of a `[B, C, h, w]` tensor to `[B, C, out_h, out_w]`.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let [batch, channels, h, w] = x.dims4("bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_upsample",
                reason: format!("target {out_h}x{out_w} smaller than input {h}x{w}"),
            });
        }
        let rows = upsample_taps(h, out_h);
        let cols = upsample_taps(w, out_w);
        let mut out = vec![0.0; batch * channels * out_h * out_w];
        for (plane_in, plane_out) in x.data.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for (y, ry) in rows.iter().enumerate() {
                let top = &plane_in[ry.lo * w..(ry.lo + 1) * w];
                let bottom = &plane_in[ry.hi * w..(ry.hi + 1) * w];
                for (xo, cx) in cols.iter().enumerate() {
                    let t = top[cx.lo] * (1.0 - cx.frac) + top[cx.hi] * cx.frac;
                    let b = bottom[cx.lo] * (1.0 - cx.frac) + bottom[cx.hi] * cx.frac;
                    plane_out[y * out_w + xo] = t * (1.0 - ry.frac) + b * ry.frac;
                }
            }
        }
        let value = Tensor {
            shape: vec![batch, channels, out_h, out_w],
            data: out,
        };
        let requires = self.requires_grad(input);
        Ok(self.push(value, requires, Op::Upsample { input, rows, cols }))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, input: Var, floor: f64) -> Var {
        let data = self.value(input).data.iter().map(|&v| v.max(floor).ln()).collect();
        self.unary(input, data, Op::LnClamped { input, floor })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let data = self.value(input).data.iter().map(|&v| scale * v + shift).collect();
        self.unary(input, data, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.affine(input, factor, 0.0)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, left: Var, right: Var) -> Result<Var> {
        let a = self.value(left);
        let b = self.value(right);
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let value = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
        };
        let requires = self.any_requires(&[left, right]);
        Ok(self.push(value, requires, Op::Mul { left, right }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data.iter().sum();
        let requires = self.requires_grad(input);
        self.push(Tensor::scalar(total), requires, Op::Sum { input })
    }

    /// `Σ coefficient · term` over same-shape tensors.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or(TensorError::InvalidArgument {
            op: "linear",
            reason: "no terms supplied".into(),
        })?;
        let shape = self.value(first).shape.clone();
        let mut data = vec![0.0; self.value(first).numel()];
        for &(v, coef) in terms {
            let t = self.value(v);
            if t.shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: shape,
                    right: t.shape.clone(),
                });
            }
            for (d, x) in data.iter_mut().zip(&t.data) {
                *d += coef * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let requires = self.any_requires(&vars);
        Ok(self.push(Tensor { shape, data }, requires, Op::Linear { terms: terms.to_vec() }))
    }

    fn unary(&mut self, input: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.value(input).shape.clone();
        let requires = self.requires_grad(input);
        self.push(Tensor { shape, data }, requires, op)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Reverse-mode sweep from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 || !loss_node.value.shape.is_empty() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape.clone()));
        }
        self.backward_done = true;
        if loss_node.requires_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for index in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(index);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backprop_node(node, grad, before);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() && matches!(node.op, Op::Leaf) {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(node: &mut Node, contrib: Vec<f64>) {
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => node.grad = Some(contrib),
    }
}

/// Accumulates `f(i)` into the gradient of `node`, allocating on first touch.
fn accumulate_with(node: &mut Node, f: impl Fn(usize) -> f64) {
    let n = node.value.numel();
    match &mut node.grad {
        Some(g) => g.iter_mut().enumerate().for_each(|(i, a)| *a += f(i)),
        None => node.grad = Some((0..n).map(f).collect()),
    }
}

fn backprop_node(node: &Node, grad: &[f64], before: &mut [Node]) {
    let out = &node.value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => backprop_conv(*input, *weight, *bias, geom, cols.as_deref(), grad, before),
        Op::LeakyRelu { input, slope } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                let x = target.value.data.clone();
                accumulate_with(target, |i| if x[i] > 0.0 { grad[i] } else { slope * grad[i] });
            }
        }
        Op::Sigmoid { input } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                accumulate_with(target, |i| grad[i] * out[i] * (1.0 - out[i]));
            }
        }
        Op::SoftmaxChannels { input } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                let [batch, channels, h, w] = [
                    node.value.shape[0],
                    node.value.shape[1],
                    node.value.shape[2],
                    node.value.shape[3],
                ];
                let plane = h * w;
                let mut contrib = vec![0.0; out.len()];
                for n in 0..batch {
                    let base = n * channels * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..channels)
                            .map(|c| grad[base + c * plane + p] * out[base + c * plane + p])
                            .sum();
                        for c in 0..channels {
                            let i = base + c * plane + p;
                            contrib[i] = out[i] * (grad[i] - dot);
                        }
                    }
                }
                accumulate(target, contrib);
            }
        }
        Op::Upsample { input, rows, cols } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                let [_, _, h, w] = [
                    target.value.shape[0],
                    target.value.shape[1],
                    target.value.shape[2],
                    target.value.shape[3],
                ];
                let (out_h, out_w) = (rows.len(), cols.len());
                let mut contrib = vec![0.0; target.value.numel()];
                for (plane_in, plane_g) in contrib.chunks_mut(h * w).zip(grad.chunks(out_h * out_w)) {
                    for (y, ry) in rows.iter().enumerate() {
                        for (xo, cx) in cols.iter().enumerate() {
                            let g = plane_g[y * out_w + xo];
                            let gt = g * (1.0 - ry.frac);
                            let gb = g * ry.frac;
                            plane_in[ry.lo * w + cx.lo] += gt * (1.0 - cx.frac);
                            plane_in[ry.lo * w + cx.hi] += gt * cx.frac;
                            plane_in[ry.hi * w + cx.lo] += gb * (1.0 - cx.frac);
                            plane_in[ry.hi * w + cx.hi] += gb * cx.frac;
                        }
                    }
                }
                accumulate(target, contrib);
            }
        }
        Op::LnClamped { input, floor } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                let x = target.value.data.clone();
                accumulate_with(target, |i| if x[i] > *floor { grad[i] / x[i] } else { 0.0 });
            }
        }
        Op::Affine { input, scale, .. } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                accumulate_with(target, |i| scale * grad[i]);
            }
        }
        Op::Mul { left, right } => {
            let a = before[left.0].value.data.clone();
            let b = before[right.0].value.data.clone();
            if before[left.0].requires_grad {
                accumulate_with(&mut before[left.0], |i| grad[i] * b[i]);
            }
            if before[right.0].requires_grad {
                accumulate_with(&mut before[right.0], |i| grad[i] * a[i]);
            }
        }
        Op::Sum { input } => {
            let target = &mut before[input.0];
            if target.requires_grad {
                let g = grad[0];
                accumulate_with(target, |_| g);
            }
        }
        Op::Linear { terms } => {
            for &(v, coef) in terms {
                let target = &mut before[v.0];
                if target.requires_grad {
                    accumulate_with(target, |i| coef * grad[i]);
                }
            }
        }
    }
}

fn backprop_conv(
    input: Var,
    weight: Var,
    bias: Var,
    geom: &ConvGeom,
    cols: Option<&[f64]>,
    grad: &[f64],
    before: &mut [Node],
) {
    let patch = geom.patch_len();
    let out_len = geom.out_len();
    let per_out = geom.c_out * out_len;

    if before[bias.0].requires_grad {
        let mut db = vec![0.0; geom.c_out];
        for g_n in grad.chunks(per_out) {
            for (co, row) in g_n.chunks(out_len).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        accumulate(&mut before[bias.0], db);
    }

    if before[weight.0].requires_grad {
        let cols = cols.expect("conv2d kept no im2col buffer for a trainable weight");
        let mut dw = vec![0.0; geom.c_out * patch];
        for n in 0..geom.batch {
            let g_n = &grad[n * per_out..(n + 1) * per_out];
            let cols_n = &cols[n * patch * out_len..(n + 1) * patch * out_len];
            // dW[co, k] += Σ_l g[co, l] · cols[k, l]
            gemm(
                geom.c_out,
                out_len,
                patch,
                g_n,
                (out_len as isize, 1),
                cols_n,
                (1, out_len as isize),
                1.0,
                &mut dw,
            );
        }
        accumulate(&mut before[weight.0], dw);
    }

    if before[input.0].requires_grad {
        let w = before[weight.0].value.data.clone();
        let in_len = geom.c_in * geom.height * geom.width;
        let mut dx = vec![0.0; geom.batch * in_len];
        let mut dcols = vec![0.0; patch * out_len];
        for n in 0..geom.batch {
            let g_n = &grad[n * per_out..(n + 1) * per_out];
            // dcols[k, l] = Σ_co W[co, k] · g[co, l]
            gemm(
                patch,
                geom.c_out,
                out_len,
                &w,
                (1, patch as isize),
                g_n,
                (out_len as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, geom, &mut dx[n * in_len..(n + 1) * in_len]);
        }
        accumulate(&mut before[input.0], dx);
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let out_len = g.out_len();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let out_len = g.out_len();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `C ← A·B + beta·C` for row-major `C` (`m × n`); `A` and `B` are addressed
/// through explicit (row, column) strides so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    assert!(m * n <= c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by dgemm lies within the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
