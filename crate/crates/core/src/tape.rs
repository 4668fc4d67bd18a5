//! Recorded computation graph with reverse-mode gradients.
//!
//! A `Tape` owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and a single reverse sweep computes the gradient of a scalar
//! loss with respect to every leaf. Tapes are single-owner per training step;
//! independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// The fixed primitive catalog. Image primitives use `(B, C, H, W)` layout.
///
/// `BoxMeanValid`, `SliceScalar` and `CrossEntropyMean` extend the plain
/// conv-net catalog: windowed statistics, mixture-weight extraction and the
/// fused stable log-softmax loss are not expressible in the rest of the set.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// inputs `[x, weight, bias]`; stride 1, zero same-padding, odd kernels.
    Conv2d { dilation: usize },
    Add,
    Sub,
    Mul,
    /// Elementwise quotient; denominators must stay away from zero.
    Div,
    Relu,
    Sigmoid,
    /// Elementwise max of two same-shape tensors; ties route the gradient to
    /// the first input.
    Maximum,
    Softmax { axis: usize },
    /// N-ary concatenation along the channel axis of rank-4 inputs.
    ConcatChannels,
    /// `(B,C,H,W) -> (B,C,1,1)`, mean over the spatial extent.
    GlobalAvgPool,
    /// `(B,C,H,W) -> (B,1,H,W)`, max over channels (ties go to the lowest index).
    ChannelMax,
    /// `(B,C,H,W) -> (B,1,H,W)`, min over channels.
    ChannelMin,
    /// `(B,C,H,W) -> (B,1,H,W)`, mean over channels.
    SpatialMean,
    /// Mean over all elements, producing a `[1]` scalar.
    ScalarMean,
    Square,
    Sqrt,
    Clip { lo: f64, hi: f64 },
    /// Elementwise product with broadcasting: equal ranks, each extent equal
    /// or 1 on one side. A `[1]` operand multiplies as a scalar.
    BroadcastMul,
    /// Uniform k×k window mean over valid positions:
    /// `(B,C,H,W) -> (B,C,H-k+1,W-k+1)`.
    BoxMeanValid { k: usize },
    /// Extract one element of a rank-1 vector as a `[1]` scalar.
    SliceScalar { index: usize },
    /// Mean pixelwise cross-entropy of logits `(B,K,H,W)` against integer
    /// labels (row-major over `B,H,W`). Labels are attributes, not inputs.
    CrossEntropyMean { labels: std::sync::Arc<Vec<u32>> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Maximum => "maximum",
            Primitive::Softmax { .. } => "softmax",
            Primitive::ConcatChannels => "channel-concat",
            Primitive::GlobalAvgPool => "global-average-pool",
            Primitive::ChannelMax => "channel-max-reduce",
            Primitive::ChannelMin => "channel-min-reduce",
            Primitive::SpatialMean => "spatial-mean",
            Primitive::ScalarMean => "scalar-mean",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Clip { .. } => "clip",
            Primitive::BroadcastMul => "broadcast-mul",
            Primitive::BoxMeanValid { .. } => "box-mean-valid",
            Primitive::SliceScalar { .. } => "slice-scalar",
            Primitive::CrossEntropyMean { .. } => "cross-entropy-mean",
        }
    }
}

enum Op {
    Leaf { requires_grad: bool },
    Prim(Primitive),
}

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

/// Gradient of the loss with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient at a node; zeros of matching shape when the loss never
    /// reached it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf value. Only leaves with `requires_grad` receive
    /// gradients, but unreached ones still report zeros.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf { requires_grad }, inputs: Vec::new(), value });
        id
    }

    /// Leaf that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Apply one primitive. This is the single entry point every composite
    /// goes through; the output shape follows the primitive's shape rule.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let input_values: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = eval_primitive(&prim, &input_values)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Prim(prim), inputs: inputs.to_vec(), value });
        Ok(id)
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// leaves unreachable from the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Prim(prim) = &node.op {
                let input_values: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = backward_primitive(prim, &input_values, &node.value, &g)?;
                for (input_id, ig) in node.inputs.iter().zip(input_grads) {
                    accumulate(&mut grads[input_id.0], ig);
                }
            }
            grads[idx] = Some(g);
        }

        // Gradients only matter for leaves and the nodes between them and the
        // loss; entries stay as computed, zeros are synthesized on access.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        match self.nodes[id.0].op {
            Op::Leaf { requires_grad } => requires_grad,
            Op::Prim(_) => false,
        }
    }

    // ── Convenience wrappers ─────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Maximum, &[a, b])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, dilation: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv2d { dilation }, &[x, weight, bias])
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatChannels, inputs)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ChannelMax, &[x])
    }

    pub fn channel_min(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ChannelMin, &[x])
    }

    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SpatialMean, &[x])
    }

    pub fn scalar_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ScalarMean, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Primitive::Clip { lo, hi }, &[x])
    }

    pub fn broadcast_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::BroadcastMul, &[a, b])
    }

    pub fn box_mean_valid(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.apply(Primitive::BoxMeanValid { k }, &[x])
    }

    pub fn slice_scalar(&mut self, v: NodeId, index: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceScalar { index }, &[v])
    }

    /// Multiply by a compile-time constant via a `[1]` leaf.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(T::from_f64(factor)));
        self.broadcast_mul(x, c)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            *slot = Some(existing.zip_map(&g, |a, b| a + b).expect("gradient shape drift"));
        }
        None => *slot = Some(g),
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::ShapeMismatch { op: op.into(), detail }
}

fn require_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_arity(op: &str, inputs: &[&Tensor<impl Scalar>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(op, format!("expected {} inputs, got {}", n, inputs.len())));
    }
    Ok(())
}

/// Pure forward evaluation of one primitive. Same inputs give bit-identical
/// outputs.
pub fn eval_primitive<T: Scalar>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match prim {
        Primitive::Conv2d { dilation } => {
            require_arity("conv2d", inputs, 3)?;
            conv2d_forward(inputs[0], inputs[1], inputs[2], *dilation)
        }
        Primitive::Add => {
            require_arity("add", inputs, 2)?;
            inputs[0].zip_map(inputs[1], |a, b| a + b)
        }
        Primitive::Sub => {
            require_arity("sub", inputs, 2)?;
            inputs[0].zip_map(inputs[1], |a, b| a - b)
        }
        Primitive::Mul => {
            require_arity("mul", inputs, 2)?;
            inputs[0].zip_map(inputs[1], |a, b| a * b)
        }
        Primitive::Div => {
            require_arity("div", inputs, 2)?;
            inputs[0].zip_map(inputs[1], |a, b| a / b)
        }
        Primitive::Relu => {
            require_arity("relu", inputs, 1)?;
            Ok(inputs[0].map(|v| v.max(T::zero())))
        }
        Primitive::Sigmoid => {
            require_arity("sigmoid", inputs, 1)?;
            Ok(inputs[0].map(sigmoid_scalar))
        }
        Primitive::Maximum => {
            require_arity("maximum", inputs, 2)?;
            inputs[0].zip_map(inputs[1], |a, b| if b > a { b } else { a })
        }
        Primitive::Softmax { axis } => {
            require_arity("softmax", inputs, 1)?;
            softmax_forward(inputs[0], *axis)
        }
        Primitive::ConcatChannels => concat_forward(inputs),
        Primitive::GlobalAvgPool => {
            require_arity("global-average-pool", inputs, 1)?;
            global_avg_pool_forward(inputs[0])
        }
        Primitive::ChannelMax => {
            require_arity("channel-max-reduce", inputs, 1)?;
            channel_reduce_forward(inputs[0], true)
        }
        Primitive::ChannelMin => {
            require_arity("channel-min-reduce", inputs, 1)?;
            channel_reduce_forward(inputs[0], false)
        }
        Primitive::SpatialMean => {
            require_arity("spatial-mean", inputs, 1)?;
            spatial_mean_forward(inputs[0])
        }
        Primitive::ScalarMean => {
            require_arity("scalar-mean", inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].mean()))
        }
        Primitive::Square => {
            require_arity("square", inputs, 1)?;
            Ok(inputs[0].map(|v| v * v))
        }
        Primitive::Sqrt => {
            require_arity("sqrt", inputs, 1)?;
            Ok(inputs[0].map(|v| v.sqrt()))
        }
        Primitive::Clip { lo, hi } => {
            require_arity("clip", inputs, 1)?;
            let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
            Ok(inputs[0].map(|v| v.max(lo).min(hi)))
        }
        Primitive::BroadcastMul => {
            require_arity("broadcast-mul", inputs, 2)?;
            broadcast_mul_forward(inputs[0], inputs[1])
        }
        Primitive::BoxMeanValid { k } => {
            require_arity("box-mean-valid", inputs, 1)?;
            box_mean_forward(inputs[0], *k)
        }
        Primitive::SliceScalar { index } => {
            require_arity("slice-scalar", inputs, 1)?;
            slice_scalar_forward(inputs[0], *index)
        }
        Primitive::CrossEntropyMean { labels } => {
            require_arity("cross-entropy-mean", inputs, 1)?;
            cross_entropy_forward(inputs[0], labels)
        }
    }
}

/// Vector-Jacobian products of one primitive: gradient for each input.
fn backward_primitive<T: Scalar>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    match prim {
        Primitive::Conv2d { dilation } => conv2d_backward(inputs[0], inputs[1], g, *dilation),
        Primitive::Add => Ok(vec![g.clone(), g.clone()]),
        Primitive::Sub => Ok(vec![g.clone(), g.map(|v| -v)]),
        Primitive::Mul => Ok(vec![
            g.zip_map(inputs[1], |gv, b| gv * b)?,
            g.zip_map(inputs[0], |gv, a| gv * a)?,
        ]),
        Primitive::Div => {
            let da = g.zip_map(inputs[1], |gv, b| gv / b)?;
            let db = Tensor::from_fn(g.shape(), |i| {
                let b = inputs[1].data()[i];
                -g.data()[i] * inputs[0].data()[i] / (b * b)
            });
            Ok(vec![da, db])
        }
        Primitive::Relu => Ok(vec![g.zip_map(inputs[0], |gv, x| {
            if x > T::zero() {
                gv
            } else {
                T::zero()
            }
        })?]),
        Primitive::Sigmoid => Ok(vec![g.zip_map(output, |gv, y| gv * y * (T::one() - y))?]),
        Primitive::Maximum => {
            let mut da = Tensor::zeros(inputs[0].shape());
            let mut db = Tensor::zeros(inputs[1].shape());
            for i in 0..g.numel() {
                if inputs[1].data()[i] > inputs[0].data()[i] {
                    db.data_mut()[i] = g.data()[i];
                } else {
                    da.data_mut()[i] = g.data()[i];
                }
            }
            Ok(vec![da, db])
        }
        Primitive::Softmax { axis } => Ok(vec![softmax_backward(output, g, *axis)]),
        Primitive::ConcatChannels => concat_backward(inputs, g),
        Primitive::GlobalAvgPool => Ok(vec![global_avg_pool_backward(inputs[0], g)]),
        Primitive::ChannelMax => Ok(vec![channel_reduce_backward(inputs[0], g, true)]),
        Primitive::ChannelMin => Ok(vec![channel_reduce_backward(inputs[0], g, false)]),
        Primitive::SpatialMean => Ok(vec![spatial_mean_backward(inputs[0], g)]),
        Primitive::ScalarMean => {
            let n = T::from_f64(inputs[0].numel() as f64);
            let gv = g.data()[0] / n;
            Ok(vec![Tensor::full(inputs[0].shape(), gv)])
        }
        Primitive::Square => {
            let two = T::from_f64(2.0);
            Ok(vec![g.zip_map(inputs[0], |gv, x| two * gv * x)?])
        }
        Primitive::Sqrt => {
            let half = T::from_f64(0.5);
            Ok(vec![g.zip_map(output, |gv, y| half * gv / y)?])
        }
        Primitive::Clip { lo, hi } => {
            let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
            Ok(vec![g.zip_map(inputs[0], |gv, x| {
                if x > lo && x < hi {
                    gv
                } else {
                    T::zero()
                }
            })?])
        }
        Primitive::BroadcastMul => broadcast_mul_backward(inputs[0], inputs[1], g),
        Primitive::BoxMeanValid { k } => Ok(vec![box_mean_backward(inputs[0], g, *k)]),
        Primitive::SliceScalar { index } => {
            let mut d = Tensor::zeros(inputs[0].shape());
            d.data_mut()[*index] = g.data()[0];
            Ok(vec![d])
        }
        Primitive::CrossEntropyMean { labels } => {
            Ok(vec![cross_entropy_backward(inputs[0], labels, g.data()[0])?])
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ── conv2d ───────────────────────────────────────────────────────────────

struct ConvGeom {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    dilation: usize,
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, dilation: usize) -> Result<ConvGeom> {
    let (b, ci, h, w) = x.dims4().map_err(|_| {
        shape_err("conv2d", format!("input must be rank-4, got {:?}", x.shape()))
    })?;
    let &[co, wci, kh, kw] = weight.shape() else {
        return Err(shape_err("conv2d", format!("weight must be rank-4, got {:?}", weight.shape())));
    };
    if wci != ci {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels but weight expects {}", ci, wci),
        ));
    }
    if bias.shape() != [co] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), co),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err("conv2d", format!("same-padding needs odd kernels, got {}x{}", kh, kw)));
    }
    if dilation == 0 {
        return Err(shape_err("conv2d", "dilation must be >= 1".into()));
    }
    Ok(ConvGeom {
        b,
        ci,
        co,
        h,
        w,
        kh,
        kw,
        pad_h: (kh - 1) * dilation / 2,
        pad_w: (kw - 1) * dilation / 2,
        dilation,
    })
}

/// Valid output-row/column range for a kernel tap offset `(dh, dw)` so the
/// matching input index stays inside the image.
#[inline]
fn tap_bounds(extent: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = ((extent as isize - delta).max(0) as usize).min(extent);
    (lo, hi)
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
    let geo = conv_geometry(x, weight, bias, dilation)?;
    let ConvGeom { b, ci, co, h, w, kh, kw, pad_h, pad_w, dilation } = geo;
    let mut out = vec![T::zero(); b * co * h * w];
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();

    for bi in 0..b {
        for coi in 0..co {
            let out_plane = &mut out[(bi * co + coi) * h * w..(bi * co + coi + 1) * h * w];
            let bias_v = bd[coi];
            for v in out_plane.iter_mut() {
                *v = bias_v;
            }
            for cii in 0..ci {
                let x_plane = &xd[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                for khi in 0..kh {
                    let dh = (khi * dilation) as isize - pad_h as isize;
                    let (oh_lo, oh_hi) = tap_bounds(h, dh);
                    for kwi in 0..kw {
                        let dw = (kwi * dilation) as isize - pad_w as isize;
                        let (ow_lo, ow_hi) = tap_bounds(w, dw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = wd[((coi * ci + cii) * kh + khi) * kw + kwi];
                        for oh in oh_lo..oh_hi {
                            let ih = (oh as isize + dh) as usize;
                            let out_row = &mut out_plane[oh * w + ow_lo..oh * w + ow_hi];
                            let in_row = &x_plane[(ih * w) as usize + (ow_lo as isize + dw) as usize
                                ..(ih * w) as usize + (ow_hi as isize + dw) as usize];
                            for (o, &iv) in out_row.iter_mut().zip(in_row) {
                                *o = *o + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, h, w], out)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    dilation: usize,
) -> Result<Vec<Tensor<T>>> {
    let co = weight.shape()[0];
    let bias = Tensor::zeros(&[co]);
    let geo = conv_geometry(x, weight, &bias, dilation)?;
    let ConvGeom { b, ci, co, h, w, kh, kw, pad_h, pad_w, dilation } = geo;
    let xd = x.data();
    let wd = weight.data();
    let gd = g.data();

    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); co];

    for bi in 0..b {
        for coi in 0..co {
            let g_plane = &gd[(bi * co + coi) * h * w..(bi * co + coi + 1) * h * w];
            let mut bias_sum = T::zero();
            for &gv in g_plane {
                bias_sum += gv;
            }
            db[coi] += bias_sum;
            for cii in 0..ci {
                let x_plane = &xd[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                let dx_plane = &mut dx[(bi * ci + cii) * h * w..(bi * ci + cii + 1) * h * w];
                for khi in 0..kh {
                    let dh = (khi * dilation) as isize - pad_h as isize;
                    let (oh_lo, oh_hi) = tap_bounds(h, dh);
                    for kwi in 0..kw {
                        let dw_off = (kwi * dilation) as isize - pad_w as isize;
                        let (ow_lo, ow_hi) = tap_bounds(w, dw_off);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let widx = ((coi * ci + cii) * kh + khi) * kw + kwi;
                        let wv = wd[widx];
                        let mut w_acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = (oh as isize + dh) as usize;
                            let in_lo = ih * w + (ow_lo as isize + dw_off) as usize;
                            let in_hi = ih * w + (ow_hi as isize + dw_off) as usize;
                            let g_row = &g_plane[oh * w + ow_lo..oh * w + ow_hi];
                            let in_row = &x_plane[in_lo..in_hi];
                            let dx_row = &mut dx_plane[in_lo..in_hi];
                            for ((&gv, &iv), dxv) in g_row.iter().zip(in_row).zip(dx_row.iter_mut()) {
                                w_acc += gv * iv;
                                *dxv = *dxv + wv * gv;
                            }
                        }
                        dw[widx] += w_acc;
                    }
                }
            }
        }
    }

    Ok(vec![
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![co], db)?,
    ])
}

// ── reductions & shape ops ───────────────────────────────────────────────

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(shape_err("softmax", format!("axis {} out of range for shape {:?}", axis, x.shape())));
    }
    let lane = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = T::neg_infinity();
            for l in 0..lane {
                m = m.max(xd[base + l * inner]);
            }
            let mut sum = T::zero();
            for l in 0..lane {
                let e = (xd[base + l * inner] - m).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let lane = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut d = vec![T::zero(); y.numel()];
    let yd = y.data();
    let gd = g.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = T::zero();
            for l in 0..lane {
                dot += gd[base + l * inner] * yd[base + l * inner];
            }
            for l in 0..lane {
                let idx = base + l * inner;
                d[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), d).expect("softmax backward shape")
}

fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() < 2 {
        return Err(shape_err("channel-concat", format!("needs >= 2 inputs, got {}", inputs.len())));
    }
    let (b, _, h, w) = inputs[0].dims4()?;
    let mut c_total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(shape_err(
                "channel-concat",
                format!("{:?} incompatible with {:?}", t.shape(), inputs[0].shape()),
            ));
        }
        c_total += tc;
    }
    let mut out = Vec::with_capacity(b * c_total * h * w);
    for bi in 0..b {
        for t in inputs {
            let tc = t.shape()[1];
            let plane = &t.data()[bi * tc * h * w..(bi + 1) * tc * h * w];
            out.extend_from_slice(plane);
        }
    }
    Tensor::new(vec![b, c_total, h, w], out)
}

fn concat_backward<T: Scalar>(inputs: &[&Tensor<T>], g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (b, c_total, h, w) = g.dims4()?;
    let mut grads: Vec<Tensor<T>> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let gd = g.data();
    for bi in 0..b {
        let mut c_off = 0;
        for (t, gt) in inputs.iter().zip(grads.iter_mut()) {
            let tc = t.shape()[1];
            let src = &gd[(bi * c_total + c_off) * h * w..(bi * c_total + c_off + tc) * h * w];
            gt.data_mut()[bi * tc * h * w..(bi + 1) * tc * h * w].copy_from_slice(src);
            c_off += tc;
        }
    }
    Ok(grads)
}

fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let n = T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (i, o) in out.iter_mut().enumerate() {
        let plane = &x.data()[i * h * w..(i + 1) * h * w];
        let mut s = T::zero();
        for &v in plane {
            s += v;
        }
        *o = s / n;
    }
    Tensor::new(vec![b, c, 1, 1], out)
}

fn global_avg_pool_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("gap backward shape");
    let n = T::from_f64((h * w) as f64);
    let mut d = vec![T::zero(); x.numel()];
    for i in 0..b * c {
        let gv = g.data()[i] / n;
        for v in d[i * h * w..(i + 1) * h * w].iter_mut() {
            *v = gv;
        }
    }
    Tensor::new(x.shape().to_vec(), d).expect("gap backward")
}

fn channel_reduce_forward<T: Scalar>(x: &Tensor<T>, is_max: bool) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = vec![T::zero(); b * h * w];
    let xd = x.data();
    for bi in 0..b {
        for p in 0..h * w {
            let mut best = xd[bi * c * h * w + p];
            for ci in 1..c {
                let v = xd[(bi * c + ci) * h * w + p];
                best = if is_max { best.max(v) } else { best.min(v) };
            }
            out[bi * h * w + p] = best;
        }
    }
    Tensor::new(vec![b, 1, h, w], out)
}

fn channel_reduce_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, is_max: bool) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("channel reduce shape");
    let mut d = vec![T::zero(); x.numel()];
    let xd = x.data();
    for bi in 0..b {
        for p in 0..h * w {
            // Ties route to the lowest channel index.
            let mut best_c = 0;
            let mut best = xd[bi * c * h * w + p];
            for ci in 1..c {
                let v = xd[(bi * c + ci) * h * w + p];
                let better = if is_max { v > best } else { v < best };
                if better {
                    best = v;
                    best_c = ci;
                }
            }
            d[(bi * c + best_c) * h * w + p] = g.data()[bi * h * w + p];
        }
    }
    Tensor::new(x.shape().to_vec(), d).expect("channel reduce backward")
}

fn spatial_mean_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let n = T::from_f64(c as f64);
    let mut out = vec![T::zero(); b * h * w];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let dst = &mut out[bi * h * w..(bi + 1) * h * w];
            for (o, &v) in dst.iter_mut().zip(plane) {
                *o += v;
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v / n;
    }
    Tensor::new(vec![b, 1, h, w], out)
}

fn spatial_mean_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("spatial mean shape");
    let n = T::from_f64(c as f64);
    let mut d = vec![T::zero(); x.numel()];
    for bi in 0..b {
        let g_plane = &g.data()[bi * h * w..(bi + 1) * h * w];
        for ci in 0..c {
            let dst = &mut d[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for (o, &gv) in dst.iter_mut().zip(g_plane) {
                *o = gv / n;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), d).expect("spatial mean backward")
}

// ── broadcasting ─────────────────────────────────────────────────────────

fn broadcast_shapes(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    // A [1] operand acts as a plain scalar against any shape.
    if a == [1] {
        return Ok(b.to_vec());
    }
    if b == [1] {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(shape_err(op, format!("extents {:?} vs {:?}", a, b)))
            }
        })
        .collect()
}

fn strides_for(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    // Stride 0 on broadcast axes; a [1] scalar broadcasts over everything.
    if shape == [1] {
        return vec![0; out_shape.len()];
    }
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_mul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x * y);
    }
    let out_shape = broadcast_shapes("broadcast-mul", a.shape(), b.shape())?;
    let sa = strides_for(a.shape(), &out_shape);
    let sb = strides_for(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let mut idx = vec![0usize; out_shape.len()];
    let (ad, bd) = (a.data(), b.data());
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for o in out.iter_mut() {
        *o = ad[off_a] * bd[off_b];
        // Odometer increment over the output multi-index.
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off_a -= sa[axis] * out_shape[axis];
            off_b -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn broadcast_mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if a.shape() == b.shape() {
        return Ok(vec![g.zip_map(b, |gv, y| gv * y)?, g.zip_map(a, |gv, x| gv * x)?]);
    }
    let out_shape = g.shape().to_vec();
    let sa = strides_for(a.shape(), &out_shape);
    let sb = strides_for(b.shape(), &out_shape);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    let mut idx = vec![0usize; out_shape.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for &gv in gd {
        da[off_a] += gv * bd[off_b];
        db[off_b] += gv * ad[off_a];
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off_a -= sa[axis] * out_shape[axis];
            off_b -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Ok(vec![Tensor::new(a.shape().to_vec(), da)?, Tensor::new(b.shape().to_vec(), db)?])
}

// ── windowed mean ────────────────────────────────────────────────────────

fn box_mean_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if k == 0 || k > h || k > w {
        return Err(shape_err(
            "box-mean-valid",
            format!("window {} does not fit image {}x{}", k, h, w),
        ));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let xd = x.data();
    for pc in 0..b * c {
        let plane = &xd[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    let row = &plane[(oy + dy) * w + ox..(oy + dy) * w + ox + k];
                    for &v in row {
                        s += v;
                    }
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

fn box_mean_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("box mean shape");
    let (oh, ow) = (h - k + 1, w - k + 1);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut d = vec![T::zero(); x.numel()];
    let gd = g.data();
    for pc in 0..b * c {
        let src = &gd[pc * oh * ow..(pc + 1) * oh * ow];
        let dst = &mut d[pc * h * w..(pc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = src[oy * ow + ox] * inv;
                for dy in 0..k {
                    let row = &mut dst[(oy + dy) * w + ox..(oy + dy) * w + ox + k];
                    for v in row {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), d).expect("box mean backward")
}

fn slice_scalar_forward<T: Scalar>(v: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    if v.rank() != 1 {
        return Err(shape_err("slice-scalar", format!("expected rank-1 input, got {:?}", v.shape())));
    }
    if index >= v.numel() {
        return Err(shape_err("slice-scalar", format!("index {} out of range {}", index, v.numel())));
    }
    Ok(Tensor::scalar(v.data()[index]))
}

// ── fused cross-entropy ──────────────────────────────────────────────────

fn cross_entropy_forward<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> Result<Tensor<T>> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(shape_err(
            "cross-entropy-mean",
            format!("{} labels for {}x{}x{} pixels", labels.len(), b, h, w),
        ));
    }
    let ld = logits.data();
    let mut total = T::zero();
    for bi in 0..b {
        for p in 0..h * w {
            let label = labels[bi * h * w + p] as usize;
            if label >= k {
                return Err(Error::InvalidLabel { label: label as u32, classes: k });
            }
            let mut m = T::neg_infinity();
            for ci in 0..k {
                m = m.max(ld[(bi * k + ci) * h * w + p]);
            }
            let mut sum = T::zero();
            for ci in 0..k {
                sum += (ld[(bi * k + ci) * h * w + p] - m).exp();
            }
            let lse = m + sum.ln();
            total += lse - ld[(bi * k + label) * h * w + p];
        }
    }
    Ok(Tensor::scalar(total / T::from_f64((b * h * w) as f64)))
}

fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, labels: &[u32], g: T) -> Result<Tensor<T>> {
    let (b, k, h, w) = logits.dims4()?;
    let ld = logits.data();
    let scale = g / T::from_f64((b * h * w) as f64);
    let mut d = vec![T::zero(); logits.numel()];
    for bi in 0..b {
        for p in 0..h * w {
            let label = labels[bi * h * w + p] as usize;
            let mut m = T::neg_infinity();
            for ci in 0..k {
                m = m.max(ld[(bi * k + ci) * h * w + p]);
            }
            let mut sum = T::zero();
            for ci in 0..k {
                sum += (ld[(bi * k + ci) * h * w + p] - m).exp();
            }
            for ci in 0..k {
                let soft = (ld[(bi * k + ci) * h * w + p] - m).exp() / sum;
                let ind = if ci == label { T::one() } else { T::zero() };
                d[(bi * k + ci) * h * w + p] = (soft - ind) * scale;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_conv_preserves_image() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.1), false);
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn ones_conv_on_constant_image_counts_taps() {
        // 3x3 all-ones kernel on a constant image: interior 9c, corners 4c.
        let c = 0.5;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], c), false);
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let out = tape.value(y);
        assert!(close(out.at4(0, 0, 1, 1), 9.0 * c, 1e-12));
        assert!(close(out.at4(0, 0, 2, 2), 9.0 * c, 1e-12));
        assert!(close(out.at4(0, 0, 0, 0), 4.0 * c, 1e-12));
        assert!(close(out.at4(0, 0, 3, 3), 4.0 * c, 1e-12));
        assert!(close(out.at4(0, 0, 0, 1), 6.0 * c, 1e-12));
    }

    #[test]
    fn dilated_conv_preserves_spatial_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f64), false);
        let w = tape.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| (i % 5) as f64 * 0.1));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn channel_max_picks_largest() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 3.0, 2.0]).unwrap(), false);
        let y = tape.channel_max(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], 3.0);
        let z = tape.channel_min(x).unwrap();
        assert_eq!(tape.value(z).data()[0], 1.0);
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64).sin() * 3.0), false);
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| v.data()[r * 4 + c]).sum();
            assert!(close(s, 1.0, 1e-6));
            assert!((0..4).all(|c| v.data()[r * 4 + c] > 0.0));
        }
    }

    #[test]
    fn backward_of_mean_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[5], |i| i as f64), true);
        let loss = tape.scalar_mean(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x);
        for &v in gx.data() {
            assert!(close(v, 0.2, 1e-12));
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = mean(x^2) * n = sum on a 2-vector via mean*2; check d(x^2)/dx = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let sq = tape.square(x).unwrap();
        let mean = tape.scalar_mean(sq).unwrap();
        let loss = tape.scale(mean, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x);
        assert!(close(gx.data()[0], 2.0, 1e-12));
        assert!(close(gx.data()[1], -4.0, 1e-12));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[3], 5.0), true);
        let loss = tape.scalar_mean(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get_opt(unused).is_none());
        let gz = grads.get(unused);
        assert_eq!(gz.shape(), &[3]);
        assert!(gz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zip_map") || msg.contains("add"), "diagnostic was: {msg}");
    }

    #[test]
    fn forward_is_pure_and_bit_identical() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| ((i * 37 % 11) as f32) * 0.13 - 0.5);
        let w = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |i| ((i * 17 % 7) as f32) * 0.21 - 0.4);
        let b = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.01);
        let r1 = eval_primitive(&Primitive::Conv2d { dilation: 1 }, &[&x, &w, &b]).unwrap();
        let r2 = eval_primitive(&Primitive::Conv2d { dilation: 1 }, &[&x, &w, &b]).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn broadcast_mul_mask_pattern() {
        // (B,C,H,W) * (B,1,H,W)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64), true);
        let m = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| (i + 1) as f64), true);
        let y = tape.broadcast_mul(x, m).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 2, 2, 2]);
        // channel 0: [0,1,2,3] * [1,2,3,4]; channel 1: [4,5,6,7] * [1,2,3,4]
        assert_eq!(v.data(), &[0.0, 2.0, 6.0, 12.0, 4.0, 10.0, 18.0, 28.0]);
        let loss = tape.scalar_mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dm sums over channels: (x0 + x1) / 8
        let gm = grads.get(m);
        assert!(close(gm.data()[0], (0.0 + 4.0) / 8.0, 1e-12));
        assert!(close(gm.data()[3], (3.0 + 7.0) / 8.0, 1e-12));
    }

    #[test]
    fn broadcast_mul_scalar_operand() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let y = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn box_mean_valid_shapes_and_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64), false);
        let y = tape.box_mean_valid(x, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert!(close(tape.value(y).data()[0], 4.0, 1e-12));
        assert!(tape.box_mean_valid(x, 4).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4, 2, 2]), true);
        let labels = std::sync::Arc::new(vec![0u32, 1, 2, 3]);
        let loss = tape.apply(Primitive::CrossEntropyMean { labels }, &[logits]).unwrap();
        assert!(close(tape.value(loss).data()[0], (4.0f64).ln(), 1e-9));
    }

    #[test]
    fn cross_entropy_rejects_invalid_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3, 1, 1]), true);
        let labels = std::sync::Arc::new(vec![7u32]);
        assert!(matches!(
            tape.apply(Primitive::CrossEntropyMean { labels }, &[logits]),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = mean(x*2) + mean(x*3) -> d/dx = 5/n
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[4], 1.0), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let ma = tape.scalar_mean(a).unwrap();
        let mb = tape.scalar_mean(b).unwrap();
        let loss = tape.add(ma, mb).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &v in grads.get(x).data() {
            assert!(close(v, 5.0 / 4.0, 1e-12));
        }
    }

    #[test]
    fn clip_and_relu_zero_gradient_outside() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap(), true);
        let y = tape.clip(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0]);
        let loss = tape.scalar_mean(y).unwrap();
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0 / 3.0, 0.0]);
    }
}
