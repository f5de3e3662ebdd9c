//! Tape-style dynamic autodiff graph.
//!
//! Nodes are appended in creation order, so the tape itself is a topological
//! order; the backward pass is a single reverse scan that visits every node
//! reachable from the loss exactly once. A graph and its attached tensors are
//! confined to one thread; independent graphs may run in parallel.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{GraphRef, Result, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Hadamard,
    /// inputs: [scalar (numel 1), tensor]; broadcasts the scalar.
    MulScalar,
    /// inputs: [mask 1xHxW, volume CxHxW]; broadcasts the mask over channels.
    MulMask,
    Scale(f64),
    Relu,
    Sigmoid,
    Log,
    Exp,
    Abs,
    /// inputs: [a (m x k), b (k x n)].
    Matmul,
    Transpose,
    Conv2d { pad: usize },
    AvgPool2,
    Sum,
    Mean,
    ConcatChannels,
    SliceChannels { start: usize, count: usize },
    SoftmaxTemp { axis: usize, tau: f64 },
    LogSoftmaxTemp { axis: usize, tau: f64 },
    Reshape,
    /// inputs: [x (C x H x W), bias (C)].
    AddBiasChw,
    /// inputs: [x (R x M), bias (M)].
    AddBiasRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Hadamard => "hadamard",
            Op::MulScalar => "mul_scalar",
            Op::MulMask => "mul_mask",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 => "avg_pool2",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::SoftmaxTemp { .. } => "softmax_temp",
            Op::LogSoftmaxTemp { .. } => "log_softmax_temp",
            Op::Reshape => "reshape",
            Op::AddBiasChw => "add_bias_chw",
            Op::AddBiasRows => "add_bias_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

static GRAPH_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Dynamic computation graph, rebuilt per forward pass.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Attach a tensor to this graph as a leaf. Attaching an already-attached
    /// tensor of this graph is a no-op; tensors of other graphs are rejected.
    pub fn input(&self, t: &Tensor) -> Result<Tensor> {
        match t.node {
            Some(r) if r.graph == self.id => Ok(t.clone()),
            Some(_) => Err(TensorError::ForeignGraph),
            None => {
                let id = self.push_raw(Op::Leaf, vec![], t.shape().to_vec(), t.data_arc());
                Ok(Tensor::from_parts(
                    t.shape().to_vec(),
                    t.data_arc(),
                    Some(GraphRef { graph: self.id, node: id }),
                ))
            }
        }
    }

    fn resolve(&self, t: &Tensor) -> Result<NodeId> {
        match t.node {
            Some(r) if r.graph == self.id => Ok(r.node),
            Some(_) => Err(TensorError::ForeignGraph),
            None => Ok(self.push_raw(Op::Leaf, vec![], t.shape().to_vec(), t.data_arc())),
        }
    }

    fn push_raw(&self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Arc<Vec<f64>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs, shape, value });
        id
    }

    fn push(&self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> Result<Tensor> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let value = Arc::new(value);
        let id = self.push_raw(op, inputs, shape.clone(), Arc::clone(&value));
        Ok(Tensor::from_parts(shape, value, Some(GraphRef { graph: self.id, node: id })))
    }



    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, Op::Hadamard, |x, y| x * y)
    }

    fn binary_elementwise(
        &self,
        a: &Tensor,
        b: &Tensor,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::InvalidShape {
                op: op.name(),
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, vec![ia, ib], a.shape().to_vec(), out)
    }

    /// Broadcast-multiply a one-element tensor onto `t`.
    pub fn mul_scalar(&self, scalar: &Tensor, t: &Tensor) -> Result<Tensor> {
        if scalar.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", scalar.shape()),
            });
        }
        let is = self.resolve(scalar)?;
        let it = self.resolve(t)?;
        let s = scalar.data()[0];
        let out: Vec<f64> = t.data().iter().map(|&x| s * x).collect();
        self.push(Op::MulScalar, vec![is, it], t.shape().to_vec(), out)
    }

    /// Broadcast-multiply a 1xHxW mask over every channel of a CxHxW volume.
    pub fn mul_mask(&self, mask: &Tensor, volume: &Tensor) -> Result<Tensor> {
        let ms = mask.shape();
        let vs = volume.shape();
        if ms.len() != 3 || vs.len() != 3 || ms[0] != 1 || ms[1] != vs[1] || ms[2] != vs[2] {
            return Err(TensorError::InvalidShape {
                op: "mul_mask",
                detail: format!("mask {:?} vs volume {:?}", ms, vs),
            });
        }
        let im = self.resolve(mask)?;
        let iv = self.resolve(volume)?;
        let (c, hw) = (vs[0], vs[1] * vs[2]);
        let mut out = vec![0.0; volume.numel()];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = mask.data()[p] * volume.data()[ch * hw + p];
            }
        }
        self.push(Op::MulMask, vec![im, iv], vs.to_vec(), out)
    }

    pub fn scale(&self, t: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "scale",
                detail: format!("factor {factor}"),
            });
        }
        let it = self.resolve(t)?;
        let out: Vec<f64> = t.data().iter().map(|&x| factor * x).collect();
        self.push(Op::Scale(factor), vec![it], t.shape().to_vec(), out)
    }

    pub fn relu(&self, t: &Tensor) -> Result<Tensor> {
        self.unary(t, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self, t: &Tensor) -> Result<Tensor> {
        self.unary(t, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn log(&self, t: &Tensor) -> Result<Tensor> {
        self.unary(t, Op::Log, f64::ln)
    }

    pub fn exp(&self, t: &Tensor) -> Result<Tensor> {
        self.unary(t, Op::Exp, f64::exp)
    }

    pub fn abs(&self, t: &Tensor) -> Result<Tensor> {
        self.unary(t, Op::Abs, f64::abs)
    }

    fn unary(&self, t: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let it = self.resolve(t)?;
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        self.push(op, vec![it], t.shape().to_vec(), out)
    }

    /// Forward value passes through unchanged; the backward pass deposits
    /// exactly zero gradient through this edge.
    pub fn stop_gradient(&self, t: &Tensor) -> Result<Tensor> {
        let it = self.resolve(t)?;
        let out = t.data().to_vec();
        self.push(Op::StopGrad, vec![it], t.shape().to_vec(), out)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        self.push(Op::Matmul, vec![ia, ib], vec![m, n], out)
    }

    pub fn transpose(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                detail: format!("{:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let it = self.resolve(t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push(Op::Transpose, vec![it], vec![c, r], out)
    }

    /// 2D convolution, stride 1, zero padding `pad`.
    ///
    /// `input` is C_in x H x W, `kernel` is C_out x C_in x KH x KW. This is
    /// the only convolution the toy backbones need; strides other than 1 are
    /// deliberately unsupported (downsampling goes through [`Graph::avg_pool2`]).
    pub fn conv2d(&self, input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
        let si = input.shape();
        let sk = kernel.shape();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", si, sk),
            });
        }
        let (h, w) = (si[1], si[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"),
            });
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let ii = self.resolve(input)?;
        let ik = self.resolve(kernel)?;
        let out = conv2d_forward(input.data(), kernel.data(), si[0], h, w, cout, kh, kw, pad, oh, ow);
        self.push(Op::Conv2d { pad }, vec![ii, ik], vec![cout, oh, ow], out)
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                detail: format!("{:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let it = self.resolve(t)?;
        let mut out = vec![0.0; c * oh * ow];
        let d = t.data();
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[ch * oh * ow + y * ow + x] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        self.push(Op::AvgPool2, vec![it], vec![c, oh, ow], out)
    }

    // ── reductions and reshaping ─────────────────────────────────────

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, t: &Tensor) -> Result<Tensor> {
        let it = self.resolve(t)?;
        let s: f64 = t.data().iter().sum();
        self.push(Op::Sum, vec![it], vec![1], vec![s])
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self, t: &Tensor) -> Result<Tensor> {
        if t.numel() == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                detail: "empty tensor".to_string(),
            });
        }
        let it = self.resolve(t)?;
        let s: f64 = t.data().iter().sum();
        self.push(Op::Mean, vec![it], vec![1], vec![s / t.numel() as f64])
    }

    /// Concatenate two CxHxW volumes along the channel axis. The first output
    /// block is bit-identical to `a`.
    pub fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
            return Err(TensorError::InvalidShape {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
        self.push(Op::ConcatChannels, vec![ia, ib], vec![sa[0] + sb[0], sa[1], sa[2]], out)
    }

    /// Channel slice [start, start+count) of a CxHxW volume.
    pub fn slice_channels(&self, t: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 || count == 0 || start + count > s[0] {
            return Err(TensorError::InvalidShape {
                op: "slice_channels",
                detail: format!("slice [{start}, {}) of {:?}", start + count, s),
            });
        }
        let hw = s[1] * s[2];
        let it = self.resolve(t)?;
        let out = t.data()[start * hw..(start + count) * hw].to_vec();
        self.push(
            Op::SliceChannels { start, count },
            vec![it],
            vec![count, s[1], s[2]],
            out,
        )
    }

    /// Temperature softmax along `axis`, computed with max subtraction.
    /// Each slice along the axis sums to 1.
    pub fn softmax_temp(&self, t: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "softmax_temp",
                detail: format!("tau {tau} must be positive"),
            });
        }
        let s = t.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_temp",
                detail: format!("axis {axis} of {:?}", s),
            });
        }
        let it = self.resolve(t)?;
        let mut out = vec![0.0; t.numel()];
        for_each_lane(s, axis, |base, stride, len| {
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(t.data()[base + k * stride]);
            }
            let mut denom = 0.0;
            for k in 0..len {
                let e = ((t.data()[base + k * stride] - m) / tau).exp();
                out[base + k * stride] = e;
                denom += e;
            }
            for k in 0..len {
                out[base + k * stride] /= denom;
            }
        });
        self.push(Op::SoftmaxTemp { axis, tau }, vec![it], s.to_vec(), out)
    }

    /// Log of the temperature softmax, computed in one stable step:
    /// (x - max)/tau - ln(sum exp((x - max)/tau)). Unlike composing
    /// [`Graph::log`] with [`Graph::softmax_temp`], this cannot underflow to
    /// log(0) for entries far below the lane maximum.
    pub fn log_softmax_temp(&self, t: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "log_softmax_temp",
                detail: format!("tau {tau} must be positive"),
            });
        }
        let s = t.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "log_softmax_temp",
                detail: format!("axis {axis} of {:?}", s),
            });
        }
        let it = self.resolve(t)?;
        let mut out = vec![0.0; t.numel()];
        for_each_lane(s, axis, |base, stride, len| {
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(t.data()[base + k * stride]);
            }
            let mut denom = 0.0;
            for k in 0..len {
                denom += ((t.data()[base + k * stride] - m) / tau).exp();
            }
            let log_denom = denom.ln();
            for k in 0..len {
                out[base + k * stride] = (t.data()[base + k * stride] - m) / tau - log_denom;
            }
        });
        self.push(Op::LogSoftmaxTemp { axis, tau }, vec![it], s.to_vec(), out)
    }

    pub fn reshape(&self, t: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let it = self.resolve(t)?;
        self.push(Op::Reshape, vec![it], shape, t.data().to_vec())
    }

    /// Add a per-channel bias to a CxHxW volume.
    pub fn add_bias_chw(&self, t: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 || bias.shape() != [s[0]] {
            return Err(TensorError::InvalidShape {
                op: "add_bias_chw",
                detail: format!("volume {:?}, bias {:?}", s, bias.shape()),
            });
        }
        let it = self.resolve(t)?;
        let ib = self.resolve(bias)?;
        let hw = s[1] * s[2];
        let mut out = t.data().to_vec();
        for c in 0..s[0] {
            let bv = bias.data()[c];
            for p in 0..hw {
                out[c * hw + p] += bv;
            }
        }
        self.push(Op::AddBiasChw, vec![it, ib], s.to_vec(), out)
    }

    /// Add a per-column bias to every row of an RxM matrix.
    pub fn add_bias_rows(&self, t: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(TensorError::InvalidShape {
                op: "add_bias_rows",
                detail: format!("matrix {:?}, bias {:?}", s, bias.shape()),
            });
        }
        let it = self.resolve(t)?;
        let ib = self.resolve(bias)?;
        let mut out = t.data().to_vec();
        for r in 0..s[0] {
            for c in 0..s[1] {
                out[r * s[1] + c] += bias.data()[c];
            }
        }
        self.push(Op::AddBiasRows, vec![it, ib], s.to_vec(), out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are populated for every
    /// leaf reachable from the loss; unreachable leaves read back as zero.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = match loss.node {
            Some(r) if r.graph == self.id => r.node,
            Some(_) => return Err(TensorError::ForeignGraph),
            None => return Err(TensorError::InvalidParameter {
                op: "backward",
                detail: "loss is not attached to the graph".to_string(),
            }),
        };
        if loss.numel() != 1 {
            return Err(TensorError::InvalidParameter {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            self.accumulate_inputs(node, &g, &nodes, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        drop(nodes);
        Ok(Gradients { graph: self.id, grads, shapes })
    }

    fn accumulate_inputs(
        &self,
        node: &Node,
        g: &[f64],
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let mut add_to = |id: NodeId, delta: &dyn Fn(&mut Vec<f64>)| {
            let entry = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
            delta(entry);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add => {
                add_to(node.inputs[0], &|acc| axpy(acc, g, 1.0));
                add_to(node.inputs[1], &|acc| axpy(acc, g, 1.0));
            }
            Op::Sub => {
                add_to(node.inputs[0], &|acc| axpy(acc, g, 1.0));
                add_to(node.inputs[1], &|acc| axpy(acc, g, -1.0));
            }
            Op::Hadamard => {
                let a = &nodes[node.inputs[0]].value;
                let b = &nodes[node.inputs[1]].value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * b[i];
                    }
                });
                add_to(node.inputs[1], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * a[i];
                    }
                });
            }
            Op::MulScalar => {
                let s = nodes[node.inputs[0]].value[0];
                let t = &nodes[node.inputs[1]].value;
                add_to(node.inputs[0], &|acc| {
                    acc[0] += g.iter().zip(t.iter()).map(|(&gi, &ti)| gi * ti).sum::<f64>();
                });
                add_to(node.inputs[1], &|acc| axpy(acc, g, s));
            }
            Op::MulMask => {
                let mask = &nodes[node.inputs[0]].value;
                let vol = &nodes[node.inputs[1]].value;
                let vs = &nodes[node.inputs[1]].shape;
                let (c, hw) = (vs[0], vs[1] * vs[2]);
                add_to(node.inputs[0], &|acc| {
                    for ch in 0..c {
                        for p in 0..hw {
                            acc[p] += g[ch * hw + p] * vol[ch * hw + p];
                        }
                    }
                });
                add_to(node.inputs[1], &|acc| {
                    for ch in 0..c {
                        for p in 0..hw {
                            acc[ch * hw + p] += g[ch * hw + p] * mask[p];
                        }
                    }
                });
            }
            Op::Scale(f) => {
                let f = *f;
                add_to(node.inputs[0], &|acc| axpy(acc, g, f));
            }
            Op::Relu => {
                let x = &nodes[node.inputs[0]].value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        if x[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                let y = &node.value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Log => {
                let x = &nodes[node.inputs[0]].value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp => {
                let y = &node.value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * y[i];
                    }
                });
            }
            Op::Abs => {
                let x = &nodes[node.inputs[0]].value;
                add_to(node.inputs[0], &|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * x[i].signum() * (x[i] != 0.0) as i32 as f64;
                    }
                });
            }
            Op::Matmul => {
                let a = &nodes[node.inputs[0]].value;
                let b = &nodes[node.inputs[1]].value;
                let m = nodes[node.inputs[0]].shape[0];
                let k = nodes[node.inputs[0]].shape[1];
                let n = nodes[node.inputs[1]].shape[1];
                // dA = g . B^T ; dB = A^T . g
                add_to(node.inputs[0], &|acc| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                acc[i * k + p] += gij * b[p * n + j];
                            }
                        }
                    }
                });
                add_to(node.inputs[1], &|acc| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            for j in 0..n {
                                acc[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose => {
                let (c, r) = (node.shape[0], node.shape[1]);
                add_to(node.inputs[0], &|acc| {
                    for i in 0..c {
                        for j in 0..r {
                            acc[j * c + i] += g[i * r + j];
                        }
                    }
                });
            }
            Op::Conv2d { pad } => {
                let input = &nodes[node.inputs[0]].value;
                let kernel = &nodes[node.inputs[1]].value;
                let si = &nodes[node.inputs[0]].shape;
                let sk = &nodes[node.inputs[1]].shape;
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let pad = *pad as isize;
                add_to(node.inputs[0], &|acc| {
                    conv2d_backward_input(acc, g, kernel, cin, h, w, cout, kh, kw, pad, oh, ow);
                });
                add_to(node.inputs[1], &|acc| {
                    conv2d_backward_kernel(acc, g, input, cin, h, w, cout, kh, kw, pad, oh, ow);
                });
            }
            Op::AvgPool2 => {
                let s = &nodes[node.inputs[0]].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                add_to(node.inputs[0], &|acc| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gq = 0.25 * g[ch * oh * ow + y * ow + x];
                                let base = ch * h * w + 2 * y * w + 2 * x;
                                acc[base] += gq;
                                acc[base + 1] += gq;
                                acc[base + w] += gq;
                                acc[base + w + 1] += gq;
                            }
                        }
                    }
                });
            }
            Op::Sum => {
                let g0 = g[0];
                add_to(node.inputs[0], &|acc| {
                    for v in acc.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::Mean => {
                let n = nodes[node.inputs[0]].value.len() as f64;
                let g0 = g[0] / n;
                add_to(node.inputs[0], &|acc| {
                    for v in acc.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::ConcatChannels => {
                let na = nodes[node.inputs[0]].value.len();
                add_to(node.inputs[0], &|acc| axpy(acc, &g[..na], 1.0));
                add_to(node.inputs[1], &|acc| axpy(acc, &g[na..], 1.0));
            }
            Op::SliceChannels { start, count } => {
                let s = &nodes[node.inputs[0]].shape;
                let hw = s[1] * s[2];
                let (start, count) = (*start, *count);
                add_to(node.inputs[0], &|acc| {
                    for i in 0..count * hw {
                        acc[start * hw + i] += g[i];
                    }
                });
            }
            Op::SoftmaxTemp { axis, tau } => {
                let y = &node.value;
                let shape = node.shape.clone();
                let (axis, tau) = (*axis, *tau);
                add_to(node.inputs[0], &|acc| {
                    for_each_lane(&shape, axis, |base, stride, len| {
                        let mut dot = 0.0;
                        for k in 0..len {
                            let idx = base + k * stride;
                            dot += g[idx] * y[idx];
                        }
                        for k in 0..len {
                            let idx = base + k * stride;
                            acc[idx] += y[idx] * (g[idx] - dot) / tau;
                        }
                    });
                });
            }
            Op::LogSoftmaxTemp { axis, tau } => {
                // d/dx_j = (g_j - softmax_j * sum_k g_k) / tau, with the
                // softmax recovered from the saved log values.
                let y = &node.value;
                let shape = node.shape.clone();
                let (axis, tau) = (*axis, *tau);
                add_to(node.inputs[0], &|acc| {
                    for_each_lane(&shape, axis, |base, stride, len| {
                        let mut gsum = 0.0;
                        for k in 0..len {
                            gsum += g[base + k * stride];
                        }
                        for k in 0..len {
                            let idx = base + k * stride;
                            acc[idx] += (g[idx] - y[idx].exp() * gsum) / tau;
                        }
                    });
                });
            }
            Op::Reshape => {
                add_to(node.inputs[0], &|acc| axpy(acc, g, 1.0));
            }
            Op::AddBiasChw => {
                let s = &nodes[node.inputs[0]].shape;
                let (c, hw) = (s[0], s[1] * s[2]);
                add_to(node.inputs[0], &|acc| axpy(acc, g, 1.0));
                add_to(node.inputs[1], &|acc| {
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for p in 0..hw {
                            sum += g[ch * hw + p];
                        }
                        acc[ch] += sum;
                    }
                });
            }
            Op::AddBiasRows => {
                let s = &nodes[node.inputs[0]].shape;
                let (r, m) = (s[0], s[1]);
                add_to(node.inputs[0], &|acc| axpy(acc, g, 1.0));
                add_to(node.inputs[1], &|acc| {
                    for row in 0..r {
                        for col in 0..m {
                            acc[col] += g[row * m + col];
                        }
                    }
                });
            }
        }
    }

    /// JSON topology of the graph for debugging: op kind, inputs, shape per node.
    pub fn dump_topology(&self) -> String {
        let nodes = self.nodes.borrow();
        let entries: Vec<serde_json::Value> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                serde_json::json!({
                    "id": i,
                    "op": n.op.name(),
                    "inputs": n.inputs,
                    "shape": n.shape,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "nodes": entries })).unwrap()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to an attached tensor. Leaves never reached by
    /// the backward sweep read back as exact zeros.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let r = match t.node {
            Some(r) if r.graph == self.graph => r,
            _ => return Err(TensorError::ForeignGraph),
        };
        let shape = self.shapes[r.node].clone();
        match &self.grads[r.node] {
            Some(g) => Ok(Tensor::from_parts(shape, Arc::new(g.clone()), None)),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}

fn axpy(acc: &mut [f64], g: &[f64], a: f64) {
    for i in 0..acc.len() {
        acc[i] += a * g[i];
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * oh * ow];
    let pad = pad as isize;
    for oc in 0..cout {
        for ic in 0..cin {
            let kbase = (oc * cin + ic) * kh * kw;
            let ibase = ic * h * w;
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = ibase + iy as usize * w;
                    let orow = oc * oh * ow + oy * ow;
                    for kx in 0..kw {
                        let kv = kernel[kbase + ky * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let off = kx as isize - pad;
                        let x_lo = (-off).max(0) as usize;
                        let x_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        for ox in x_lo..x_hi {
                            out[orow + ox] += kv * input[irow + (ox as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    acc: &mut [f64],
    g: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: isize,
    oh: usize,
    ow: usize,
) {
    for oc in 0..cout {
        for ic in 0..cin {
            let kbase = (oc * cin + ic) * kh * kw;
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = ic * h * w + iy as usize * w;
                    let orow = oc * oh * ow + oy * ow;
                    for kx in 0..kw {
                        let kv = kernel[kbase + ky * kw + kx];
                        let off = kx as isize - pad;
                        let x_lo = (-off).max(0) as usize;
                        let x_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        for ox in x_lo..x_hi {
                            acc[irow + (ox as isize + off) as usize] += kv * g[orow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    acc: &mut [f64],
    g: &[f64],
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: isize,
    oh: usize,
    ow: usize,
) {
    for oc in 0..cout {
        for ic in 0..cin {
            let kbase = (oc * cin + ic) * kh * kw;
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = ic * h * w + iy as usize * w;
                    let orow = oc * oh * ow + oy * ow;
                    for kx in 0..kw {
                        let off = kx as isize - pad;
                        let x_lo = (-off).max(0) as usize;
                        let x_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        let mut sum = 0.0;
                        for ox in x_lo..x_hi {
                            sum += g[orow + ox] * input[irow + (ox as isize + off) as usize];
                        }
                        acc[kbase + ky * kw + kx] += sum;
                    }
                }
            }
        }
    }
}

/// Visit every 1-D lane along `axis`: calls `f(base, stride, len)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tensor, TensorError};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax_temp(&x, 0, 1.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_scalar_evaluation() {
        // exp(1)/(exp(1)+exp(0)) and its complement.
        let g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.softmax_temp(&x, 0, 1.0).unwrap();
        let e = 1.0f64.exp();
        let expect = e / (e + 1.0);
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] - (1.0 - expect)).abs() < 1e-12);
        assert!((y.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_tau_flattens() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.softmax_temp(&x, 0, 100.0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 0.003);
        assert!((y.data()[1] - 0.5).abs() < 0.003);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(
            g.softmax_temp(&x, 0, 0.0),
            Err(TensorError::InvalidParameter { .. })
        ));
        assert!(matches!(
            g.softmax_temp(&x, 0, -1.0),
            Err(TensorError::InvalidParameter { .. })
        ));
        assert!(matches!(
            g.softmax_temp(&x, 1, 1.0),
            Err(TensorError::InvalidShape { .. })
        ));
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let x = g
            .input(&Tensor::rand_uniform(vec![3, 4, 5], -4.0, 4.0, &mut rng))
            .unwrap();
        for axis in 0..3 {
            let y = g.softmax_temp(&x, axis, 0.7).unwrap();
            for_each_lane(x.shape(), axis, |base, stride, len| {
                let s: f64 = (0..len).map(|k| y.data()[base + k * stride]).sum();
                assert!((s - 1.0).abs() < 1e-12, "axis {axis} lane sum {s}");
            });
        }
    }

    #[test]
    fn stop_gradient_forward_identity_and_blocked_grad() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[2.0, 3.0])).unwrap();
        let s = g.stop_gradient(&x).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0]);

        let loss = g.sum(&s).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_partial_product() {
        // loss = sum(stop(x) * x), x = [2]: only the live factor contributes,
        // so d loss / dx = stop(x) = [2].
        let g = Graph::new();
        let x = g.input(&t(&[1], &[2.0])).unwrap();
        let sg = g.stop_gradient(&x).unwrap();
        let prod = g.hadamard(&sg, &x).unwrap();
        let loss = g.sum(&prod).unwrap();
        assert_eq!(loss.item(), 4.0);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let x = g.input(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_doubles() {
        let g = Graph::new();
        let x = g.input(&t(&[1], &[3.0])).unwrap();
        let sq = g.hadamard(&x, &x).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(&x),
            Err(TensorError::InvalidParameter { .. })
        ));
    }

    #[test]
    fn unreachable_leaf_reads_zero() {
        let g = Graph::new();
        let x = g.input(&t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.input(&t(&[2], &[5.0, 6.0])).unwrap();
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn hadamard_example() {
        let g = Graph::new();
        let a = g.input(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(&t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.hadamard(&a, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 8.0]);
    }

    #[test]
    fn concat_layout_law() {
        let g = Graph::new();
        let a = g.input(&t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.input(&t(&[1, 1, 2], &[9.0, 8.0])).unwrap();
        let y = g.concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[3, 1, 2]);
        assert_eq!(&y.data()[..4], a.data());
        assert_eq!(&y.data()[4..], b.data());
    }

    #[test]
    fn mean_reduce_example() {
        let g = Graph::new();
        let x = g.input(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = g.mean(&x).unwrap();
        assert_eq!(m.item(), 2.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = Graph::new();
        let a = g.input(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(&a, &b), Err(TensorError::InvalidShape { .. })));
        assert!(matches!(g.matmul(&a, &b), Err(TensorError::InvalidShape { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let g = Graph::new();
        let x = g.input(&t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.log(&x), Err(TensorError::NonFinite { .. })));
        let big = g.input(&t(&[1], &[1e308])).unwrap();
        assert!(matches!(g.exp(&big), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.input(&t(&[1], &[1.0])).unwrap();
        assert!(matches!(g2.sum(&x), Err(TensorError::ForeignGraph)));
    }

    #[test]
    fn forward_determinism() {
        let run = || {
            let g = Graph::new();
            let x = g.input(&t(&[1, 4, 4], &(0..16).map(|i| i as f64 * 0.3 - 2.0).collect::<Vec<_>>())).unwrap();
            let k = g.input(&t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>())).unwrap();
            let c = g.conv2d(&x, &k, 1).unwrap();
            let r = g.relu(&c).unwrap();
            let p = g.avg_pool2(&r).unwrap();
            let s = g.softmax_temp(&p, 2, 0.5).unwrap();
            g.sum(&s).unwrap().item()
        };
        let v1 = run();
        let v2 = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn matmul_known_product() {
        let g = Graph::new();
        let a = g.input(&t(&[2, 2], &[1.0, 1.0, 2.0, 3.0])).unwrap();
        let b = g.input(&t(&[2, 2], &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 3.0, 2.0]);
        let loss = g.sum(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel of value 1 reproduces the input.
        let g = Graph::new();
        let x = g.input(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = g.input(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = g.conv2d(&x, &k, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_hand_case() {
        // 2x2 input, 2x2 kernel, no padding: single dot product.
        let g = Graph::new();
        let x = g.input(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = g.input(&t(&[1, 1, 2, 2], &[10.0, 20.0, 30.0, 40.0])).unwrap();
        let y = g.conv2d(&x, &k, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 10.0 + 40.0 + 90.0 + 160.0);
    }

    #[test]
    fn avg_pool2_halves_dims() {
        let g = Graph::new();
        let x = g.input(&t(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])).unwrap();
        let y = g.avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.5, 5.5]);
    }

    #[test]
    fn topology_dump_is_json() {
        let g = Graph::new();
        let x = g.input(&t(&[1], &[1.0])).unwrap();
        let _ = g.sum(&x).unwrap();
        let dump = g.dump_topology();
        let parsed: serde_json::Value = serde_json::from_str(&dump).unwrap();
        assert_eq!(parsed["nodes"].as_array().unwrap().len(), 2);
        assert_eq!(parsed["nodes"][1]["op"], "sum");
    }

    mod gradients {
        use super::super::super::gradcheck::{check_gradient, DEFAULT_STEP, DEFAULT_TOLERANCE};
        use super::*;
        use rand::SeedableRng;

        fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
            rand_chacha::ChaCha8Rng::seed_from_u64(seed)
        }

        fn assert_grad_ok<F>(build: F, inputs: &[Tensor])
        where
            F: Fn(&Graph, &[Tensor]) -> super::super::super::Result<Tensor>,
        {
            let report = check_gradient(&build, inputs, DEFAULT_STEP).unwrap();
            assert!(
                report.passes(DEFAULT_TOLERANCE),
                "max rel err {}",
                report.max_rel_err
            );
        }

        #[test]
        fn conv2d_padded() {
            let mut r = rng(11);
            let x = Tensor::rand_uniform(vec![2, 5, 4], -1.0, 1.0, &mut r);
            let k = Tensor::rand_uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let c = g.conv2d(&inp[0], &inp[1], 1)?;
                    g.sum(&g.hadamard(&c, &c)?)
                },
                &[x, k],
            );
        }

        #[test]
        fn conv2d_unpadded() {
            let mut r = rng(12);
            let x = Tensor::rand_uniform(vec![1, 4, 4], -1.0, 1.0, &mut r);
            let k = Tensor::rand_uniform(vec![2, 1, 2, 2], -1.0, 1.0, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let c = g.conv2d(&inp[0], &inp[1], 0)?;
                    g.sum(&g.hadamard(&c, &c)?)
                },
                &[x, k],
            );
        }

        #[test]
        fn softmax_temp_axes() {
            let mut r = rng(13);
            let x = Tensor::rand_uniform(vec![2, 3, 4], -2.0, 2.0, &mut r);
            let w = Tensor::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
            for axis in 0..3 {
                assert_grad_ok(
                    |g, inp| {
                        let s = g.softmax_temp(&inp[0], axis, 0.7)?;
                        g.sum(&g.hadamard(&s, &inp[1])?)
                    },
                    &[x.clone(), w.clone()],
                );
            }
        }

        #[test]
        fn mask_and_scalar_broadcast() {
            let mut r = rng(14);
            let m = Tensor::rand_uniform(vec![1, 3, 2], 0.1, 0.9, &mut r);
            let v = Tensor::rand_uniform(vec![4, 3, 2], -1.0, 1.0, &mut r);
            let s = Tensor::rand_uniform(vec![1], 0.2, 1.5, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let masked = g.mul_mask(&inp[0], &inp[1])?;
                    let scaled = g.mul_scalar(&inp[2], &masked)?;
                    g.sum(&g.hadamard(&scaled, &scaled)?)
                },
                &[m, v, s],
            );
        }

        #[test]
        fn pooling_slicing_concat() {
            let mut r = rng(15);
            let a = Tensor::rand_uniform(vec![3, 4, 4], -1.0, 1.0, &mut r);
            let b = Tensor::rand_uniform(vec![2, 4, 4], -1.0, 1.0, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let cat = g.concat_channels(&inp[0], &inp[1])?;
                    let sl = g.slice_channels(&cat, 1, 3)?;
                    let p = g.avg_pool2(&sl)?;
                    g.sum(&g.hadamard(&p, &p)?)
                },
                &[a, b],
            );
        }

        #[test]
        fn dense_chain() {
            let mut r = rng(16);
            let x = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
            let w = Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut r);
            let bias = Tensor::rand_uniform(vec![2], -0.5, 0.5, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let y = g.matmul(&inp[0], &inp[1])?;
                    let y = g.add_bias_rows(&y, &inp[2])?;
                    let y = g.sigmoid(&y)?;
                    let yt = g.transpose(&y)?;
                    g.mean(&g.hadamard(&yt, &yt)?)
                },
                &[x, w, bias],
            );
        }

        #[test]
        fn smooth_unaries() {
            let mut r = rng(17);
            // Keep inputs away from relu/abs kinks and log's domain edge.
            let x = Tensor::rand_uniform(vec![6], 0.3, 2.0, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let l = g.log(&inp[0])?;
                    let e = g.exp(&l)?;
                    let rl = g.relu(&e)?;
                    let ab = g.abs(&rl)?;
                    let sc = g.scale(&ab, -1.7)?;
                    let d = g.sub(&sc, &inp[0])?;
                    g.sum(&d)
                },
                &[x],
            );
        }

        #[test]
        fn log_softmax_matches_composition_and_survives_extreme_logits() {
            let mut r = rng(19);
            let x = Tensor::rand_uniform(vec![3, 4], -2.0, 2.0, &mut r);
            let w = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
            for axis in 0..2 {
                assert_grad_ok(
                    |g, inp| {
                        let ls = g.log_softmax_temp(&inp[0], axis, 0.9)?;
                        g.sum(&g.hadamard(&ls, &inp[1])?)
                    },
                    &[x.clone(), w.clone()],
                );
            }
            // Agrees with log(softmax) where the composition is stable.
            let g = Graph::new();
            let xt = g.input(&x).unwrap();
            let a = g.log_softmax_temp(&xt, 1, 1.0).unwrap();
            let b = g.log(&g.softmax_temp(&xt, 1, 1.0).unwrap()).unwrap();
            for i in 0..a.numel() {
                assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
            }
            // Survives a logit gap that underflows the composed form.
            let g = Graph::new();
            let extreme = g.input(&t(&[1, 2], &[800.0, 0.0])).unwrap();
            let ls = g.log_softmax_temp(&extreme, 1, 1.0).unwrap();
            assert_eq!(ls.data()[0], 0.0);
            assert_eq!(ls.data()[1], -800.0);
            assert!(g.log(&g.softmax_temp(&extreme, 1, 1.0).unwrap()).is_err());
        }

        #[test]
        fn bias_chw_and_reshape() {
            let mut r = rng(18);
            let x = Tensor::rand_uniform(vec![2, 2, 3], -1.0, 1.0, &mut r);
            let bias = Tensor::rand_uniform(vec![2], -0.5, 0.5, &mut r);
            assert_grad_ok(
                |g, inp| {
                    let y = g.add_bias_chw(&inp[0], &inp[1])?;
                    let flat = g.reshape(&y, vec![2, 6])?;
                    let s = g.softmax_temp(&flat, 1, 1.3)?;
                    g.sum(&g.hadamard(&s, &flat)?)
                },
                &[x, bias],
            );
        }
    }
}
