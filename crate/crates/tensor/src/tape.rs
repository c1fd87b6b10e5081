use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Pool2dSpec {
    /// The 3x3 window with padding 1 used by every pooling candidate.
    pub fn three_by_three(stride: usize) -> Self {
        Pool2dSpec {
            kernel: 3,
            stride,
            padding: 1,
        }
    }
}

/// Which statistics batch normalization divides by.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with externally supplied (running) statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics of one batch-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Debug)]
enum Op {
    Add,
    Mul,
    Scale(f64),
    Sum,
    AddN,
    MatMul { m: usize, k: usize, n: usize },
    AddBias { cols: usize },
    Relu,
    Conv2d(ConvGeom),
    MaxPool { argmax: Vec<u32>, geom: PoolGeom },
    AvgPool(PoolGeom),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        affine: bool,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    Concat { sizes: Vec<usize>, batch: usize, plane: usize },
    SliceChannels { start: usize, len: usize, channels: usize, batch: usize, plane: usize },
    Crop { planes: usize, h: usize, w: usize, top: usize, left: usize },
    Softmax,
    CrossEntropy { probs: Vec<f64>, labels: Vec<usize>, classes: usize },
    WeightedSum { present: Vec<bool> },
    MaskMul { mask: Vec<f64> },
    ScaleSamples { scales: Vec<f64> },
    GlobalAvgPool { plane: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::AddN => "add_n",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Relu => "relu",
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool(_) => "avg_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Crop { .. } => "crop",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::MaskMul { .. } => "mask_mul",
            Op::ScaleSamples { .. } => "scale_samples",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
        }
    }
}

#[derive(Debug)]
struct Node {
    inputs: Vec<VarId>,
    output: VarId,
    op: Op,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in insertion order, which is a topological order since
/// every input must already exist when a node is recorded. `backward` walks
/// them in exact reverse. After `backward`, gradients are kept only for leaf
/// values; leaves not reachable from the loss have no gradient (`None`).
#[derive(Debug, Default)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears every recorded value, node and gradient.
    pub fn reset(&mut self) {
        self.slots.clear();
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn num_values(&self) -> usize {
        self.slots.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total number of floats held by recorded values.
    pub fn stored_floats(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }

    /// Floats held by node outputs, i.e. everything except leaves and constants.
    pub fn activation_floats(&self) -> usize {
        self.nodes.iter().map(|n| self.slots[n.output.0].data.len()).sum()
    }

    pub fn is_backward_done(&self) -> bool {
        self.backward_done
    }

    fn push_slot(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> VarId {
        debug_assert_eq!(numel(&shape), data.len());
        self.slots.push(Slot {
            shape,
            data,
            requires_grad,
        });
        VarId(self.slots.len() - 1)
    }

    fn push_node(&mut self, inputs: Vec<VarId>, shape: Vec<usize>, data: Vec<f64>, op: Op) -> VarId {
        let requires_grad = inputs.iter().any(|v| self.slots[v.0].requires_grad);
        let output = self.push_slot(shape, data, requires_grad);
        self.nodes.push(Node { inputs, output, op });
        output
    }

    fn slot(&self, v: VarId) -> Result<&Slot> {
        self.slots.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn check_open(&self) -> Result<()> {
        if self.backward_done {
            Err(TensorError::BackwardTwice)
        } else {
            Ok(())
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        self.check_open()?;
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push_slot(shape, data, false))
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        self.check_open()?;
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push_slot(shape, data, true))
    }

    /// Records `t` as a differentiable leaf and stamps it with the leaf id.
    pub fn watch(&mut self, t: &mut Tensor) -> Result<VarId> {
        let id = self.leaf(t.shape().to_vec(), t.data().to_vec())?;
        t.set_tape_id(Some(id));
        Ok(id)
    }

    /// Records the current value of `t` as a constant and clears its tape id.
    pub fn freeze(&mut self, t: &mut Tensor) -> Result<VarId> {
        let id = self.constant(t.shape().to_vec(), t.data().to_vec())?;
        t.set_tape_id(None);
        Ok(id)
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.slots[v.0].data
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.slots[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: VarId) -> Tensor {
        let s = &self.slots[v.0];
        Tensor::new(s.shape.clone(), s.data.clone()).expect("slot shape is consistent")
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `t`'s leaf into `t.grad`; absent if unreachable.
    pub fn pull_grad(&self, t: &mut Tensor) {
        let g = t.tape_id().and_then(|id| self.grad(id)).map(|g| g.to_vec());
        t.set_grad(g);
    }

    // ---- primitives -------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_open()?;
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        if sa.shape != sb.shape {
            return Err(mismatch("add", &sa.shape, &sb.shape));
        }
        let data = sa.data.iter().zip(&sb.data).map(|(x, y)| x + y).collect();
        let shape = sa.shape.clone();
        Ok(self.push_node(vec![a, b], shape, data, Op::Add))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_open()?;
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        if sa.shape != sb.shape {
            return Err(mismatch("mul", &sa.shape, &sb.shape));
        }
        let data = sa.data.iter().zip(&sb.data).map(|(x, y)| x * y).collect();
        let shape = sa.shape.clone();
        Ok(self.push_node(vec![a, b], shape, data, Op::Mul))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.check_open()?;
        let sa = self.slot(a)?;
        let data = sa.data.iter().map(|x| x * c).collect();
        let shape = sa.shape.clone();
        Ok(self.push_node(vec![a], shape, data, Op::Scale(c)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.check_open()?;
        let total = self.slot(a)?.data.iter().sum();
        Ok(self.push_node(vec![a], vec![], vec![total], Op::Sum))
    }

    /// Elementwise sum of same-shaped values.
    pub fn add_n(&mut self, xs: &[VarId]) -> Result<VarId> {
        self.check_open()?;
        let first = *xs.first().ok_or_else(|| invalid("add_n", "no inputs"))?;
        let shape = self.slot(first)?.shape.clone();
        let mut data = vec![0.0; numel(&shape)];
        for &x in xs {
            let s = self.slot(x)?;
            if s.shape != shape {
                return Err(mismatch("add_n", &shape, &s.shape));
            }
            for (o, v) in data.iter_mut().zip(&s.data) {
                *o += v;
            }
        }
        Ok(self.push_node(xs.to_vec(), shape, data, Op::AddN))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_open()?;
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        if sa.shape.len() != 2 || sb.shape.len() != 2 || sa.shape[1] != sb.shape[0] {
            return Err(mismatch("matmul", &sa.shape, &sb.shape));
        }
        let (m, k, n) = (sa.shape[0], sa.shape[1], sb.shape[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(&sa.data, &sb.data, &mut data, m, k, n);
        Ok(self.push_node(vec![a, b], vec![m, n], data, Op::MatMul { m, k, n }))
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` value.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        self.check_open()?;
        let (sx, sb) = (self.slot(x)?, self.slot(bias)?);
        if sx.shape.len() != 2 || sb.shape.len() != 1 || sx.shape[1] != sb.shape[0] {
            return Err(mismatch("add_bias", &sx.shape, &sb.shape));
        }
        let cols = sx.shape[1];
        let mut data = sx.data.clone();
        for row in data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(&sb.data) {
                *o += b;
            }
        }
        let shape = sx.shape.clone();
        Ok(self.push_node(vec![x, bias], shape, data, Op::AddBias { cols }))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        let data = sx.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = sx.shape.clone();
        Ok(self.push_node(vec![x], shape, data, Op::Relu))
    }

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin/groups, Kh, Kw]`, no bias.
    pub fn conv2d(&mut self, x: VarId, w: VarId, spec: Conv2dSpec) -> Result<VarId> {
        self.check_open()?;
        let (sx, sw) = (self.slot(x)?, self.slot(w)?);
        if sx.shape.len() != 4 || sw.shape.len() != 4 {
            return Err(mismatch("conv2d", &sx.shape, &sw.shape));
        }
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(invalid("conv2d", "stride, dilation and groups must be positive"));
        }
        let (batch, cin, h, wd) = (sx.shape[0], sx.shape[1], sx.shape[2], sx.shape[3]);
        let (cout, cin_g, kh, kw) = (sw.shape[0], sw.shape[1], sw.shape[2], sw.shape[3]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g || kh == 0 || kw == 0 {
            return Err(mismatch("conv2d", &sx.shape, &sw.shape));
        }
        let (Some(oh), Some(ow)) = (
            kernels::window_out(h, kh, spec.stride, spec.padding, spec.dilation),
            kernels::window_out(wd, kw, spec.stride, spec.padding, spec.dilation),
        ) else {
            return Err(mismatch("conv2d", &sx.shape, &sw.shape));
        };
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
            groups: spec.groups,
        };
        let mut data = vec![0.0; batch * cout * oh * ow];
        kernels::conv2d_forward(&geom, &sx.data, &sw.data, &mut data);
        Ok(self.push_node(vec![x, w], vec![batch, cout, oh, ow], data, Op::Conv2d(geom)))
    }

    fn pool_geom(&self, op: &'static str, x: VarId, spec: Pool2dSpec) -> Result<PoolGeom> {
        let sx = self.slot(x)?;
        if sx.shape.len() != 4 {
            return Err(invalid(op, format!("expected NCHW input, got {:?}", sx.shape)));
        }
        if spec.kernel == 0 || spec.stride == 0 || spec.padding >= spec.kernel {
            return Err(invalid(op, format!("unsupported window {spec:?}")));
        }
        let (h, w) = (sx.shape[2], sx.shape[3]);
        let (Some(oh), Some(ow)) = (
            kernels::window_out(h, spec.kernel, spec.stride, spec.padding, 1),
            kernels::window_out(w, spec.kernel, spec.stride, spec.padding, 1),
        ) else {
            return Err(invalid(op, format!("window {spec:?} larger than input {:?}", sx.shape)));
        };
        Ok(PoolGeom {
            planes: sx.shape[0] * sx.shape[1],
            h,
            w,
            oh,
            ow,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    pub fn max_pool2d(&mut self, x: VarId, spec: Pool2dSpec) -> Result<VarId> {
        self.check_open()?;
        let g = self.pool_geom("max_pool2d", x, spec)?;
        let sx = self.slot(x)?;
        let n = g.planes * g.oh * g.ow;
        let mut data = vec![0.0; n];
        let mut argmax = vec![0u32; n];
        kernels::max_pool_forward(&g, &sx.data, &mut data, &mut argmax);
        let shape = vec![sx.shape[0], sx.shape[1], g.oh, g.ow];
        Ok(self.push_node(vec![x], shape, data, Op::MaxPool { argmax, geom: g }))
    }

    /// Average pooling that excludes padded taps from the divisor.
    pub fn avg_pool2d(&mut self, x: VarId, spec: Pool2dSpec) -> Result<VarId> {
        self.check_open()?;
        let g = self.pool_geom("avg_pool2d", x, spec)?;
        let sx = self.slot(x)?;
        let mut data = vec![0.0; g.planes * g.oh * g.ow];
        kernels::avg_pool_forward(&g, &sx.data, &mut data);
        let shape = vec![sx.shape[0], sx.shape[1], g.oh, g.ow];
        Ok(self.push_node(vec![x], shape, data, Op::AvgPool(g)))
    }

    /// Per-channel batch normalization of an NCHW value, with optional affine.
    ///
    /// In [`BatchNormMode::Batch`] the returned statistics let the caller
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        affine: Option<(VarId, VarId)>,
        mode: BatchNormMode<'_>,
    ) -> Result<(VarId, Option<BatchStats>)> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.len() != 4 {
            return Err(invalid("batch_norm", format!("expected NCHW input, got {:?}", sx.shape)));
        }
        let (batch, channels) = (sx.shape[0], sx.shape[1]);
        let plane = sx.shape[2] * sx.shape[3];
        if let Some((g, b)) = affine {
            for p in [g, b] {
                let sp = self.slot(p)?;
                if sp.shape != [channels] {
                    return Err(mismatch("batch_norm", &sx.shape, &sp.shape));
                }
            }
        }
        let count = batch * plane;
        let (mean, var, eps, batch_stats) = match mode {
            BatchNormMode::Batch { eps } => {
                if count == 0 {
                    return Err(invalid("batch_norm", "empty batch"));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += sx.data[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..batch {
                        q += sx.data[(b * channels + c) * plane..][..plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = q / count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Fixed { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(mismatch("batch_norm", &sx.shape, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; sx.data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                let (m, is) = (mean[c], inv_std[c]);
                for (o, v) in xhat[off..off + plane].iter_mut().zip(&sx.data[off..off + plane]) {
                    *o = (v - m) * is;
                }
            }
        }
        let mut data = xhat.clone();
        let mut inputs = vec![x];
        if let Some((g, bt)) = affine {
            let (gv, bv) = (&self.slots[g.0].data, &self.slots[bt.0].data);
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * plane;
                    for o in &mut data[off..off + plane] {
                        *o = *o * gv[c] + bv[c];
                    }
                }
            }
            inputs.push(g);
            inputs.push(bt);
        }
        let shape = sx.shape.clone();
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let op = Op::BatchNorm {
            xhat,
            inv_std,
            batch_stats,
            affine: affine.is_some(),
            batch,
            channels,
            plane,
        };
        Ok((self.push_node(inputs, shape, data, op), stats))
    }

    /// Concatenates NCHW values along the channel axis.
    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        self.check_open()?;
        let first = *xs.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let s0 = self.slot(first)?.shape.clone();
        if s0.len() != 4 {
            return Err(invalid("concat_channels", format!("expected NCHW input, got {s0:?}")));
        }
        let (batch, plane) = (s0[0], s0[2] * s0[3]);
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = &self.slot(x)?.shape;
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(mismatch("concat_channels", &s0, s));
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = vec![0.0; batch * total * plane];
        for b in 0..batch {
            let mut c_off = 0;
            for (&x, &c) in xs.iter().zip(&sizes) {
                let src = &self.slots[x.0].data[b * c * plane..][..c * plane];
                data[(b * total + c_off) * plane..][..c * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let shape = vec![batch, total, s0[2], s0[3]];
        Ok(self.push_node(xs.to_vec(), shape, data, Op::Concat { sizes, batch, plane }))
    }

    /// Channels `start..start + len` of an NCHW value.
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.len() != 4 || start + len > sx.shape[1] {
            return Err(invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {:?}", start + len, sx.shape),
            ));
        }
        let (batch, channels, plane) = (sx.shape[0], sx.shape[1], sx.shape[2] * sx.shape[3]);
        let mut data = Vec::with_capacity(batch * len * plane);
        for b in 0..batch {
            data.extend_from_slice(&sx.data[(b * channels + start) * plane..][..len * plane]);
        }
        let shape = vec![batch, len, sx.shape[2], sx.shape[3]];
        let op = Op::SliceChannels {
            start,
            len,
            channels,
            batch,
            plane,
        };
        Ok(self.push_node(vec![x], shape, data, op))
    }

    /// Drops the first `top` rows and `left` columns of every plane.
    pub fn crop(&mut self, x: VarId, top: usize, left: usize) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.len() != 4 || top >= sx.shape[2] || left >= sx.shape[3] {
            return Err(invalid("crop", format!("offset ({top}, {left}) invalid for {:?}", sx.shape)));
        }
        let (h, w) = (sx.shape[2], sx.shape[3]);
        let planes = sx.shape[0] * sx.shape[1];
        let (oh, ow) = (h - top, w - left);
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in top..h {
                data.extend_from_slice(&sx.data[p * h * w + y * w + left..][..ow]);
            }
        }
        let shape = vec![sx.shape[0], sx.shape[1], oh, ow];
        Ok(self.push_node(vec![x], shape, data, Op::Crop { planes, h, w, top, left }))
    }

    /// Softmax of a 1-D value.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.len() != 1 || sx.shape[0] == 0 {
            return Err(invalid("softmax", format!("expected a non-empty vector, got {:?}", sx.shape)));
        }
        let data = softmax_vec(&sx.data);
        let shape = sx.shape.clone();
        Ok(self.push_node(vec![x], shape, data, Op::Softmax))
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(logits)?;
        if sx.shape.len() != 2 || sx.shape[0] != labels.len() || labels.is_empty() {
            return Err(mismatch("cross_entropy", &sx.shape, &[labels.len()]));
        }
        let (batch, classes) = (sx.shape[0], sx.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid("cross_entropy", format!("label {bad} >= {classes} classes")));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in sx.data.chunks(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[label];
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            classes,
        };
        Ok(self.push_node(vec![logits], vec![], vec![loss / batch as f64], op))
    }

    /// `Σ_i weights[i] * branches[i]`, where a `None` branch is an all-zero term.
    pub fn weighted_sum(&mut self, weights: VarId, branches: &[Option<VarId>], shape: &[usize]) -> Result<VarId> {
        self.check_open()?;
        let sw = self.slot(weights)?;
        if sw.shape != [branches.len()] {
            return Err(mismatch("weighted_sum", &sw.shape, &[branches.len()]));
        }
        let mut data = vec![0.0; numel(shape)];
        let mut inputs = vec![weights];
        for (i, b) in branches.iter().enumerate() {
            if let Some(b) = *b {
                let sb = self.slot(b)?;
                if sb.shape != shape {
                    return Err(mismatch("weighted_sum", shape, &sb.shape));
                }
                let wi = self.slots[weights.0].data[i];
                for (o, v) in data.iter_mut().zip(&sb.data) {
                    *o += wi * v;
                }
                inputs.push(b);
            }
        }
        let present = branches.iter().map(Option::is_some).collect();
        Ok(self.push_node(inputs, shape.to_vec(), data, Op::WeightedSum { present }))
    }

    /// Elementwise product with a constant mask (dropout and similar).
    pub fn mask_mul(&mut self, x: VarId, mask: Vec<f64>) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if mask.len() != sx.data.len() {
            return Err(mismatch("mask_mul", &sx.shape, &[mask.len()]));
        }
        let data = sx.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = sx.shape.clone();
        Ok(self.push_node(vec![x], shape, data, Op::MaskMul { mask }))
    }

    /// Multiplies every element of sample `b` by `scales[b]`.
    pub fn scale_samples(&mut self, x: VarId, scales: Vec<f64>) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.is_empty() || sx.shape[0] != scales.len() {
            return Err(mismatch("scale_samples", &sx.shape, &[scales.len()]));
        }
        let per = sx.data.len() / scales.len().max(1);
        let mut data = sx.data.clone();
        for (chunk, s) in data.chunks_mut(per.max(1)).zip(&scales) {
            for v in chunk {
                *v *= s;
            }
        }
        let shape = sx.shape.clone();
        Ok(self.push_node(vec![x], shape, data, Op::ScaleSamples { scales }))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        self.check_open()?;
        let sx = self.slot(x)?;
        if sx.shape.len() != 4 || sx.shape[2] * sx.shape[3] == 0 {
            return Err(invalid("global_avg_pool", format!("expected NCHW input, got {:?}", sx.shape)));
        }
        let plane = sx.shape[2] * sx.shape[3];
        let data = sx.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let shape = vec![sx.shape[0], sx.shape[1]];
        Ok(self.push_node(vec![x], shape, data, Op::GlobalAvgPool { plane }))
    }

    // ---- differentiation --------------------------------------------------

    /// Distance of the recorded computation from its non-differentiable
    /// points: the smallest `|x|` fed to a ReLU and the smallest gap between
    /// the two largest taps of a max-pooling window. Finite-difference checks
    /// are only meaningful when this is well above the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::Relu => {
                    let x = &self.slots[n.inputs[0].0].data;
                    margin = x.iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::MaxPool { geom, .. } => {
                    let x = &self.slots[n.inputs[0].0].data;
                    margin = margin.min(kernels::max_pool_margin(geom, x));
                }
                _ => {}
            }
        }
        margin
    }

    /// Index and name of the first node whose output holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| self.slots[n.output.0].data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    fn non_finite_error(&self) -> TensorError {
        match self.first_non_finite() {
            Some((node, op)) => TensorError::NonFinite { node, op },
            None => {
                let var = self
                    .slots
                    .iter()
                    .position(|s| s.data.iter().any(|v| !v.is_finite()))
                    .unwrap_or(0);
                TensorError::NonFiniteLeaf { var }
            }
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.check_open()?;
        let sl = self.slot(loss)?;
        if sl.data.len() != 1 {
            return Err(TensorError::NotScalar(sl.shape.clone()));
        }
        if !sl.data[0].is_finite() {
            return Err(self.non_finite_error());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        if self.slots[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for node in self.nodes.iter().rev() {
            let Some(gout) = grads[node.output.0].take() else {
                continue;
            };
            backward_node(&self.slots, node, &gout, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], slots: &[Slot], v: VarId) -> Option<&'g mut Vec<f64>> {
    if !slots[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; slots[v.0].data.len()]))
}

fn backward_node(slots: &[Slot], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let ins = &node.inputs;
    let val = |v: VarId| -> &[f64] { &slots[v.0].data };
    match &node.op {
        Op::Add => {
            for &v in ins {
                if let Some(g) = acc(grads, slots, v) {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::AddN => {
            for &v in ins {
                if let Some(g) = acc(grads, slots, v) {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if let Some(g) = acc(grads, slots, a) {
                for ((gi, go), bv) in g.iter_mut().zip(gout).zip(val(b)) {
                    *gi += go * bv;
                }
            }
            if let Some(g) = acc(grads, slots, b) {
                for ((gi, go), av) in g.iter_mut().zip(gout).zip(val(a)) {
                    *gi += go * av;
                }
            }
        }
        Op::Scale(c) => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::Sum => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                g.iter_mut().for_each(|a| *a += gout[0]);
            }
        }
        Op::MatMul { m, k, n } => {
            let (a, b) = (ins[0], ins[1]);
            if let Some(g) = acc(grads, slots, a) {
                kernels::matmul_acc_bt(gout, val(b), g, *m, *k, *n);
            }
            if let Some(g) = acc(grads, slots, b) {
                kernels::matmul_acc_at(val(a), gout, g, *m, *k, *n);
            }
        }
        Op::AddBias { cols, .. } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            if let Some(g) = acc(grads, slots, ins[1]) {
                for row in gout.chunks(*cols) {
                    g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Relu => {
            let out = val(node.output);
            if let Some(g) = acc(grads, slots, ins[0]) {
                for ((gi, go), o) in g.iter_mut().zip(gout).zip(out) {
                    if *o > 0.0 {
                        *gi += go;
                    }
                }
            }
        }
        Op::Conv2d(geom) => {
            let (x, w) = (ins[0], ins[1]);
            if let Some(g) = acc(grads, slots, w) {
                kernels::conv2d_backward_weight(geom, val(x), gout, g);
            }
            if let Some(g) = acc(grads, slots, x) {
                kernels::conv2d_backward_input(geom, val(w), gout, g);
            }
        }
        Op::MaxPool { argmax, .. } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                for (&i, go) in argmax.iter().zip(gout) {
                    g[i as usize] += go;
                }
            }
        }
        Op::AvgPool(geom) => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                kernels::avg_pool_backward(geom, gout, g);
            }
        }
        Op::BatchNorm {
            xhat,
            inv_std,
            batch_stats,
            affine,
            batch,
            channels,
            plane,
        } => {
            let (batch, channels, plane) = (*batch, *channels, *plane);
            let gamma = affine.then(|| val(ins[1]));
            // Per-channel sums of dy and dy * xhat.
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * plane;
                    let go = &gout[off..off + plane];
                    sum_dy[c] += go.iter().sum::<f64>();
                    sum_dy_xhat[c] += kernels::dot(go, &xhat[off..off + plane]);
                }
            }
            if *affine {
                if let Some(g) = acc(grads, slots, ins[1]) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
                }
                if let Some(g) = acc(grads, slots, ins[2]) {
                    g.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(g) = acc(grads, slots, ins[0]) {
                let count = (batch * plane) as f64;
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        let gm = gamma.map_or(1.0, |gv| gv[c]);
                        let scale = gm * inv_std[c];
                        let go = &gout[off..off + plane];
                        let xh = &xhat[off..off + plane];
                        let gi = &mut g[off..off + plane];
                        if *batch_stats {
                            let mean_dy = sum_dy[c] / count;
                            let mean_dy_xhat = sum_dy_xhat[c] / count;
                            for ((o, d), h) in gi.iter_mut().zip(go).zip(xh) {
                                *o += scale * (d - mean_dy - h * mean_dy_xhat);
                            }
                        } else {
                            for (o, d) in gi.iter_mut().zip(go) {
                                *o += scale * d;
                            }
                        }
                    }
                }
            }
        }
        Op::Concat { sizes, batch, plane } => {
            let total: usize = sizes.iter().sum();
            let mut c_off = 0;
            for (&v, &c) in ins.iter().zip(sizes) {
                if let Some(g) = acc(grads, slots, v) {
                    for b in 0..*batch {
                        let src = &gout[(b * total + c_off) * plane..][..c * plane];
                        g[b * c * plane..][..c * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, s)| *a += s);
                    }
                }
                c_off += c;
            }
        }
        Op::SliceChannels {
            start,
            len,
            channels,
            batch,
            plane,
        } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                for b in 0..*batch {
                    let src = &gout[b * len * plane..][..len * plane];
                    g[(b * channels + start) * plane..][..len * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, s)| *a += s);
                }
            }
        }
        Op::Crop { planes, h, w, top, left } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                let (oh, ow) = (h - top, w - left);
                for p in 0..*planes {
                    for y in 0..oh {
                        let src = &gout[(p * oh + y) * ow..][..ow];
                        g[p * h * w + (y + top) * w + left..][..ow]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, s)| *a += s);
                    }
                }
            }
        }
        Op::Softmax => {
            let y = val(node.output);
            let inner = kernels::dot(gout, y);
            if let Some(g) = acc(grads, slots, ins[0]) {
                for ((gi, go), yi) in g.iter_mut().zip(gout).zip(y) {
                    *gi += yi * (go - inner);
                }
            }
        }
        Op::CrossEntropy { probs, labels, classes } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                let scale = gout[0] / labels.len() as f64;
                for (b, &label) in labels.iter().enumerate() {
                    let row = &mut g[b * classes..][..*classes];
                    for (k, gi) in row.iter_mut().enumerate() {
                        let target = if k == label { 1.0 } else { 0.0 };
                        *gi += scale * (probs[b * classes + k] - target);
                    }
                }
            }
        }
        Op::WeightedSum { present } => {
            let wv = val(ins[0]).to_vec();
            let mut branch = ins[1..].iter();
            let mut dw = vec![0.0; present.len()];
            for (i, &p) in present.iter().enumerate() {
                if !p {
                    continue;
                }
                let v = *branch.next().expect("one input per present branch");
                dw[i] = kernels::dot(gout, val(v));
                if let Some(g) = acc(grads, slots, v) {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += wv[i] * b);
                }
            }
            if let Some(g) = acc(grads, slots, ins[0]) {
                g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            }
        }
        Op::MaskMul { mask } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                for ((gi, go), m) in g.iter_mut().zip(gout).zip(mask) {
                    *gi += go * m;
                }
            }
        }
        Op::ScaleSamples { scales } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                let per = g.len() / scales.len().max(1);
                for ((gc, oc), s) in g.chunks_mut(per.max(1)).zip(gout.chunks(per.max(1))).zip(scales) {
                    gc.iter_mut().zip(oc).for_each(|(a, b)| *a += s * b);
                }
            }
        }
        Op::GlobalAvgPool { plane } => {
            if let Some(g) = acc(grads, slots, ins[0]) {
                let inv = 1.0 / *plane as f64;
                for (gc, go) in g.chunks_mut(*plane).zip(gout) {
                    gc.iter_mut().for_each(|a| *a += go * inv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conv_of_ones_centre_is_nine() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = t
            .conv2d(x, w, Conv2dSpec { padding: 1, ..Default::default() })
            .unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert_eq!(t.value(y)[4], 9.0);
        assert_eq!(t.value(y)[0], 4.0);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![0.0, 2f64.ln()]).unwrap();
        let y = t.softmax(x).unwrap();
        assert!(close(t.value(y), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let logits = [0.5, -1.0, 2.0, 0.1];
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 4], logits.to_vec()).unwrap();
        let loss = t.cross_entropy(x, &[2]).unwrap();
        t.backward(loss).unwrap();
        let mut expect = softmax_vec(&logits);
        expect[2] -= 1.0;
        assert!(close(t.grad(x).unwrap(), &expect, 1e-14));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1], vec![3.0]).unwrap();
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.backward(loss), Err(TensorError::BackwardTwice));
        assert_eq!(t.relu(w), Err(TensorError::BackwardTwice));
        t.reset();
        let w = t.leaf(vec![1], vec![3.0]).unwrap();
        let loss = t.sum(w).unwrap();
        assert!(t.backward(loss).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.backward(w), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(vec![1], vec![1.0]).unwrap();
        let unused = t.leaf(vec![1], vec![1.0]).unwrap();
        let loss = t.sum(used).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(used).is_some());
        assert!(t.grad(unused).is_none());
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        match t.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(t.matmul(a, a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_finite_loss_reports_first_bad_node() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, f64::MAX]).unwrap();
        let ok = t.relu(x).unwrap();
        let big = t.scale(ok, 10.0).unwrap();
        let loss = t.sum(big).unwrap();
        match t.backward(loss) {
            Err(TensorError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "scale");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kink_margin_sees_relu_and_max_pool() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 2, 2], vec![0.5, -0.3, 0.2, 0.9]).unwrap();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        t.relu(x).unwrap();
        assert!((t.kink_margin() - 0.2).abs() < 1e-15);
        let y = t.constant(vec![1, 1, 2, 2], vec![1.0, 1.05, -2.0, 0.0]).unwrap();
        t.max_pool2d(y, Pool2dSpec { kernel: 2, stride: 2, padding: 0 }).unwrap();
        assert!((t.kink_margin() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pools_preserve_constants() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3, 5, 5], vec![0.75; 150]).unwrap();
        for stride in [1, 2] {
            let a = t.avg_pool2d(x, Pool2dSpec::three_by_three(stride)).unwrap();
            let m = t.max_pool2d(x, Pool2dSpec::three_by_three(stride)).unwrap();
            assert!(t.value(a).iter().all(|&v| (v - 0.75).abs() < 1e-15));
            assert!(t.value(m).iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn strided_output_sizes() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2, 16, 16], vec![0.0; 512]).unwrap();
        let p = t.max_pool2d(x, Pool2dSpec::three_by_three(2)).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 8, 8]);
        let w = t.constant(vec![2, 1, 5, 5], vec![0.0; 50]).unwrap();
        let spec = Conv2dSpec {
            stride: 2,
            padding: 4,
            dilation: 2,
            groups: 2,
        };
        let y = t.conv2d(x, w, spec).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 8, 8]);
        let c = t.crop(x, 1, 1).unwrap();
        assert_eq!(t.shape(c), &[1, 2, 15, 15]);
    }

    #[test]
    fn batch_norm_batch_mode_standardizes() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..4 * 3 * 5 * 5)
            .map(|i| 100.0 * ((i * 7919 % 113) as f64 / 113.0 - 0.3) + (i % 3) as f64)
            .collect();
        let x = t.constant(vec![4, 3, 5, 5], data).unwrap();
        let (y, stats) = t.batch_norm(x, None, BatchNormMode::Batch { eps: 1e-5 }).unwrap();
        assert_eq!(stats.unwrap().count, 100);
        let v = t.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| v[(b * 3 + c) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn weighted_sum_with_absent_branch() {
        let mut t = Tape::new();
        let w = t.leaf(vec![2], vec![0.5, 0.5]).unwrap();
        let x = t.leaf(vec![3], vec![2.0, 4.0, -6.0]).unwrap();
        let y = t.weighted_sum(w, &[None, Some(x)], &[3]).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, -3.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(x).unwrap(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn watched_tensor_receives_gradient() {
        let mut p = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let mut t = Tape::new();
        let v = t.watch(&mut p).unwrap();
        assert_eq!(p.tape_id(), Some(v));
        let sq = t.mul(v, v).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        t.pull_grad(&mut p);
        assert_eq!(p.grad().unwrap(), &[6.0, -2.0]);
    }
}
