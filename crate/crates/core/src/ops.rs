//! The candidate operation set and the mixed edge.

use std::fmt;
use std::str::FromStr;

use pdarts_tensor::{Conv2dSpec, Pool2dSpec, Tensor, VarId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, BatchNorm, Conv2d, Ctx, FactorizedReduce, Module};

/// The eight candidate operations, in their fixed enumeration order.
///
/// The order doubles as the tie-break everywhere candidates are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    /// Position in the enumeration order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown operation {s:?}"))
    }
}

/// Learnable-parameter count of one candidate, from its layer formulas.
pub fn param_count(kind: OpKind, channels: usize, stride: usize) -> usize {
    let c = channels;
    let dw_pw_bn = |k: usize| k * k * c + c * c + 2 * c;
    match kind {
        OpKind::Zero | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 0,
        OpKind::SkipConnect if stride == 1 => 0,
        OpKind::SkipConnect => c * (c / 2) + c * (c - c / 2) + 2 * c,
        OpKind::SepConv3x3 => 2 * dw_pw_bn(3),
        OpKind::SepConv5x5 => 2 * dw_pw_bn(5),
        OpKind::DilConv3x3 => dw_pw_bn(3),
        OpKind::DilConv5x5 => dw_pw_bn(5),
    }
}

/// A cell state as seen by the operations reading it. The rectified value is
/// computed on first use and shared by every convolution reading the state.
#[derive(Debug, Clone, Copy)]
pub struct NodeInput {
    pub x: VarId,
    relu: Option<VarId>,
}

impl NodeInput {
    pub fn new(x: VarId) -> Self {
        NodeInput { x, relu: None }
    }

    pub fn relu(&mut self, ctx: &mut Ctx) -> Result<VarId> {
        match self.relu {
            Some(r) => Ok(r),
            None => {
                let r = ctx.tape.relu(self.x)?;
                self.relu = Some(r);
                Ok(r)
            }
        }
    }
}

/// Depthwise convolution followed by a pointwise one and affine BN.
#[derive(Debug, Clone)]
pub struct DwPwBn {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm,
}

impl DwPwBn {
    fn new(rng: &mut ChaCha8Rng, c: usize, kernel: usize, stride: usize, dilation: usize, track: bool) -> Self {
        let spec = Conv2dSpec {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: c,
        };
        DwPwBn {
            depthwise: Conv2d::new(rng, c, c, kernel, spec),
            pointwise: Conv2d::new(rng, c, c, 1, Conv2dSpec::default()),
            bn: BatchNorm::new(c, true, track),
        }
    }

    fn forward(&mut self, ctx: &mut Ctx, relu_x: VarId) -> Result<VarId> {
        let d = self.depthwise.forward(ctx, relu_x)?;
        let p = self.pointwise.forward(ctx, d)?;
        self.bn.forward(ctx, p)
    }
}

impl Module for DwPwBn {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.depthwise.params_mut(out);
        self.pointwise.params_mut(out);
        self.bn.params_mut(out);
    }
}

/// One instantiated candidate operation.
#[derive(Debug, Clone)]
pub enum Candidate {
    Zero { stride: usize },
    Identity,
    Reduce(FactorizedReduce),
    MaxPool { stride: usize, bn: BatchNorm },
    AvgPool { stride: usize, bn: BatchNorm },
    SepConv(DwPwBn, DwPwBn),
    DilConv(DwPwBn),
}

impl Candidate {
    /// Builds `kind` mapping `[B, C, H, W]` to `[B, C, H/stride, W/stride]`.
    ///
    /// `track` gives the BN layers running statistics (evaluation networks);
    /// search networks always normalize with batch statistics.
    pub fn build(rng: &mut ChaCha8Rng, kind: OpKind, channels: usize, stride: usize, track: bool) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("{kind}: unsupported stride {stride}")));
        }
        if channels == 0 {
            return Err(Error::config(format!("{kind}: channel count must be positive")));
        }
        let c = channels;
        Ok(match kind {
            OpKind::Zero => Candidate::Zero { stride },
            OpKind::SkipConnect if stride == 1 => Candidate::Identity,
            OpKind::SkipConnect => Candidate::Reduce(FactorizedReduce::new(rng, c, c, track)),
            OpKind::MaxPool3x3 => Candidate::MaxPool {
                stride,
                bn: BatchNorm::new(c, false, track),
            },
            OpKind::AvgPool3x3 => Candidate::AvgPool {
                stride,
                bn: BatchNorm::new(c, false, track),
            },
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                Candidate::SepConv(
                    DwPwBn::new(rng, c, k, stride, 1, track),
                    DwPwBn::new(rng, c, k, 1, 1, track),
                )
            }
            OpKind::DilConv3x3 => Candidate::DilConv(DwPwBn::new(rng, c, 3, stride, 2, track)),
            OpKind::DilConv5x5 => Candidate::DilConv(DwPwBn::new(rng, c, 5, stride, 2, track)),
        })
    }

    /// Applies the operation; `None` stands for an all-zero output.
    pub fn forward(&mut self, ctx: &mut Ctx, input: &mut NodeInput) -> Result<Option<VarId>> {
        Ok(Some(match self {
            Candidate::Zero { .. } => return Ok(None),
            Candidate::Identity => input.x,
            Candidate::Reduce(fr) => {
                let r = input.relu(ctx)?;
                fr.forward_relu(ctx, r)?
            }
            Candidate::MaxPool { stride, bn } => {
                let p = ctx.tape.max_pool2d(input.x, Pool2dSpec::three_by_three(*stride))?;
                bn.forward(ctx, p)?
            }
            Candidate::AvgPool { stride, bn } => {
                let p = ctx.tape.avg_pool2d(input.x, Pool2dSpec::three_by_three(*stride))?;
                bn.forward(ctx, p)?
            }
            Candidate::SepConv(first, second) => {
                let r = input.relu(ctx)?;
                let h = first.forward(ctx, r)?;
                let h = ctx.tape.relu(h)?;
                second.forward(ctx, h)?
            }
            Candidate::DilConv(op) => {
                let r = input.relu(ctx)?;
                op.forward(ctx, r)?
            }
        }))
    }

    /// Materializes the output, turning the zero operation into a zero tensor.
    pub fn forward_dense(&mut self, ctx: &mut Ctx, input: &mut NodeInput) -> Result<VarId> {
        match self.forward(ctx, input)? {
            Some(v) => Ok(v),
            None => {
                let shape = strided_shape(ctx.tape.shape(input.x), self.stride());
                let n = shape.iter().product();
                Ok(ctx.tape.constant(shape, vec![0.0; n])?)
            }
        }
    }

    fn stride(&self) -> usize {
        match self {
            Candidate::Zero { stride } | Candidate::MaxPool { stride, .. } | Candidate::AvgPool { stride, .. } => *stride,
            Candidate::Reduce(_) => 2,
            Candidate::Identity => 1,
            Candidate::SepConv(first, _) | Candidate::DilConv(first) => first.depthwise.spec.stride,
        }
    }
}

impl Module for Candidate {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Candidate::Zero { .. } | Candidate::Identity => {}
            Candidate::Reduce(fr) => fr.params_mut(out),
            Candidate::MaxPool { bn, .. } | Candidate::AvgPool { bn, .. } => bn.params_mut(out),
            Candidate::SepConv(a, b) => {
                a.params_mut(out);
                b.params_mut(out);
            }
            Candidate::DilConv(op) => op.params_mut(out),
        }
    }
}

/// Output shape of a 3x3/pad-1 style window (or 1x1 strided pair) at `stride`.
pub fn strided_shape(shape: &[usize], stride: usize) -> Vec<usize> {
    vec![shape[0], shape[1], shape[2].div_ceil(stride), shape[3].div_ceil(stride)]
}

/// Softmax of one edge's architecture parameters.
pub fn mixture_weights(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::config("mixture over an empty candidate set"));
    }
    if alpha.iter().any(|a| a.is_nan()) {
        return Err(Error::config(format!("architecture parameters contain NaN: {alpha:?}")));
    }
    let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// One mixed edge `(from, to)` of a search cell.
///
/// The architecture parameters are not stored here: every cell of a type
/// shares one alpha table, so the softmax is taken once per forward pass and
/// handed to [`EdgeState::forward`].
#[derive(Debug, Clone)]
pub struct EdgeState {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    pub candidates: Vec<OpKind>,
    pub ops: Vec<Candidate>,
    pub skip_dropout_rate: f64,
}

impl EdgeState {
    pub fn new(
        rng: &mut ChaCha8Rng,
        (from, to): (usize, usize),
        channels: usize,
        stride: usize,
        candidates: &[OpKind],
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Edge {
                from,
                to,
                reason: "empty candidate set".into(),
            });
        }
        if from >= to {
            return Err(Error::Edge {
                from,
                to,
                reason: "edges must point from a lower to a higher node".into(),
            });
        }
        let ops = candidates
            .iter()
            .map(|&k| Candidate::build(rng, k, channels, stride, false))
            .collect::<Result<_>>()?;
        Ok(EdgeState {
            from,
            to,
            stride,
            candidates: candidates.to_vec(),
            ops,
            skip_dropout_rate: 0.0,
        })
    }

    /// Weighted sum of every candidate's output. `weights` is the softmax of
    /// this edge's alpha row, shape `[candidates.len()]`.
    pub fn forward(&mut self, ctx: &mut Ctx, input: &mut NodeInput, weights: VarId) -> Result<VarId> {
        let out_shape = strided_shape(ctx.tape.shape(input.x), self.stride);
        let rate = self.skip_dropout_rate;
        let mut branches = Vec::with_capacity(self.ops.len());
        for (kind, op) in self.candidates.iter().zip(&mut self.ops) {
            let mut y = op.forward(ctx, input)?;
            if let (OpKind::SkipConnect, Some(v)) = (kind, y) {
                if ctx.training() && rate > 0.0 {
                    let mask = dropout_mask(&mut ctx.rng, ctx.tape.value(v).len(), rate);
                    y = Some(ctx.tape.mask_mul(v, mask)?);
                }
            }
            branches.push(y);
        }
        ctx.tape
            .weighted_sum(weights, &branches, &out_shape)
            .map_err(|e| Error::Edge {
                from: self.from,
                to: self.to,
                reason: e.to_string(),
            })
    }

    pub fn param_count(&self, channels: usize) -> usize {
        self.candidates
            .iter()
            .map(|&k| param_count(k, channels, self.stride))
            .sum()
    }
}

impl Module for EdgeState {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for op in &mut self.ops {
            op.params_mut(out);
        }
    }
}

/// Mixture output of a standalone edge: softmax of `alpha`, then the weighted
/// sum of all candidate outputs.
pub fn mixed_forward(edge: &mut EdgeState, ctx: &mut Ctx, x: VarId, alpha: &mut Tensor) -> Result<VarId> {
    if alpha.numel() != edge.candidates.len() {
        return Err(Error::Edge {
            from: edge.from,
            to: edge.to,
            reason: format!("{} alpha entries for {} candidates", alpha.numel(), edge.candidates.len()),
        });
    }
    mixture_weights(alpha.data())?;
    let a = ctx.alpha(alpha)?;
    let w = ctx.tape.softmax(a)?;
    edge.forward(ctx, &mut NodeInput::new(x), w)
}
