//! Parameterized layers recorded onto a [`Tape`] at forward time.
//!
//! Parameters live in [`Tensor`]s owned by the layers. Each forward pass
//! records them either as differentiable leaves or as constants, depending on
//! which parameter group the surrounding optimizer step is training. After
//! `backward`, gradients are pulled back into the tensors by walking
//! [`Module::params_mut`], whose order is fixed by construction.

use pdarts_tensor::{BatchNormMode, Conv2dSpec, Tape, Tensor, VarId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether stochastic regularizers (skip dropout, drop-path) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batch normalization divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStats {
    /// Statistics of the current batch (search convention, and training).
    Batch,
    /// Running averages; layers that keep none fall back to batch statistics.
    Running,
}

/// Everything a forward pass needs besides the layers themselves.
pub struct Ctx {
    pub tape: Tape,
    pub mode: Mode,
    pub bn: BnStats,
    /// Record operation weights as differentiable leaves.
    pub grad_weights: bool,
    /// Record architecture parameters as differentiable leaves.
    pub grad_alpha: bool,
    /// Source of dropout and drop-path masks.
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn new(mode: Mode, bn: BnStats, rng: ChaCha8Rng) -> Self {
        Ctx {
            tape: Tape::new(),
            mode,
            bn,
            grad_weights: false,
            grad_alpha: false,
            rng,
        }
    }

    pub fn weight(&mut self, t: &mut Tensor) -> Result<VarId> {
        Ok(if self.grad_weights {
            self.tape.watch(t)?
        } else {
            self.tape.freeze(t)?
        })
    }

    pub fn alpha(&mut self, t: &mut Tensor) -> Result<VarId> {
        Ok(if self.grad_alpha {
            self.tape.watch(t)?
        } else {
            self.tape.freeze(t)?
        })
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

pub trait Module {
    /// Appends every learnable tensor in a fixed order.
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn num_params(&mut self) -> usize {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        v.iter().map(|t| t.numel()).sum()
    }
}

/// Convolution without bias, Kaiming-normal (fan-in) initialized.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        let fan_in = c_in / spec.groups * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let shape = vec![c_out, c_in / spec.groups, kernel, kernel];
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Conv2d {
            weight: Tensor::new(shape, data).expect("consistent shape"),
            spec,
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let w = ctx.weight(&mut self.weight)?;
        Ok(ctx.tape.conv2d(x, w, self.spec)?)
    }
}

impl Module for Conv2d {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
    }
}

#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with optional affine transform and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub affine: Option<(Tensor, Tensor)>,
    pub running: Option<RunningStats>,
}

impl BatchNorm {
    pub fn new(channels: usize, affine: bool, track_running: bool) -> Self {
        BatchNorm {
            affine: affine.then(|| (Tensor::full(vec![channels], 1.0), Tensor::zeros(vec![channels]))),
            running: track_running.then(|| RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let affine = match &mut self.affine {
            Some((g, b)) => Some((ctx.weight(g)?, ctx.weight(b)?)),
            None => None,
        };
        match (&mut self.running, ctx.bn) {
            (Some(r), BnStats::Running) => {
                let mode = BatchNormMode::Fixed {
                    mean: &r.mean,
                    var: &r.var,
                    eps: BN_EPS,
                };
                Ok(ctx.tape.batch_norm(x, affine, mode)?.0)
            }
            (running, _) => {
                let (y, stats) = ctx.tape.batch_norm(x, affine, BatchNormMode::Batch { eps: BN_EPS })?;
                if let (Some(r), Some(s), true) = (running, stats, ctx.training()) {
                    let unbias = if s.count > 1 {
                        s.count as f64 / (s.count - 1) as f64
                    } else {
                        1.0
                    };
                    for c in 0..r.mean.len() {
                        r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * s.mean[c];
                        r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * s.var[c] * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

impl Module for BatchNorm {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        if let Some((g, b)) = &mut self.affine {
            out.push(g);
            out.push(b);
        }
    }
}

/// ReLU, 1x1 convolution, affine BN: the cell-input adapter.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, track: bool) -> Self {
        ReluConvBn {
            conv: Conv2d::new(rng, c_in, c_out, 1, Conv2dSpec::default()),
            bn: BatchNorm::new(c_out, true, track),
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let r = ctx.tape.relu(x)?;
        let c = self.conv.forward(ctx, r)?;
        self.bn.forward(ctx, c)
    }
}

impl Module for ReluConvBn {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }
}

/// Halves the spatial size with two strided 1x1 convolutions, the second
/// reading the input shifted by one pixel, concatenated along channels.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, track: bool) -> Self {
        let spec = Conv2dSpec {
            stride: 2,
            ..Default::default()
        };
        let half = c_out / 2;
        FactorizedReduce {
            conv_a: Conv2d::new(rng, c_in, half, 1, spec),
            conv_b: Conv2d::new(rng, c_in, c_out - half, 1, spec),
            bn: BatchNorm::new(c_out, true, track),
        }
    }

    /// `relu_x` is the rectified input, shared with other consumers.
    pub fn forward_relu(&mut self, ctx: &mut Ctx, relu_x: VarId) -> Result<VarId> {
        let a = self.conv_a.forward(ctx, relu_x)?;
        let shifted = ctx.tape.crop(relu_x, 1, 1)?;
        let b = self.conv_b.forward(ctx, shifted)?;
        let cat = ctx.tape.concat_channels(&[a, b])?;
        self.bn.forward(ctx, cat)
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let r = ctx.tape.relu(x)?;
        self.forward_relu(ctx, r)
    }
}

impl Module for FactorizedReduce {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.conv_a.params_mut(out);
        self.conv_b.params_mut(out);
        self.bn.params_mut(out);
    }
}

/// Fully connected layer `[B, in] -> [B, out]`, uniform ±1/sqrt(in) init.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..n_in * n_out).map(|_| dist.sample(rng)).collect();
        let b = (0..n_out).map(|_| dist.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![n_in, n_out], w).expect("consistent shape"),
            bias: Tensor::new(vec![n_out], b).expect("consistent shape"),
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let w = ctx.weight(&mut self.weight)?;
        let b = ctx.weight(&mut self.bias)?;
        let y = ctx.tape.matmul(x, w)?;
        Ok(ctx.tape.add_bias(y, b)?)
    }
}

impl Module for Linear {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect()
}
