//! Discrete evaluation networks built from genotypes, and their training.

use log::info;
use pdarts_tensor::{Conv2dSpec, Tensor, VarId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::{EvalGeometry, Genotype};
use crate::nn::{BatchNorm, BnStats, Conv2d, Ctx, FactorizedReduce, Linear, Mode, Module, ReluConvBn};
use crate::ops::{Candidate, NodeInput, OpKind};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::seed;
use crate::supernet::{is_reduction, Preprocess};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub depth: usize,
    pub init_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Final drop-path probability; ramps linearly from 0 over the epochs.
    pub drop_path_prob: f64,
    /// Side of the square cutout mask, 0 to disable.
    pub cutout_length: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            depth: 8,
            init_channels: 16,
            epochs: 30,
            batch_size: 32,
            drop_path_prob: 0.2,
            cutout_length: 4,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::config(format!(
                "evaluation depth {} cannot hold two distinct reduction cells",
                self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_prob) {
            return Err(Error::config(format!("drop-path probability {} outside [0, 1)", self.drop_path_prob)));
        }
        if self.batch_size == 0 || self.init_channels == 0 || self.lr <= 0.0 || self.lr_min < 0.0 {
            return Err(Error::config("evaluation batch size, channels and learning rate must be positive"));
        }
        Ok(())
    }

    /// Drop-path probability during `epoch`.
    pub fn drop_path_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return 0.0;
        }
        self.drop_path_prob * epoch as f64 / self.epochs as f64
    }
}

/// A cell with one fixed operation per selected pair.
#[derive(Debug, Clone)]
pub struct EvalCell {
    pub reduction: bool,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    /// Two (operation, source state) entries per intermediate node.
    pub ops: Vec<[(Candidate, usize); 2]>,
    pub concat: Vec<usize>,
}

impl EvalCell {
    fn forward(&mut self, ctx: &mut Ctx, c0: VarId, c1: VarId, drop_prob: f64) -> Result<VarId> {
        let s0 = self.pre0.forward(ctx, c0)?;
        let s1 = self.pre1.forward(ctx, c1)?;
        let mut states = vec![NodeInput::new(s0), NodeInput::new(s1)];
        for node in &mut self.ops {
            let [(op_a, from_a), (op_b, from_b)] = node;
            let mut h_a = op_a.forward_dense(ctx, &mut states[*from_a])?;
            let mut h_b = op_b.forward_dense(ctx, &mut states[*from_b])?;
            if ctx.training() && drop_prob > 0.0 {
                let batch = ctx.tape.shape(h_a)[0];
                let (ka, kb) = drop_path_masks(&mut ctx.rng, batch, drop_prob);
                h_a = ctx.tape.scale_samples(h_a, ka)?;
                h_b = ctx.tape.scale_samples(h_b, kb)?;
            }
            let sum = ctx.tape.add(h_a, h_b)?;
            states.push(NodeInput::new(sum));
        }
        let outs: Vec<VarId> = self.concat.iter().map(|&s| states[s].x).collect();
        Ok(ctx.tape.concat_channels(&outs)?)
    }
}

impl Module for EvalCell {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.pre0.params_mut(out);
        self.pre1.params_mut(out);
        for node in &mut self.ops {
            for (op, _) in node.iter_mut() {
                op.params_mut(out);
            }
        }
    }
}

/// Per-sample scales for the two inputs of a node. Each input is dropped with
/// probability `p` and kept ones are scaled by 1/(1-p); a sample that would
/// lose both inputs is redrawn.
pub fn drop_path_masks(rng: &mut ChaCha8Rng, batch: usize, p: f64) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (1.0 - p);
    let mut a = Vec::with_capacity(batch);
    let mut b = Vec::with_capacity(batch);
    for _ in 0..batch {
        loop {
            let keep_a = rng.random::<f64>() >= p;
            let keep_b = rng.random::<f64>() >= p;
            if keep_a || keep_b {
                a.push(if keep_a { scale } else { 0.0 });
                b.push(if keep_b { scale } else { 0.0 });
                break;
            }
        }
    }
    (a, b)
}

/// Blanks a `length`-sided square at a uniformly drawn centre (clipped at the
/// border) in every channel of one `[C, H, W]` image.
pub fn cutout(rng: &mut ChaCha8Rng, image: &mut [f64], channels: usize, height: usize, width: usize, length: usize, fill: f64) {
    if length == 0 {
        return;
    }
    let cy = rng.random_range(0..height) as isize;
    let cx = rng.random_range(0..width) as isize;
    let half = (length / 2) as isize;
    let y0 = (cy - half).max(0) as usize;
    let y1 = ((cy - half + length as isize).min(height as isize)).max(0) as usize;
    let x0 = (cx - half).max(0) as usize;
    let x1 = ((cx - half + length as isize).min(width as isize)).max(0) as usize;
    for c in 0..channels {
        for y in y0..y1 {
            let row = c * height * width + y * width;
            image[row + x0..row + x1].fill(fill);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalNetwork {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub cells: Vec<EvalCell>,
    pub classifier: Linear,
    pub geometry: EvalGeometry,
}

impl EvalNetwork {
    pub fn forward(&mut self, ctx: &mut Ctx, images: VarId, drop_prob: f64) -> Result<VarId> {
        let s = self.stem.forward(ctx, images)?;
        let s = self.stem_bn.forward(ctx, s)?;
        let (mut c0, mut c1) = (s, s);
        for cell in &mut self.cells {
            let out = cell.forward(ctx, c0, c1, drop_prob)?;
            c0 = c1;
            c1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(c1)?;
        self.classifier.forward(ctx, pooled)
    }

    pub fn param_count(&mut self) -> usize {
        self.num_params()
    }
}

impl Module for EvalNetwork {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.stem.params_mut(out);
        self.stem_bn.params_mut(out);
        for c in &mut self.cells {
            c.params_mut(out);
        }
        self.classifier.params_mut(out);
    }
}

/// Input geometry of the data an evaluation network will see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub image_size: usize,
    pub classes: usize,
}

impl InputSpec {
    pub fn of(data: &Dataset) -> Self {
        InputSpec {
            channels: data.channels,
            image_size: data.height,
            classes: data.classes,
        }
    }
}

/// Stacks `cfg.depth` cells of the genotype's fixed operations, with
/// reduction cells at depth/3 and 2*depth/3.
pub fn build_eval_network(genotype: &Genotype, input: InputSpec, cfg: &EvalConfig, seed: u64) -> Result<EvalNetwork> {
    genotype.validate()?;
    cfg.validate()?;
    if input.image_size < 4 || !input.image_size.is_multiple_of(4) {
        return Err(Error::config(format!(
            "image size {} must be a positive multiple of 4",
            input.image_size
        )));
    }
    let mut rng = seed::rng(seed, "eval.init", 0);
    let rng = &mut rng;
    let stem_multiplier = 3;
    let c = cfg.init_channels;
    let c_stem = stem_multiplier * c;
    let stem = Conv2d::new(
        rng,
        input.channels,
        c_stem,
        3,
        Conv2dSpec {
            padding: 1,
            ..Default::default()
        },
    );
    let stem_bn = BatchNorm::new(c_stem, true, true);
    let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
    let mut reduction_prev = false;
    let mut cells = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let reduction = is_reduction(i, cfg.depth);
        if reduction {
            c_cur *= 2;
        }
        let pre0 = if reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(rng, c_pp, c_cur, true))
        } else {
            Preprocess::Conv(ReluConvBn::new(rng, c_pp, c_cur, true))
        };
        let pre1 = ReluConvBn::new(rng, c_p, c_cur, true);
        let pairs = if reduction { &genotype.reduce } else { &genotype.normal };
        let mut ops = Vec::with_capacity(pairs.len());
        for node in pairs {
            let mut build = |(kind, from): (OpKind, usize)| -> Result<(Candidate, usize)> {
                let stride = if reduction && from < 2 { 2 } else { 1 };
                Ok((Candidate::build(rng, kind, c_cur, stride, true)?, from))
            };
            ops.push([build(node[0])?, build(node[1])?]);
        }
        cells.push(EvalCell {
            reduction,
            pre0,
            pre1,
            ops,
            concat: genotype.concat.clone(),
        });
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = genotype.concat.len() * c_cur;
    }
    let classifier = Linear::new(rng, c_p, input.classes);
    Ok(EvalNetwork {
        stem,
        stem_bn,
        cells,
        classifier,
        geometry: EvalGeometry {
            in_channels: input.channels,
            num_classes: input.classes,
            init_channels: c,
            depth: cfg.depth,
            stem_multiplier,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_error: f64,
    pub drop_path_prob: f64,
    pub lr: f64,
}

pub const EVAL_METRICS_HEADER: &str = "epoch,train_loss,test_error,drop_path_prob,lr";

impl EvalEpoch {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch, self.train_loss, self.test_error, self.drop_path_prob, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalHistory {
    pub initial_test_error: f64,
    pub epochs: Vec<EvalEpoch>,
}

impl EvalHistory {
    pub fn final_test_error(&self) -> f64 {
        self.epochs.last().map_or(self.initial_test_error, |e| e.test_error)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Fraction of misclassified images, using running BN statistics.
pub fn test_error(net: &mut EvalNetwork, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut ctx = Ctx::new(Mode::Eval, BnStats::Running, seed::rng(0, "unused", 0));
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    for batch in idx.chunks(batch_size.max(1)) {
        ctx.tape.reset();
        let (shape, pixels, labels) = data.batch(batch);
        let x = ctx.tape.constant(shape, pixels)?;
        let logits = net.forward(&mut ctx, x, 0.0)?;
        let k = data.classes;
        for (row, &label) in ctx.tape.value(logits).chunks(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            wrong += usize::from(best != label);
        }
    }
    Ok(wrong as f64 / data.len().max(1) as f64)
}

/// Trains `net` from its current weights with SGD, cosine learning rate,
/// cutout and a linearly ramped drop-path; evaluates after every epoch.
pub fn train_eval(net: &mut EvalNetwork, train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalHistory> {
    cfg.validate()?;
    let initial_test_error = test_error(net, test, cfg.batch_size)?;
    let mut shuffle_rng = seed::rng(seed, "eval.shuffle", 0);
    let mut cutout_rng = seed::rng(seed, "eval.cutout", 0);
    let mut ctx = Ctx::new(Mode::Train, BnStats::Batch, seed::rng(seed, "eval.drop_path", 0));
    ctx.grad_weights = true;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let image_len = train.image_len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        let drop = cfg.drop_path_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (shape, mut pixels, labels) = train.batch(batch);
            for img in pixels.chunks_mut(image_len) {
                cutout(&mut cutout_rng, img, train.channels, train.height, train.width, cfg.cutout_length, 0.0);
            }
            ctx.tape.reset();
            let x = ctx.tape.constant(shape, pixels)?;
            let logits = net.forward(&mut ctx, x, drop)?;
            let loss = ctx.tape.cross_entropy(logits, &labels)?;
            let value = ctx.tape.value(loss)[0];
            ctx.tape.backward(loss).map_err(|source| Error::Diverged {
                stage: 0,
                epoch,
                batch: b,
                lr_w: lr,
                lr_alpha: 0.0,
                source,
            })?;
            let mut params = Vec::new();
            net.params_mut(&mut params);
            for p in params.iter_mut() {
                ctx.tape.pull_grad(p);
            }
            clip_grad_norm(&mut params, cfg.grad_clip);
            sgd.step(&mut params, lr);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let err = test_error(net, test, cfg.batch_size)?;
        let row = EvalEpoch {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_error: err,
            drop_path_prob: drop,
            lr,
        };
        info!(
            "eval epoch {epoch}: train loss {:.4}, test error {:.4}",
            row.train_loss, row.test_error
        );
        epochs.push(row);
    }
    Ok(EvalHistory {
        initial_test_error,
        epochs,
    })
}
