//! The progressive search loop: staged bilevel optimization, skip-dropout
//! decay and end-of-stage candidate pruning.

use log::info;
use pdarts_tensor::TensorError;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SearchSplit};
use crate::error::{Error, Result};
use crate::genotype::{AlphaSnapshot, SnapshotMeta};
use crate::nn::{BnStats, Ctx, Mode, Module};
use crate::ops::OpKind;
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::seed;
use crate::supernet::{rebuild_for_stage, CandidateSpace, NetworkConfig, SearchNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub depth: usize,
    /// Candidates per edge while this stage trains.
    pub op_budget: usize,
    pub epochs: usize,
    pub warm_epochs: usize,
    pub init_skip_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    /// Depths 5/8/11, budgets 8/5/3, 12 epochs with 4 warm.
    pub fn desk(dropout: [f64; 3]) -> Self {
        let stage = |depth, op_budget, d| StageSpec {
            depth,
            op_budget,
            epochs: 12,
            warm_epochs: 4,
            init_skip_dropout: d,
        };
        StagePlan {
            stages: vec![stage(5, 8, dropout[0]), stage(8, 5, dropout[1]), stage(11, 3, dropout[2])],
        }
    }

    /// Depths 5/11/17, budgets 8/5/3, 25 epochs with 10 warm.
    pub fn paper(dropout: [f64; 3]) -> Self {
        let stage = |depth, op_budget, d| StageSpec {
            depth,
            op_budget,
            epochs: 25,
            warm_epochs: 10,
            init_skip_dropout: d,
        };
        StagePlan {
            stages: vec![stage(5, 8, dropout[0]), stage(11, 5, dropout[1]), stage(17, 3, dropout[2])],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or_else(|| Error::config("plan has no stages"))?;
        if first.op_budget != OpKind::ALL.len() {
            return Err(Error::config(format!(
                "the first stage must search all {} operations, plan says {}",
                OpKind::ALL.len(),
                first.op_budget
            )));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || s.warm_epochs >= s.epochs {
                return Err(Error::config(format!(
                    "stage {}: warm epochs ({}) must be fewer than epochs ({})",
                    k + 1,
                    s.warm_epochs,
                    s.epochs
                )));
            }
            if !(0.0..=1.0).contains(&s.init_skip_dropout) {
                return Err(Error::config(format!(
                    "stage {}: skip dropout {} outside [0, 1]",
                    k + 1,
                    s.init_skip_dropout
                )));
            }
            if s.op_budget == 0 {
                return Err(Error::config(format!("stage {}: empty operation budget", k + 1)));
            }
        }
        for (k, w) in self.stages.windows(2).enumerate() {
            if w[1].depth <= w[0].depth {
                return Err(Error::config(format!("stage {}: depth must grow", k + 2)));
            }
            if w[1].op_budget >= w[0].op_budget {
                return Err(Error::config(format!("stage {}: operation budget must shrink", k + 2)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the plan's canonical JSON encoding.
    pub fn digest(&self) -> String {
        crate::run::sha256_hex(serde_json::to_string(self).expect("plan serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub grad_clip: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::desk()
    }
}

impl OptimizerConfig {
    /// Batch 96 and alpha learning rate 6e-4.
    pub fn paper() -> Self {
        OptimizerConfig {
            batch_size: 96,
            w_lr: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: 5.0,
            alpha_lr: 6e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
        }
    }

    /// Batch 32 and alpha learning rate 0.03. A desk stage takes about 32
    /// alpha steps, against thousands at full scale; at 6e-4 the alphas
    /// would end within 0.02 of zero and the derived cells would be noise.
    pub fn desk() -> Self {
        OptimizerConfig {
            batch_size: 32,
            alpha_lr: 0.03,
            ..OptimizerConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.w_lr,
            self.w_lr_min,
            self.w_momentum,
            self.w_weight_decay,
            self.grad_clip,
            self.alpha_lr,
            self.alpha_weight_decay,
        ];
        if self.batch_size == 0 || rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::config("optimizer rates and batch size must be positive"));
        }
        if self.w_lr_min > self.w_lr {
            return Err(Error::config("w_lr_min exceeds w_lr"));
        }
        let (b1, b2) = self.alpha_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Skip-dropout rate at `epoch`: `init * (1 - epoch / total)`.
pub fn dropout_schedule(init_rate: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&init_rate) {
        return Err(Error::config(format!("skip dropout {init_rate} outside [0, 1]")));
    }
    if epoch >= total_epochs {
        return Err(Error::config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    Ok(init_rate * (1.0 - epoch as f64 / total_epochs as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warm,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warm => "warm",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub skip_dropout_rate: f64,
    pub lr_w: f64,
    pub lr_alpha: f64,
}

pub const METRICS_HEADER: &str = "stage,epoch,phase,train_loss,val_loss,skip_dropout_rate,lr_w,lr_alpha";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.stage,
            self.epoch,
            self.phase.name(),
            self.train_loss,
            self.val_loss,
            self.skip_dropout_rate,
            self.lr_w,
            self.lr_alpha
        )
    }
}

/// Size report of one stage's network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub stage: usize,
    pub depth: usize,
    pub candidates_per_edge: usize,
    pub weights: usize,
    pub alphas: usize,
    /// Floats produced by one single-image training forward pass.
    pub activation_floats: usize,
}

pub const ACCOUNTING_HEADER: &str = "stage,depth,candidates_per_edge,weights,alphas,activation_floats";

impl Accounting {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.stage, self.depth, self.candidates_per_edge, self.weights, self.alphas, self.activation_floats
        )
    }
}

/// Training data of a search: the training set and its two halves.
#[derive(Debug, Clone, Copy)]
pub struct SearchData<'a> {
    pub train: &'a Dataset,
    pub split: &'a SearchSplit,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub snapshot: AlphaSnapshot,
    pub metrics: Vec<MetricRow>,
    pub accounting: Accounting,
    /// Alpha values when the stage started and when the warm phase ended.
    pub alpha_at_start: Vec<f64>,
    pub alpha_after_warm: Vec<f64>,
}

/// Identifies a stage within a run, for seeds, metrics and snapshots.
#[derive(Debug, Clone)]
pub struct StageTag {
    /// 1-based stage number.
    pub stage: usize,
    pub seed: u64,
    pub plan_digest: String,
}

/// Trains one stage: weight-only warm epochs on split A, then per mini-batch
/// an alpha step (Adam, split B) followed by a weight step (SGD, split A).
pub fn run_stage(
    net: &mut SearchNetwork,
    spec: &StageSpec,
    data: SearchData<'_>,
    opt: &OptimizerConfig,
    tag: &StageTag,
) -> Result<StageOutcome> {
    let k = tag.stage as u64;
    let mut shuffle_rng = seed::rng(tag.seed, "stage.shuffle", k);
    let mut ctx = Ctx::new(Mode::Train, BnStats::Batch, seed::rng(tag.seed, "stage.dropout", k));
    let mut sgd = Sgd::new(opt.w_momentum, opt.w_weight_decay);
    let mut adam = Adam::new(opt.alpha_betas, opt.alpha_weight_decay);
    let accounting = account(net, data.train, tag.stage)?;
    let alpha_at_start = net.alpha.flat();
    let mut alpha_after_warm = alpha_at_start.clone();
    let mut metrics = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let rate = dropout_schedule(spec.init_skip_dropout, epoch, spec.epochs)?;
        net.set_skip_dropout(rate);
        let lr_w = cosine_lr(opt.w_lr, opt.w_lr_min, epoch, spec.epochs);
        let phase = if epoch < spec.warm_epochs { Phase::Warm } else { Phase::Joint };
        let lr_alpha = if phase == Phase::Joint { opt.alpha_lr } else { 0.0 };
        let mut a = data.split.a.clone();
        let mut b = data.split.b.clone();
        a.shuffle(&mut shuffle_rng);
        b.shuffle(&mut shuffle_rng);
        let diverged = |batch: usize, source: TensorError| Error::Diverged {
            stage: tag.stage,
            epoch,
            batch,
            lr_w,
            lr_alpha,
            source,
        };
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let a_batches = a.chunks(opt.batch_size);
        let b_batches: Vec<&[usize]> = b.chunks(opt.batch_size).collect();
        for (i, batch_a) in a_batches.enumerate() {
            if phase == Phase::Joint {
                let Some(batch_b) = b_batches.get(i) else { break };
                alpha_step(net, &mut ctx, data.train, batch_b, &mut adam, lr_alpha)
                    .map_err(|e| lift(e, |s| diverged(i, s)))?;
            }
            let loss = weight_step(net, &mut ctx, data.train, batch_a, &mut sgd, lr_w, opt.grad_clip)
                .map_err(|e| lift(e, |s| diverged(i, s)))?;
            loss_sum += loss * batch_a.len() as f64;
            seen += batch_a.len();
        }
        if epoch + 1 == spec.warm_epochs {
            alpha_after_warm = net.alpha.flat();
        }
        let val_loss = evaluate_loss(net, data.train, &data.split.b, opt.batch_size)?;
        let row = MetricRow {
            stage: tag.stage,
            epoch,
            phase,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            skip_dropout_rate: rate,
            lr_w,
            lr_alpha,
        };
        info!(
            "stage {} epoch {} ({}): train {:.4} val {:.4} skip-dropout {:.3} lr {:.5}",
            row.stage,
            row.epoch,
            row.phase.name(),
            row.train_loss,
            row.val_loss,
            row.skip_dropout_rate,
            row.lr_w
        );
        metrics.push(row);
    }
    let snapshot = AlphaSnapshot::from_tables(
        &net.space,
        &net.alpha,
        SnapshotMeta {
            stage: tag.stage,
            seed: tag.seed,
            plan_digest: tag.plan_digest.clone(),
        },
    )?;
    Ok(StageOutcome {
        snapshot,
        metrics,
        accounting,
        alpha_at_start,
        alpha_after_warm,
    })
}

fn lift(e: Error, f: impl FnOnce(TensorError) -> Error) -> Error {
    match e {
        Error::Tensor(s @ (TensorError::NonFinite { .. } | TensorError::NonFiniteLeaf { .. })) => f(s),
        other => other,
    }
}

fn batch_loss(net: &mut SearchNetwork, ctx: &mut Ctx, data: &Dataset, idx: &[usize]) -> Result<pdarts_tensor::VarId> {
    let (shape, pixels, labels) = data.batch(idx);
    let x = ctx.tape.constant(shape, pixels)?;
    let logits = net.forward(ctx, x)?;
    Ok(ctx.tape.cross_entropy(logits, &labels)?)
}

fn alpha_step(
    net: &mut SearchNetwork,
    ctx: &mut Ctx,
    data: &Dataset,
    idx: &[usize],
    adam: &mut Adam,
    lr: f64,
) -> Result<f64> {
    ctx.tape.reset();
    ctx.mode = Mode::Train;
    ctx.grad_weights = false;
    ctx.grad_alpha = true;
    let loss = batch_loss(net, ctx, data, idx)?;
    let value = ctx.tape.value(loss)[0];
    ctx.tape.backward(loss)?;
    let mut params = net.alpha.params_mut();
    for p in params.iter_mut() {
        ctx.tape.pull_grad(p);
    }
    adam.step(&mut params, lr);
    Ok(value)
}

fn weight_step(
    net: &mut SearchNetwork,
    ctx: &mut Ctx,
    data: &Dataset,
    idx: &[usize],
    sgd: &mut Sgd,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    ctx.tape.reset();
    ctx.mode = Mode::Train;
    ctx.grad_weights = true;
    ctx.grad_alpha = false;
    let loss = batch_loss(net, ctx, data, idx)?;
    let value = ctx.tape.value(loss)[0];
    ctx.tape.backward(loss)?;
    let mut params = Vec::new();
    net.params_mut(&mut params);
    for p in params.iter_mut() {
        ctx.tape.pull_grad(p);
    }
    clip_grad_norm(&mut params, clip);
    sgd.step(&mut params, lr);
    Ok(value)
}

/// Mean cross-entropy over `indices` without stochastic regularization.
pub fn evaluate_loss(net: &mut SearchNetwork, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut ctx = Ctx::new(Mode::Eval, BnStats::Batch, seed::rng(0, "unused", 0));
    let mut total = 0.0;
    for batch in indices.chunks(batch_size.max(1)) {
        ctx.tape.reset();
        let loss = batch_loss(net, &mut ctx, data, batch)?;
        total += ctx.tape.value(loss)[0] * batch.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Parameter counts and the activation footprint of a one-image forward pass.
pub fn account(net: &mut SearchNetwork, data: &Dataset, stage: usize) -> Result<Accounting> {
    let mut ctx = Ctx::new(Mode::Train, BnStats::Batch, seed::rng(0, "accounting", 0));
    ctx.grad_weights = true;
    ctx.grad_alpha = true;
    let shape = vec![1, data.channels, data.height, data.width];
    let x = ctx.tape.constant(shape, data.image(0).to_vec())?;
    net.forward(&mut ctx, x)?;
    let alphas = net.alpha.flat().len();
    Ok(Accounting {
        stage,
        depth: net.depth,
        candidates_per_edge: net.space.uniform_size().unwrap_or(0),
        weights: net.weight_count(),
        alphas,
        activation_floats: ctx.tape.activation_floats(),
    })
}

/// Per edge, the `keep` candidates with the largest weights (ties go to the
/// earlier kind), listed in enumeration order. Cell types prune independently.
pub fn approximate_space(snapshot: &AlphaSnapshot, keep: usize) -> Result<CandidateSpace> {
    let prune = |edges: &[crate::genotype::EdgeAlpha]| -> Result<Vec<Vec<OpKind>>> {
        edges
            .iter()
            .map(|e| {
                if keep == 0 || keep > e.ops.len() {
                    return Err(Error::Edge {
                        from: e.edge.0,
                        to: e.edge.1,
                        reason: format!("cannot keep {keep} of {} candidates", e.ops.len()),
                    });
                }
                let mut ranked = e.ops.clone();
                ranked.sort_by(|a, b| b.weight().total_cmp(&a.weight()).then(a.kind().cmp(&b.kind())));
                let mut kept: Vec<OpKind> = ranked[..keep].iter().map(|o| o.kind()).collect();
                kept.sort();
                Ok(kept)
            })
            .collect()
    };
    Ok(CandidateSpace {
        normal: prune(&snapshot.cells.normal)?,
        reduce: prune(&snapshot.cells.reduce)?,
    })
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub stages: Vec<StageOutcome>,
}

impl SearchOutcome {
    pub fn final_snapshot(&self) -> &AlphaSnapshot {
        &self.stages.last().expect("a validated plan has stages").snapshot
    }
}

/// Runs every stage of `plan`, pruning the candidate space between stages.
/// `on_stage` sees each outcome as soon as its stage finishes.
pub fn run_progressive_search(
    config: &NetworkConfig,
    plan: &StagePlan,
    opt: &OptimizerConfig,
    data: SearchData<'_>,
    run_seed: u64,
    mut on_stage: impl FnMut(&StageOutcome) -> Result<()>,
) -> Result<SearchOutcome> {
    plan.validate()?;
    opt.validate()?;
    let digest = plan.digest();
    let mut space = CandidateSpace::full(config.n_edges());
    let mut stages: Vec<StageOutcome> = Vec::with_capacity(plan.stages.len());
    for (k, spec) in plan.stages.iter().enumerate() {
        if let Some(prev) = stages.last() {
            space = approximate_space(&prev.snapshot, spec.op_budget)?;
        }
        let stage = k + 1;
        let mut init_rng = seed::rng(run_seed, "stage.init", stage as u64);
        let mut net = rebuild_for_stage(config, spec.depth, &space, &mut init_rng)?;
        info!(
            "stage {stage}: depth {}, {} candidates per edge, {} weights",
            spec.depth,
            spec.op_budget,
            net.weight_count()
        );
        let tag = StageTag {
            stage,
            seed: run_seed,
            plan_digest: digest.clone(),
        };
        let outcome = run_stage(&mut net, spec, data, opt, &tag)?;
        on_stage(&outcome)?;
        stages.push(outcome);
    }
    Ok(SearchOutcome { stages })
}
