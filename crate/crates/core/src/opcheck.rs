//! Finite-difference checks of every candidate operation and of the mixed
//! edge, with respect to the input, the operation weights and alpha.
//!
//! Max-pooling and ReLU are not differentiable everywhere. Inputs are
//! redrawn until the recorded computation keeps at least [`KINK_MARGIN`]
//! away from every kink, so a central difference of step `h` never straddles
//! one.

use pdarts_tensor::gradcheck::{primitive_cases, run_suite, GradCheckConfig, GradCheckReport};
use pdarts_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{BnStats, Ctx, Mode, Module};
use crate::ops::{mixed_forward, Candidate, EdgeState, NodeInput, OpKind};
use crate::seed;

/// Smallest accepted distance from a ReLU or max-pooling kink.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 256;
const CHANNELS: usize = 4;
const INPUT: [usize; 4] = [2, CHANNELS, 6, 6];
const EDGE_SKIP_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub seeds: usize,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Op(OpKind, usize),
    Edge(usize),
}

impl Target {
    fn name(self) -> String {
        match self {
            Target::Op(kind, stride) => format!("{kind}_s{stride}"),
            Target::Edge(stride) => format!("mixed_edge_s{stride}"),
        }
    }
}

enum Subject {
    Op(Candidate),
    Edge { edge: EdgeState, alpha: Tensor },
}

struct Probe {
    subject: Subject,
    x: Tensor,
    mask_seed: u64,
    projection: Option<Vec<f64>>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl Probe {
    fn build(target: Target, rng: &mut ChaCha8Rng) -> Result<Self> {
        let subject = match target {
            Target::Op(kind, stride) => Subject::Op(Candidate::build(rng, kind, CHANNELS, stride, false)?),
            Target::Edge(stride) => {
                let mut edge = EdgeState::new(rng, (0, 2), CHANNELS, stride, &OpKind::ALL)?;
                edge.skip_dropout_rate = EDGE_SKIP_DROPOUT;
                let alpha = normal_tensor(rng, &[OpKind::ALL.len()]);
                Subject::Edge { edge, alpha }
            }
        };
        Ok(Probe {
            subject,
            x: normal_tensor(rng, &INPUT),
            mask_seed: rng.random(),
            projection: None,
        })
    }

    fn tensors(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.x];
        match &mut self.subject {
            Subject::Op(op) => op.params_mut(&mut out),
            Subject::Edge { edge, alpha } => {
                out.push(alpha);
                edge.params_mut(&mut out);
            }
        }
        out
    }

    /// Projected scalar output and the kink margin of its computation. With
    /// `differentiate`, gradients are left in every checked tensor.
    fn evaluate(&mut self, differentiate: bool) -> Result<(f64, f64)> {
        let mut ctx = Ctx::new(Mode::Train, BnStats::Batch, seed::rng(self.mask_seed, "gradcheck.mask", 0));
        ctx.grad_weights = true;
        ctx.grad_alpha = true;
        let x = ctx.tape.watch(&mut self.x)?;
        let out = match &mut self.subject {
            Subject::Op(op) => op.forward_dense(&mut ctx, &mut NodeInput::new(x))?,
            Subject::Edge { edge, alpha } => mixed_forward(edge, &mut ctx, x, alpha)?,
        };
        let n = ctx.tape.value(out).len();
        let proj = self
            .projection
            .get_or_insert_with(|| {
                let mut rng = seed::rng(0, "gradcheck.projection", n as u64);
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .clone();
        let weighted = ctx.tape.mask_mul(out, proj)?;
        let loss = ctx.tape.sum(weighted)?;
        let value = ctx.tape.value(loss)[0];
        let margin = ctx.tape.kink_margin();
        if differentiate {
            ctx.tape.backward(loss)?;
            for t in self.tensors() {
                ctx.tape.pull_grad(t);
            }
        }
        Ok((value, margin))
    }
}

fn check_target(target: Target, run_seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let tag = format!("gradcheck.{}", target.name());
    let mut probe = None;
    for draw in 0..MAX_DRAWS {
        let mut rng = seed::rng(run_seed, &tag, draw);
        let mut p = Probe::build(target, &mut rng)?;
        if p.evaluate(false)?.1 > KINK_MARGIN {
            probe = Some(p);
            break;
        }
    }
    let mut p = probe.ok_or_else(|| {
        Error::config(format!("{}: no input within {MAX_DRAWS} draws clears the kink margin", target.name()))
    })?;
    p.evaluate(true)?;
    let analytic: Vec<Vec<f64>> = p
        .tensors()
        .iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport::default();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = p.tensors()[i].data()[e];
            p.tensors()[i].data_mut()[e] = orig + cfg.step;
            let plus = p.evaluate(false)?.0;
            p.tensors()[i].data_mut()[e] = orig - cfg.step;
            let minus = p.evaluate(false)?.0;
            p.tensors()[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

fn targets() -> Vec<Target> {
    let mut t: Vec<Target> = [1, 2]
        .into_iter()
        .flat_map(|s| OpKind::ALL.into_iter().map(move |k| Target::Op(k, s)))
        .collect();
    t.extend([Target::Edge(1), Target::Edge(2)]);
    t
}

/// Every candidate operation at strides 1 and 2 plus the mixed edge, each
/// over seeds `0..seeds`, reporting the worst error per case.
pub fn candidate_suite(seeds: u64, tolerance: f64) -> Result<Vec<CheckRow>> {
    targets()
        .into_iter()
        .map(|target| {
            let mut agg = GradCheckReport::default();
            for s in 0..seeds {
                agg.merge(&check_target(target, s, GradCheckConfig::default())?);
            }
            Ok(CheckRow {
                name: target.name(),
                seeds: seeds as usize,
                passed: agg.passes(tolerance),
                report: agg,
            })
        })
        .collect()
}

/// The tensor primitive suite followed by [`candidate_suite`].
pub fn full_suite(seeds: u64, tolerance: f64) -> Result<Vec<CheckRow>> {
    let mut rows: Vec<CheckRow> = run_suite(&primitive_cases(), seeds, tolerance)?
        .into_iter()
        .map(|r| CheckRow {
            name: r.name.to_string(),
            seeds: r.seeds,
            report: r.report,
            passed: r.passed,
        })
        .collect();
    rows.extend(candidate_suite(seeds, tolerance)?);
    Ok(rows)
}

/// Fixed-width table of suite rows, one line per case plus a header.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<34} {:>5} {:>7} {:>12} {:>12}  result\n", "case", "seeds", "checked", "max_rel_err", "max_abs_err");
    for r in rows {
        s.push_str(&format!(
            "{:<34} {:>5} {:>7} {:>12.3e} {:>12.3e}  {}\n",
            r.name,
            r.seeds,
            r.report.checked,
            r.report.max_rel_err,
            r.report.max_abs_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
