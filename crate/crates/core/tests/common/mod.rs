//! Shared generators and independent reference implementations.
#![allow(dead_code)]

use pdarts::genotype::{AlphaSnapshot, EdgeAlpha, Genotype, OpEntry, SnapshotCells, SnapshotMeta, SCHEMA_VERSION};
use pdarts::nn::{BnStats, Ctx, Mode};
use pdarts::ops::{Candidate, NodeInput, OpKind};
use pdarts_tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax written out directly with a max shift.
pub fn softmax(alpha: &[f64]) -> Vec<f64> {
    let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Edges `(i, j)` of a cell with `n` intermediate nodes, grouped by target.
pub fn edges(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 2..n + 2 {
        for i in 0..j {
            out.push((i, j));
        }
    }
    out
}

/// Random candidate subset in enumeration order. With `with_skip`, skip is
/// always present, together with at least one other non-zero kind.
pub fn random_subset(r: &mut ChaCha8Rng, size: usize, with_skip: bool) -> Vec<OpKind> {
    loop {
        let mut idx = sample(r, OpKind::ALL.len(), size).into_vec();
        idx.sort_unstable();
        let kinds: Vec<OpKind> = idx.into_iter().map(|i| OpKind::ALL[i]).collect();
        let others = kinds
            .iter()
            .filter(|k| **k != OpKind::Zero && **k != OpKind::SkipConnect)
            .count();
        if others >= 1 && (!with_skip || kinds.contains(&OpKind::SkipConnect)) {
            return kinds;
        }
    }
}

pub fn edge_alpha(edge: (usize, usize), kinds: &[OpKind], alpha: &[f64]) -> EdgeAlpha {
    let w = softmax(alpha);
    EdgeAlpha {
        edge,
        ops: kinds
            .iter()
            .zip(alpha)
            .zip(w)
            .map(|((&k, &a), w)| OpEntry(k, a, w))
            .collect(),
    }
}

/// Random snapshot with 4 intermediate nodes. `budget` candidates per edge
/// (the full set when 8); `skip_bias` is added to skip alphas.
pub fn random_snapshot(seed: u64, budget: usize, skip_bias: f64) -> AlphaSnapshot {
    let mut r = rng(seed);
    let cell = |r: &mut ChaCha8Rng| -> Vec<EdgeAlpha> {
        edges(4)
            .into_iter()
            .map(|e| {
                let kinds = if budget == OpKind::ALL.len() {
                    OpKind::ALL.to_vec()
                } else {
                    random_subset(r, budget, skip_bias > 0.0)
                };
                let alpha: Vec<f64> = kinds
                    .iter()
                    .map(|k| {
                        let a: f64 = r.sample(StandardNormal);
                        if *k == OpKind::SkipConnect {
                            a + skip_bias
                        } else {
                            a
                        }
                    })
                    .collect();
                edge_alpha(e, &kinds, &alpha)
            })
            .collect()
    };
    let normal = cell(&mut r);
    let reduce = cell(&mut r);
    AlphaSnapshot {
        schema_version: SCHEMA_VERSION,
        metadata: SnapshotMeta {
            stage: 1,
            seed,
            plan_digest: "test".into(),
        },
        cells: SnapshotCells { normal, reduce },
    }
}

/// Exhaustive derivation of one cell: for each node, the best of all pairs
/// of non-zero (edge, op) choices on distinct edges, ordered by weight.
pub fn derive_cell_oracle(edges: &[EdgeAlpha]) -> Vec<[(OpKind, usize); 2]> {
    let n_nodes = edges.iter().map(|e| e.edge.1).max().unwrap() - 1;
    let mut cell = Vec::new();
    for j in 2..n_nodes + 2 {
        let choices: Vec<(f64, usize, OpKind)> = edges
            .iter()
            .filter(|e| e.edge.1 == j)
            .flat_map(|e| {
                e.ops
                    .iter()
                    .filter(|o| o.kind() != OpKind::Zero)
                    .map(move |o| (o.weight(), e.edge.0, o.kind()))
            })
            .collect();
        let mut best: Option<((f64, usize, OpKind), (f64, usize, OpKind))> = None;
        for a in &choices {
            for b in &choices {
                if a.1 == b.1 || a.0 < b.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((ba, bb)) => (a.0, b.0) > (ba.0, bb.0),
                };
                if better {
                    best = Some((*a, *b));
                }
            }
        }
        let (a, b) = best.expect("every node has two non-zero edges");
        cell.push([(a.2, a.1), (b.2, b.1)]);
    }
    cell
}

/// Step-by-step simulation of skip refinement: returns the final normal
/// cell and, per derivation, the skip count and the zeroed edges.
pub fn refine_oracle(snapshot: &AlphaSnapshot, m: usize) -> (Vec<[(OpKind, usize); 2]>, Vec<(usize, Vec<(usize, usize)>)>) {
    let mut work = snapshot.cells.normal.clone();
    let mut trace = Vec::new();
    loop {
        let cell = derive_cell_oracle(&work);
        let mut skips = Vec::new();
        for (j, node) in cell.iter().enumerate() {
            for &(op, from) in node {
                if op == OpKind::SkipConnect {
                    let edge = (from, j + 2);
                    let w = work
                        .iter()
                        .find(|e| e.edge == edge)
                        .unwrap()
                        .ops
                        .iter()
                        .find(|o| o.kind() == OpKind::SkipConnect)
                        .unwrap()
                        .weight();
                    skips.push((w, edge));
                }
            }
        }
        if skips.len() <= m {
            trace.push((skips.len(), Vec::new()));
            return (cell, trace);
        }
        // Keep the m heaviest skips; among equal weights the edge that comes
        // first in (target, source) order survives.
        let mut keep_order: Vec<usize> = (0..skips.len()).collect();
        keep_order.sort_by(|&a, &b| {
            let (wa, ea) = skips[a];
            let (wb, eb) = skips[b];
            wb.partial_cmp(&wa).unwrap().then((ea.1, ea.0).cmp(&(eb.1, eb.0)))
        });
        let zeroed: Vec<(usize, usize)> = keep_order[m..].iter().map(|&i| skips[i].1).collect();
        for edge in &zeroed {
            for e in work.iter_mut().filter(|e| e.edge == *edge) {
                for o in e.ops.iter_mut().filter(|o| o.kind() == OpKind::SkipConnect) {
                    o.2 = 0.0;
                }
            }
        }
        trace.push((skips.len(), zeroed));
    }
}

pub fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> pdarts_tensor::Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    pdarts_tensor::Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn ctx() -> Ctx {
    Ctx::new(Mode::Train, BnStats::Batch, rng(99))
}

/// Output of a single candidate on a constant input, computed in isolation.
pub fn branch(op: &mut Candidate, x: &Tensor) -> Vec<f64> {
    let mut c = ctx();
    let v = c.tape.constant(x.shape().to_vec(), x.data().to_vec()).unwrap();
    let y = op.forward_dense(&mut c, &mut NodeInput::new(v)).unwrap();
    c.tape.value(y).to_vec()
}

pub fn weighted_branches(ops: &mut [Candidate], w: &[f64], x: &Tensor) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for (op, &wk) in ops.iter_mut().zip(w) {
        let y = branch(op, x);
        let acc = acc.get_or_insert_with(|| vec![0.0; y.len()]);
        for (a, v) in acc.iter_mut().zip(y) {
            *a += wk * v;
        }
    }
    acc.unwrap()
}

/// Top-`keep` candidates by a full descending sort of (weight, -index).
pub fn top_k_oracle(edge: &EdgeAlpha, keep: usize) -> Vec<OpKind> {
    let mut all: Vec<(f64, usize, OpKind)> = edge.ops.iter().map(|o| (o.weight(), o.kind().index(), o.kind())).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let better = all[j].0 > all[i].0 || (all[j].0 == all[i].0 && all[j].1 < all[i].1);
            if better {
                all.swap(i, j);
            }
        }
    }
    let mut kept: Vec<(usize, OpKind)> = all[..keep].iter().map(|t| (t.1, t.2)).collect();
    kept.sort_by_key(|t| t.0);
    kept.into_iter().map(|t| t.1).collect()
}

/// Weights of one operation, counted from its layer list: depthwise `k x k`,
/// pointwise `c x c` and a two-parameter BN per stack.
pub fn op_params_oracle(kind: OpKind, c: usize, stride: usize) -> usize {
    let stack = |k: usize| k * k * c + c * c + 2 * c;
    match (kind, stride) {
        (OpKind::SkipConnect, 2) => {
            let half = c / 2;
            c * half + c * (c - half) + 2 * c
        }
        (OpKind::SepConv3x3, _) => stack(3) + stack(3),
        (OpKind::SepConv5x5, _) => stack(5) + stack(5),
        (OpKind::DilConv3x3, _) => stack(3),
        (OpKind::DilConv5x5, _) => stack(5),
        _ => 0,
    }
}

/// Weights of an evaluation network, layer by layer: stem, per-cell
/// preprocessing and operations, classifier.
pub fn eval_census_oracle(g: &Genotype, in_channels: usize, classes: usize, init_channels: usize, depth: usize) -> usize {
    let stem = 3 * init_channels;
    let mut total = in_channels * stem * 9 + 2 * stem;
    let reductions = [depth / 3, 2 * depth / 3];
    let mut states = (stem, stem);
    let mut c = init_channels;
    for i in 0..depth {
        let reduce = reductions.contains(&i);
        let prev_reduce = i > 0 && reductions.contains(&(i - 1));
        if reduce {
            c *= 2;
        }
        let (c_pp, c_p) = states;
        total += if prev_reduce {
            c_pp * (c / 2) + c_pp * (c - c / 2) + 2 * c
        } else {
            c_pp * c + 2 * c
        };
        total += c_p * c + 2 * c;
        let cell = if reduce { &g.reduce } else { &g.normal };
        for &(op, from) in cell.iter().flatten() {
            total += op_params_oracle(op, c, if reduce && from < 2 { 2 } else { 1 });
        }
        states = (c_p, g.concat.len() * c);
    }
    total + states.1 * classes + classes
}
