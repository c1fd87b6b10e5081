//! The search network: stem, stacked mixed cells, classifier, shared alphas.

use pdarts_tensor::{Conv2dSpec, Tensor, VarId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, FactorizedReduce, Linear, Module, ReluConvBn};
use crate::ops::{mixture_weights, EdgeState, NodeInput, OpKind};

/// Geometry shared by search and evaluation networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub init_channels: usize,
    #[serde(default = "default_intermediate")]
    pub n_intermediate: usize,
    #[serde(default = "default_stem_multiplier")]
    pub stem_multiplier: usize,
}

fn default_intermediate() -> usize {
    4
}

fn default_stem_multiplier() -> usize {
    3
}

impl NetworkConfig {
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        NetworkConfig {
            in_channels,
            num_classes,
            image_size: 16,
            init_channels: 8,
            n_intermediate: 4,
            stem_multiplier: 3,
        }
    }

    /// Rejects geometries whose spatial size cannot be halved twice cleanly.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if depth < 3 {
            return Err(Error::config(format!(
                "depth {depth} leaves no room for two distinct reduction cells (need at least 3)"
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.init_channels == 0 {
            return Err(Error::config("channel and class counts must be positive"));
        }
        if self.n_intermediate < 2 {
            return Err(Error::config("cells need at least two intermediate nodes"));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 4 to survive two reductions",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        edge_pairs(self.n_intermediate).len()
    }
}

/// Edges of a cell as (source state, target state) pairs. States 0 and 1 are
/// the two cell inputs; intermediate node `j` is state `j + 2`.
pub fn edge_pairs(n_intermediate: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..n_intermediate {
        for i in 0..j + 2 {
            out.push((i, j + 2));
        }
    }
    out
}

pub fn is_reduction(index: usize, depth: usize) -> bool {
    index == depth / 3 || index == 2 * depth / 3
}

/// Candidate operations per edge, for both cell types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSpace {
    pub normal: Vec<Vec<OpKind>>,
    pub reduce: Vec<Vec<OpKind>>,
}

impl CandidateSpace {
    pub fn full(n_edges: usize) -> Self {
        CandidateSpace {
            normal: vec![OpKind::ALL.to_vec(); n_edges],
            reduce: vec![OpKind::ALL.to_vec(); n_edges],
        }
    }

    pub fn uniform_size(&self) -> Option<usize> {
        let n = self.normal.first()?.len();
        self.normal
            .iter()
            .chain(&self.reduce)
            .all(|c| c.len() == n)
            .then_some(n)
    }
}

#[derive(Debug, Clone)]
pub enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn forward(&mut self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        match self {
            Preprocess::Conv(p) => p.forward(ctx, x),
            Preprocess::Reduce(p) => p.forward(ctx, x),
        }
    }
}

impl Module for Preprocess {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Preprocess::Conv(p) => p.params_mut(out),
            Preprocess::Reduce(p) => p.params_mut(out),
        }
    }
}

/// One cell of mixed edges.
#[derive(Debug, Clone)]
pub struct SearchCell {
    pub reduction: bool,
    pub channels: usize,
    pub n_intermediate: usize,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    pub edges: Vec<EdgeState>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        n_intermediate: usize,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction: bool,
        reduction_prev: bool,
        candidates: &[Vec<OpKind>],
    ) -> Result<Self> {
        let pairs = edge_pairs(n_intermediate);
        if candidates.len() != pairs.len() {
            return Err(Error::config(format!(
                "{} candidate sets for a cell with {} edges",
                candidates.len(),
                pairs.len()
            )));
        }
        let pre0 = if reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(rng, c_prev_prev, channels, false))
        } else {
            Preprocess::Conv(ReluConvBn::new(rng, c_prev_prev, channels, false))
        };
        let pre1 = ReluConvBn::new(rng, c_prev, channels, false);
        let edges = pairs
            .iter()
            .zip(candidates)
            .map(|(&(i, j), cands)| {
                let stride = if reduction && i < 2 { 2 } else { 1 };
                EdgeState::new(rng, (i, j), channels, stride, cands)
            })
            .collect::<Result<_>>()?;
        Ok(SearchCell {
            reduction,
            channels,
            n_intermediate,
            pre0,
            pre1,
            edges,
        })
    }

    /// Intermediate node values: each node sums its incoming mixed edges.
    /// `s0`, `s1` are the already preprocessed cell inputs.
    pub fn node_aggregate(&mut self, ctx: &mut Ctx, s0: VarId, s1: VarId, weights: &[VarId]) -> Result<Vec<VarId>> {
        let mut states = vec![NodeInput::new(s0), NodeInput::new(s1)];
        let mut nodes = Vec::with_capacity(self.n_intermediate);
        let mut e = 0;
        for j in 0..self.n_intermediate {
            let mut terms = Vec::with_capacity(j + 2);
            for state in states.iter_mut().take(j + 2) {
                let edge = &mut self.edges[e];
                terms.push((edge.from, edge.to, edge.forward(ctx, state, weights[e])?));
                e += 1;
            }
            let first_shape = ctx.tape.shape(terms[0].2).to_vec();
            if let Some(&(from, to, v)) = terms.iter().find(|t| ctx.tape.shape(t.2) != first_shape) {
                return Err(Error::Edge {
                    from,
                    to,
                    reason: format!("output shape {:?} differs from {:?}", ctx.tape.shape(v), first_shape),
                });
            }
            let ids: Vec<VarId> = terms.iter().map(|t| t.2).collect();
            let node = ctx.tape.add_n(&ids)?;
            nodes.push(node);
            states.push(NodeInput::new(node));
        }
        Ok(nodes)
    }

    pub fn forward(&mut self, ctx: &mut Ctx, c0: VarId, c1: VarId, weights: &[VarId]) -> Result<VarId> {
        let s0 = self.pre0.forward(ctx, c0)?;
        let s1 = self.pre1.forward(ctx, c1)?;
        let nodes = self.node_aggregate(ctx, s0, s1, weights)?;
        Ok(ctx.tape.concat_channels(&nodes)?)
    }

    pub fn set_skip_dropout(&mut self, rate: f64) {
        for e in &mut self.edges {
            e.skip_dropout_rate = rate;
        }
    }
}

impl Module for SearchCell {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.pre0.params_mut(out);
        self.pre1.params_mut(out);
        for e in &mut self.edges {
            e.params_mut(out);
        }
    }
}

/// Architecture parameters: one row per edge for each cell type.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaTables {
    pub normal: Vec<Tensor>,
    pub reduce: Vec<Tensor>,
}

impl AlphaTables {
    pub fn zeros(space: &CandidateSpace) -> Self {
        let rows = |sets: &[Vec<OpKind>]| sets.iter().map(|c| Tensor::zeros(vec![c.len()])).collect();
        AlphaTables {
            normal: rows(&space.normal),
            reduce: rows(&space.reduce),
        }
    }

    /// All alpha values, normal rows first, for bit-level comparison.
    pub fn flat(&self) -> Vec<f64> {
        self.normal
            .iter()
            .chain(&self.reduce)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.normal.iter_mut().chain(self.reduce.iter_mut()).collect()
    }
}

/// Stack of search cells of a given depth sharing two alpha tables.
#[derive(Debug, Clone)]
pub struct SearchNetwork {
    pub config: NetworkConfig,
    pub depth: usize,
    pub space: CandidateSpace,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub cells: Vec<SearchCell>,
    pub classifier: Linear,
    pub alpha: AlphaTables,
}

impl SearchNetwork {
    /// Fresh network of `depth` cells restricted to `space`, with newly
    /// initialized weights and all-zero alphas.
    pub fn new(config: &NetworkConfig, depth: usize, space: &CandidateSpace, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(depth)?;
        let n_edges = config.n_edges();
        if space.normal.len() != n_edges || space.reduce.len() != n_edges {
            return Err(Error::config(format!("candidate space must list {n_edges} edges per cell type")));
        }
        let c = config.init_channels;
        let c_stem = config.stem_multiplier * c;
        let stem = Conv2d::new(
            rng,
            config.in_channels,
            c_stem,
            3,
            Conv2dSpec {
                padding: 1,
                ..Default::default()
            },
        );
        let stem_bn = BatchNorm::new(c_stem, true, false);
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
        let mut cells = Vec::with_capacity(depth);
        let mut reduction_prev = false;
        for i in 0..depth {
            let reduction = is_reduction(i, depth);
            if reduction {
                c_cur *= 2;
            }
            let sets = if reduction { &space.reduce } else { &space.normal };
            cells.push(SearchCell::new(
                rng,
                config.n_intermediate,
                c_pp,
                c_p,
                c_cur,
                reduction,
                reduction_prev,
                sets,
            )?);
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = config.n_intermediate * c_cur;
        }
        let classifier = Linear::new(rng, c_p, config.num_classes);
        Ok(SearchNetwork {
            config: config.clone(),
            depth,
            space: space.clone(),
            stem,
            stem_bn,
            cells,
            classifier,
            alpha: AlphaTables::zeros(space),
        })
    }

    pub fn forward(&mut self, ctx: &mut Ctx, images: VarId) -> Result<VarId> {
        let weights_normal = edge_weights(ctx, &mut self.alpha.normal)?;
        let weights_reduce = edge_weights(ctx, &mut self.alpha.reduce)?;
        let s = self.stem.forward(ctx, images)?;
        let s = self.stem_bn.forward(ctx, s)?;
        let (mut c0, mut c1) = (s, s);
        for cell in &mut self.cells {
            let w = if cell.reduction { &weights_reduce } else { &weights_normal };
            let out = cell.forward(ctx, c0, c1, w)?;
            c0 = c1;
            c1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(c1)?;
        self.classifier.forward(ctx, pooled)
    }

    pub fn set_skip_dropout(&mut self, rate: f64) {
        for cell in &mut self.cells {
            cell.set_skip_dropout(rate);
        }
    }

    /// Number of learnable operation weights (alphas excluded).
    pub fn weight_count(&mut self) -> usize {
        self.num_params()
    }
}

impl Module for SearchNetwork {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.stem.params_mut(out);
        self.stem_bn.params_mut(out);
        for c in &mut self.cells {
            c.params_mut(out);
        }
        self.classifier.params_mut(out);
    }
}

/// Records every row of an alpha table and takes its softmax once.
fn edge_weights(ctx: &mut Ctx, rows: &mut [Tensor]) -> Result<Vec<VarId>> {
    rows.iter_mut()
        .map(|row| {
            mixture_weights(row.data())?;
            let a = ctx.alpha(row)?;
            Ok(ctx.tape.softmax(a)?)
        })
        .collect()
}

/// Builds the network for the next stage: fresh weights, the surviving
/// candidates only, alphas reset to zero.
pub fn rebuild_for_stage(
    config: &NetworkConfig,
    depth: usize,
    surviving: &CandidateSpace,
    rng: &mut ChaCha8Rng,
) -> Result<SearchNetwork> {
    for (cell, sets) in [("normal", &surviving.normal), ("reduce", &surviving.reduce)] {
        if let Some(e) = sets.iter().position(Vec::is_empty) {
            let (from, to) = edge_pairs(config.n_intermediate)[e];
            return Err(Error::Edge {
                from,
                to,
                reason: format!("{cell} cell: empty surviving candidate set"),
            });
        }
    }
    SearchNetwork::new(config, depth, surviving, rng)
}
