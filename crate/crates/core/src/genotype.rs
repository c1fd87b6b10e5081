//! Alpha snapshots, discrete genotypes, skip-connect refinement, file formats
//! and graph export.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::ops::{mixture_weights, param_count, OpKind};
use crate::supernet::{edge_pairs, is_reduction, AlphaTables, CandidateSpace};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on the per-edge weight sum accepted when reading a snapshot.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub stage: usize,
    pub seed: u64,
    pub plan_digest: String,
}

/// One candidate of an edge: kind, raw alpha and softmax weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpEntry(pub OpKind, pub f64, pub f64);

impl OpEntry {
    pub fn kind(&self) -> OpKind {
        self.0
    }

    pub fn alpha(&self) -> f64 {
        self.1
    }

    pub fn weight(&self) -> f64 {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeAlpha {
    pub edge: (usize, usize),
    pub ops: Vec<OpEntry>,
}

impl EdgeAlpha {
    /// Entry with the largest weight among non-zero kinds; the first in
    /// candidate order wins ties.
    pub fn best_non_zero(&self) -> Option<OpEntry> {
        let mut best: Option<OpEntry> = None;
        for e in self.ops.iter().filter(|e| e.kind() != OpKind::Zero) {
            if best.is_none_or(|b| e.weight() > b.weight()) {
                best = Some(*e);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotCells {
    pub normal: Vec<EdgeAlpha>,
    pub reduce: Vec<EdgeAlpha>,
}

/// Architecture parameters of both cell types at the end of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSnapshot {
    pub schema_version: u32,
    pub metadata: SnapshotMeta,
    pub cells: SnapshotCells,
}

impl AlphaSnapshot {
    pub fn from_tables(space: &CandidateSpace, alpha: &AlphaTables, metadata: SnapshotMeta) -> Result<Self> {
        let n = space.normal.len();
        let k = (1..=n).find(|&k| edge_pairs(k).len() == n).unwrap_or(0);
        let pairs = edge_pairs(k);
        let build = |sets: &[Vec<OpKind>], rows: &[pdarts_tensor::Tensor]| -> Result<Vec<EdgeAlpha>> {
            pairs
                .iter()
                .zip(sets.iter().zip(rows))
                .map(|(&edge, (cands, row))| {
                    let w = mixture_weights(row.data())?;
                    let ops = cands
                        .iter()
                        .zip(row.data())
                        .zip(w)
                        .map(|((&kind, &a), w)| OpEntry(kind, a, w))
                        .collect();
                    Ok(EdgeAlpha { edge, ops })
                })
                .collect()
        };
        Ok(AlphaSnapshot {
            schema_version: SCHEMA_VERSION,
            metadata,
            cells: SnapshotCells {
                normal: build(&space.normal, &alpha.normal)?,
                reduce: build(&space.reduce, &alpha.reduce)?,
            },
        })
    }

    pub fn cell(&self, cell: CellType) -> &[EdgeAlpha] {
        match cell {
            CellType::Normal => &self.cells.normal,
            CellType::Reduce => &self.cells.reduce,
        }
    }

    pub fn space(&self) -> CandidateSpace {
        let sets = |edges: &[EdgeAlpha]| edges.iter().map(|e| e.ops.iter().map(|o| o.kind()).collect()).collect();
        CandidateSpace {
            normal: sets(&self.cells.normal),
            reduce: sets(&self.cells.reduce),
        }
    }

    pub fn n_intermediate(&self) -> usize {
        intermediate_for_edges(self.cells.normal.len()).unwrap_or(0)
    }

    /// Checks the structural and numeric invariants of a snapshot.
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        for (name, edges) in [("normal", &self.cells.normal), ("reduce", &self.cells.reduce)] {
            let n = intermediate_for_edges(edges.len()).ok_or_else(|| Error::Parse {
                path: String::new(),
                field: format!("cells.{name}"),
                message: format!("{} edges do not form a complete cell", edges.len()),
            })?;
            for (e, (edge, expected)) in edges.iter().zip(edge_pairs(n)).enumerate() {
                let field = |suffix: &str| format!("cells.{name}[{e}]{suffix}");
                if edge.edge != expected {
                    return Err(Error::Parse {
                        path: String::new(),
                        field: field(".edge"),
                        message: format!("expected edge {expected:?}, found {:?}", edge.edge),
                    });
                }
                if edge.ops.is_empty() {
                    return Err(Error::Parse {
                        path: String::new(),
                        field: field(".ops"),
                        message: "edge has no candidates".into(),
                    });
                }
                let mut kinds: Vec<OpKind> = edge.ops.iter().map(|o| o.kind()).collect();
                kinds.dedup();
                if kinds.len() != edge.ops.len() || edge.ops.windows(2).any(|w| w[0].kind() >= w[1].kind()) {
                    return Err(Error::Parse {
                        path: String::new(),
                        field: field(".ops"),
                        message: "candidates must be distinct and in enumeration order".into(),
                    });
                }
                if edge.ops.iter().any(|o| !o.alpha().is_finite() || !(0.0..=1.0).contains(&o.weight())) {
                    return Err(Error::Parse {
                        path: String::new(),
                        field: field(".ops"),
                        message: "alphas must be finite and weights within [0, 1]".into(),
                    });
                }
                let sum: f64 = edge.ops.iter().map(|o| o.weight()).sum();
                if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                    return Err(Error::Parse {
                        path: String::new(),
                        field: field(".ops"),
                        message: format!("weights sum to {sum}, not 1"),
                    });
                }
            }
        }
        if self.cells.normal.len() != self.cells.reduce.len() {
            return Err(Error::Parse {
                path: String::new(),
                field: "cells".into(),
                message: "normal and reduction cells differ in size".into(),
            });
        }
        Ok(())
    }
}

fn intermediate_for_edges(n_edges: usize) -> Option<usize> {
    (2..=n_edges).find(|&k| edge_pairs(k).len() == n_edges)
}

fn check_schema(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: String::new(),
            field: "schema_version".into(),
            message: format!("unsupported schema version {version}, expected {SCHEMA_VERSION}"),
        });
    }
    Ok(())
}

/// A selected (operation, source state) pair.
pub type Pair = (OpKind, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub plan_digest: String,
    pub stage: usize,
}

/// Discrete cells: for intermediate node `j` (state `j + 2`), two pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    pub normal: Vec<[Pair; 2]>,
    pub reduce: Vec<[Pair; 2]>,
    pub concat: Vec<usize>,
    pub provenance: Provenance,
}

impl Genotype {
    pub fn new(normal: Vec<[Pair; 2]>, reduce: Vec<[Pair; 2]>, provenance: Provenance) -> Self {
        let concat = (2..2 + normal.len()).collect();
        Genotype {
            schema_version: SCHEMA_VERSION,
            normal,
            reduce,
            concat,
            provenance,
        }
    }

    pub fn cell(&self, cell: CellType) -> &[[Pair; 2]] {
        match cell {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn skip_count(&self, cell: CellType) -> usize {
        self.cell(cell)
            .iter()
            .flatten()
            .filter(|p| p.0 == OpKind::SkipConnect)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        let bad = |field: String, message: String| Error::Parse {
            path: String::new(),
            field,
            message,
        };
        if self.normal.len() < 2 || self.normal.len() != self.reduce.len() {
            return Err(bad(
                "normal".into(),
                "both cells need the same number (at least 2) of intermediate nodes".into(),
            ));
        }
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (j, pairs) in cell.iter().enumerate() {
                for (p, &(op, from)) in pairs.iter().enumerate() {
                    if op == OpKind::Zero {
                        return Err(bad(format!("{name}[{j}][{p}]"), "zero is not a valid selection".into()));
                    }
                    if from >= j + 2 {
                        return Err(bad(
                            format!("{name}[{j}][{p}]"),
                            format!("node {} cannot read state {from}", j + 2),
                        ));
                    }
                }
                if pairs[0].1 == pairs[1].1 {
                    return Err(bad(
                        format!("{name}[{j}]"),
                        "the two pairs of a node must read distinct states".into(),
                    ));
                }
            }
        }
        let n = self.normal.len();
        if self.concat.is_empty() || self.concat.iter().any(|&c| c < 2 || c >= n + 2) {
            return Err(bad("concat".into(), format!("concat must list states within 2..{}", n + 2)));
        }
        Ok(())
    }
}

/// Two best non-zero pairs per intermediate node of one cell.
pub fn derive_cell(edges: &[EdgeAlpha]) -> Result<Vec<[Pair; 2]>> {
    let n = intermediate_for_edges(edges.len())
        .ok_or_else(|| Error::Degenerate(format!("{} edges do not form a complete cell", edges.len())))?;
    let mut nodes = Vec::with_capacity(n);
    for j in 2..n + 2 {
        let mut ranked: Vec<(f64, usize, OpKind)> = edges
            .iter()
            .filter(|e| e.edge.1 == j)
            .filter_map(|e| e.best_non_zero().map(|b| (b.weight(), e.edge.0, b.kind())))
            .collect();
        if ranked.len() < 2 {
            return Err(Error::Degenerate(format!(
                "node {j} has {} incoming edges with a non-zero candidate, needs 2",
                ranked.len()
            )));
        }
        // Highest weight first; equal weights keep the lower source first.
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        nodes.push([(ranked[0].2, ranked[0].1), (ranked[1].2, ranked[1].1)]);
    }
    Ok(nodes)
}

/// Discrete genotype of a snapshot: per node, the two incoming edges whose
/// best non-zero candidate weighs most.
pub fn derive(snapshot: &AlphaSnapshot) -> Result<Genotype> {
    Ok(Genotype::new(
        derive_cell(&snapshot.cells.normal)?,
        derive_cell(&snapshot.cells.reduce)?,
        provenance(&snapshot.metadata),
    ))
}

fn provenance(m: &SnapshotMeta) -> Provenance {
    Provenance {
        seed: m.seed,
        plan_digest: m.plan_digest.clone(),
        stage: m.stage,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineStep {
    /// Normal-cell skip count of this derivation.
    pub skip_count: usize,
    /// Edges whose skip weight was zeroed after this derivation.
    pub zeroed: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub genotype: Genotype,
    /// One entry per derivation, in order.
    pub trace: Vec<RefineStep>,
    /// Number of (edge, skip_connect) candidates in the normal cell.
    pub skip_candidates: usize,
}

impl Refinement {
    pub fn derivations(&self) -> usize {
        self.trace.len()
    }

    /// Derivations that exceeded the cap and zeroed skip weights.
    pub fn rounds(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

/// Caps the normal cell at `max_skips` skip connections.
///
/// Repeatedly derives the normal cell; while it holds more than `max_skips`
/// skips, keeps the `max_skips` heaviest of them (earlier edges win ties) and
/// zeroes the skip weight of every other skip edge in the topology, on a
/// working copy. The reduction cell is derived once from the original
/// snapshot. Fewer skips than `max_skips` is accepted as is.
pub fn refine_skip_count(snapshot: &AlphaSnapshot, max_skips: usize) -> Result<Refinement> {
    let reduce = derive_cell(&snapshot.cells.reduce)?;
    let mut work = snapshot.cells.normal.clone();
    let skip_candidates = work
        .iter()
        .filter(|e| e.ops.iter().any(|o| o.kind() == OpKind::SkipConnect))
        .count();
    let mut trace = Vec::new();
    loop {
        let normal = derive_cell(&work)?;
        let mut skips: Vec<(f64, (usize, usize))> = normal
            .iter()
            .enumerate()
            .flat_map(|(j, pairs)| pairs.iter().map(move |p| (j, p)))
            .filter(|(_, p)| p.0 == OpKind::SkipConnect)
            .map(|(j, p)| {
                let edge = (p.1, j + 2);
                (skip_weight(&work, edge), edge)
            })
            .collect();
        if skips.len() <= max_skips {
            trace.push(RefineStep {
                skip_count: skips.len(),
                zeroed: Vec::new(),
            });
            return Ok(Refinement {
                genotype: Genotype::new(normal, reduce, provenance(&snapshot.metadata)),
                trace,
                skip_candidates,
            });
        }
        if trace.len() > skip_candidates {
            return Err(Error::Degenerate(format!(
                "skip refinement did not reach {max_skips} skips within {} derivations",
                trace.len()
            )));
        }
        skips.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1 .1, a.1 .0).cmp(&(b.1 .1, b.1 .0))));
        let zeroed: Vec<(usize, usize)> = skips[max_skips..].iter().map(|s| s.1).collect();
        for edge in &zeroed {
            let e = work.iter_mut().find(|e| e.edge == *edge).expect("edge from the same cell");
            for o in e.ops.iter_mut().filter(|o| o.kind() == OpKind::SkipConnect) {
                o.2 = 0.0;
            }
        }
        trace.push(RefineStep {
            skip_count: skips.len(),
            zeroed,
        });
    }
}

fn skip_weight(edges: &[EdgeAlpha], edge: (usize, usize)) -> f64 {
    edges
        .iter()
        .find(|e| e.edge == edge)
        .and_then(|e| e.ops.iter().find(|o| o.kind() == OpKind::SkipConnect))
        .map_or(0.0, |o| o.weight())
}

/// Geometry needed to count the parameters of an evaluation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalGeometry {
    pub in_channels: usize,
    pub num_classes: usize,
    pub init_channels: usize,
    pub depth: usize,
    pub stem_multiplier: usize,
}

/// Parameter count of the discrete network built from `genotype`, from the
/// per-layer formulas.
pub fn count_parameters(genotype: &Genotype, g: EvalGeometry) -> usize {
    let c = g.init_channels;
    let c_stem = g.stem_multiplier * c;
    let mut total = g.in_channels * c_stem * 9 + 2 * c_stem;
    let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
    let mut reduction_prev = false;
    for i in 0..g.depth {
        let reduction = is_reduction(i, g.depth);
        if reduction {
            c_cur *= 2;
        }
        total += if reduction_prev {
            c_pp * (c_cur / 2) + c_pp * (c_cur - c_cur / 2) + 2 * c_cur
        } else {
            c_pp * c_cur + 2 * c_cur
        };
        total += c_p * c_cur + 2 * c_cur;
        let cell = if reduction { &genotype.reduce } else { &genotype.normal };
        for &(op, from) in cell.iter().flatten() {
            let stride = if reduction && from < 2 { 2 } else { 1 };
            total += param_count(op, c_cur, stride);
        }
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = genotype.concat.len() * c_cur;
    }
    total + c_p * g.num_classes + g.num_classes
}

/// DOT description of one cell of `genotype`.
pub fn export_graph(genotype: &Genotype, cell: CellType) -> String {
    let name = |state: usize| match state {
        0 => "\"c_{k-2}\"".to_string(),
        1 => "\"c_{k-1}\"".to_string(),
        s => format!("\"{}\"", s - 2),
    };
    let pairs = genotype.cell(cell);
    let mut out = String::new();
    let title = match cell {
        CellType::Normal => "normal",
        CellType::Reduce => "reduce",
    };
    writeln!(out, "digraph {title} {{").unwrap();
    writeln!(out, "  rankdir=LR;").unwrap();
    writeln!(out, "  node [fontname=\"helvetica\"];").unwrap();
    writeln!(out, "  edge [fontname=\"helvetica\"];").unwrap();
    for s in 0..2 {
        writeln!(out, "  {} [shape=box];", name(s)).unwrap();
    }
    for j in 0..pairs.len() {
        writeln!(out, "  {} [shape=circle];", name(j + 2)).unwrap();
    }
    writeln!(out, "  \"output\" [shape=box];").unwrap();
    for (j, node) in pairs.iter().enumerate() {
        for &(op, from) in node {
            writeln!(out, "  {} -> {} [label=\"{}\"];", name(from), name(j + 2), op).unwrap();
        }
    }
    for &s in &genotype.concat {
        writeln!(out, "  {} -> \"output\";", name(s)).unwrap();
    }
    out.push_str("}\n");
    out
}

/// Pretty JSON whose floats carry 17 significant digits.
struct FloatFormatter(PrettyFormatter<'static>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl Formatter for FloatFormatter {
    delegate! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        begin_object_value();
        end_object_value();
    }

    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes `value` as pretty JSON with 17-significant-digit floats.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FloatFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Error::Parse {
        path: String::new(),
        field: String::new(),
        message: e.to_string(),
    })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

/// Parses JSON, reporting the path of the offending field on failure.
pub fn from_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: origin.to_string(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn with_origin(e: Error, origin: &str) -> Error {
    match e {
        Error::Parse { field, message, .. } => Error::Parse {
            path: origin.to_string(),
            field,
            message,
        },
        other => other,
    }
}

impl AlphaSnapshot {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let s: Self = from_json(text, origin)?;
        s.validate().map_err(|e| with_origin(e, origin))?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

impl Genotype {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let g: Self = from_json(text, origin)?;
        g.validate().map_err(|e| with_origin(e, origin))?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
