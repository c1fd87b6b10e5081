//! Diagnostic studies built from the search and evaluation pieces.

use log::info;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LoadedData};
use crate::error::{Error, Result};
use crate::eval::{build_eval_network, train_eval, EvalConfig, InputSpec};
use crate::genotype::{count_parameters, derive, refine_skip_count, AlphaSnapshot, CellType, Genotype};
use crate::ops::OpKind;
use crate::search::{approximate_space, run_progressive_search, run_stage, OptimizerConfig, SearchData, StagePlan, StageTag};
use crate::seed;
use crate::supernet::{rebuild_for_stage, CandidateSpace, NetworkConfig};

/// Candidate sets of the given per-edge size drawn uniformly from all eight
/// operations, listed in enumeration order.
pub fn random_space(n_edges: usize, size: usize, run_seed: u64, repeat: u64) -> Result<CandidateSpace> {
    if size == 0 || size > OpKind::ALL.len() {
        return Err(Error::config(format!("cannot sample {size} of {} operations", OpKind::ALL.len())));
    }
    let mut rng = seed::rng(run_seed, "random_space", repeat);
    let mut draw = || -> Vec<OpKind> {
        let mut idx = sample(&mut rng, OpKind::ALL.len(), size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| OpKind::ALL[i]).collect()
    };
    let normal = (0..n_edges).map(|_| draw()).collect();
    let reduce = (0..n_edges).map(|_| draw()).collect();
    Ok(CandidateSpace { normal, reduce })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSpaceRow {
    pub seed: u64,
    pub arm: String,
    pub repeat: usize,
    pub test_error: f64,
    /// Whether this row is the arm's reported result for the seed.
    pub selected: bool,
}

pub const RANDOM_SPACE_HEADER: &str = "seed,arm,repeat,test_error,selected";

impl RandomSpaceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.17e},{}",
            self.seed, self.arm, self.repeat, self.test_error, self.selected
        )
    }
}

/// Everything the random-space and ablation studies share.
#[derive(Debug, Clone, Copy)]
pub struct StudySetup<'a> {
    pub network: &'a NetworkConfig,
    pub plan: &'a StagePlan,
    pub optimizer: &'a OptimizerConfig,
    pub data: &'a LoadedData,
    pub split: &'a crate::data::SearchSplit,
}

fn search_data<'a>(s: &StudySetup<'a>) -> SearchData<'a> {
    SearchData {
        train: &s.data.train,
        split: s.split,
    }
}

/// Trains an evaluation network for `genotype` and returns its final test error.
pub fn evaluate_genotype(genotype: &Genotype, train: &Dataset, test: &Dataset, cfg: &EvalConfig, run_seed: u64) -> Result<f64> {
    let mut net = build_eval_network(genotype, InputSpec::of(train), cfg, run_seed)?;
    Ok(train_eval(&mut net, train, test, cfg, run_seed)?.final_test_error())
}

/// Final stage on the approximated candidate sets versus on uniformly drawn
/// sets of the same size. The random arm is repeated `repeats` times per seed
/// and its best result reported.
pub fn experiment_random_space(
    setup: &StudySetup<'_>,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
    repeats: usize,
) -> Result<Vec<RandomSpaceRow>> {
    let k = setup.plan.stages.len();
    if k < 2 {
        return Err(Error::config("the random-space comparison needs at least two stages"));
    }
    let last = &setup.plan.stages[k - 1];
    let head = StagePlan {
        stages: setup.plan.stages[..k - 1].to_vec(),
    };
    let digest = setup.plan.digest();
    let mut rows = Vec::new();
    for &s in seeds {
        let early = run_progressive_search(setup.network, &head, setup.optimizer, search_data(setup), s, |_| Ok(()))?;
        let approx = approximate_space(early.final_snapshot(), last.op_budget)?;
        let final_stage = |space: &CandidateSpace, arm: &str, repeat: usize| -> Result<f64> {
            let mut rng = seed::rng(s, &format!("random_space.init.{arm}"), repeat as u64);
            let mut net = rebuild_for_stage(setup.network, last.depth, space, &mut rng)?;
            let tag = StageTag {
                stage: k,
                seed: s,
                plan_digest: digest.clone(),
            };
            let outcome = run_stage(&mut net, last, search_data(setup), setup.optimizer, &tag)?;
            let genotype = derive(&outcome.snapshot)?;
            evaluate_genotype(&genotype, &setup.data.train, &setup.data.test, eval_cfg, s)
        };
        let err = final_stage(&approx, "approximated", 0)?;
        rows.push(RandomSpaceRow {
            seed: s,
            arm: "approximated".into(),
            repeat: 0,
            test_error: err,
            selected: true,
        });
        let first = rows.len();
        for r in 0..repeats {
            let space = random_space(setup.network.n_edges(), last.op_budget, s, r as u64)?;
            let err = final_stage(&space, "random", r)?;
            rows.push(RandomSpaceRow {
                seed: s,
                arm: "random".into(),
                repeat: r,
                test_error: err,
                selected: false,
            });
        }
        if let Some(best) = (first..rows.len()).min_by(|&a, &b| rows[a].test_error.total_cmp(&rows[b].test_error)) {
            rows[best].selected = true;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipSweepRow {
    pub m_skip: usize,
    pub skip_count: usize,
    pub param_count: usize,
    pub test_error: Option<f64>,
}

pub const SKIP_SWEEP_HEADER: &str = "m_skip,skip_count,param_count,test_error";

impl SkipSweepRow {
    pub fn csv(&self) -> String {
        let err = self.test_error.map(|e| format!("{e:.17e}")).unwrap_or_default();
        format!("{},{},{},{}", self.m_skip, self.skip_count, self.param_count, err)
    }
}

/// Refines one snapshot at every cap in `m_values` and reports the achieved
/// skip count, parameter count and, when `eval` is given, the test error.
pub fn experiment_skip_sweep(
    snapshot: &AlphaSnapshot,
    m_values: &[usize],
    input: InputSpec,
    eval_cfg: &EvalConfig,
    eval: Option<(&Dataset, &Dataset)>,
    run_seed: u64,
) -> Result<Vec<SkipSweepRow>> {
    m_values
        .iter()
        .map(|&m| {
            let refined = refine_skip_count(snapshot, m)?;
            let g = refined.genotype;
            let geometry = crate::genotype::EvalGeometry {
                in_channels: input.channels,
                num_classes: input.classes,
                init_channels: eval_cfg.init_channels,
                depth: eval_cfg.depth,
                stem_multiplier: 3,
            };
            let test_error = match eval {
                Some((train, test)) => Some(evaluate_genotype(&g, train, test, eval_cfg, run_seed)?),
                None => None,
            };
            Ok(SkipSweepRow {
                m_skip: m,
                skip_count: g.skip_count(CellType::Normal),
                param_count: count_parameters(&g, geometry),
                test_error,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDepth {
    /// Operations on the longest input-to-output path.
    pub longest_path: usize,
    /// Pairs reading an intermediate node rather than a cell input.
    pub intermediate_sources: usize,
}

/// Connectivity statistics of a cell given as pairs per intermediate node.
pub fn cell_depth(cell: &[[crate::genotype::Pair; 2]]) -> CellDepth {
    let mut depth = vec![0usize; cell.len() + 2];
    let mut intermediate_sources = 0;
    for (j, pairs) in cell.iter().enumerate() {
        depth[j + 2] = pairs.iter().map(|p| depth[p.1] + 1).max().unwrap_or(0);
        intermediate_sources += pairs.iter().filter(|p| p.1 >= 2).count();
    }
    CellDepth {
        longest_path: depth.iter().copied().max().unwrap_or(0),
        intermediate_sources,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthGapRow {
    pub stage: usize,
    pub longest_path: usize,
    pub intermediate_sources: usize,
}

pub const DEPTH_GAP_HEADER: &str = "stage,longest_path,intermediate_sources";

impl DepthGapRow {
    pub fn csv(&self) -> String {
        format!("{},{},{}", self.stage, self.longest_path, self.intermediate_sources)
    }
}

/// Normal-cell connectivity of each stage's derived genotype.
pub fn depth_gap_probe(snapshots: &[AlphaSnapshot]) -> Result<Vec<DepthGapRow>> {
    snapshots
        .iter()
        .map(|s| {
            let g = derive(s)?;
            let d = cell_depth(&g.normal);
            Ok(DepthGapRow {
                stage: s.metadata.stage,
                longest_path: d.longest_path,
                intermediate_sources: d.intermediate_sources,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub arm: String,
    pub skip_dropout: [f64; 3],
    pub normal_skip_count: usize,
}

pub const ABLATION_HEADER: &str = "seed,arm,dropout_stage1,dropout_stage2,dropout_stage3,normal_skip_count";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.seed, self.arm, self.skip_dropout[0], self.skip_dropout[1], self.skip_dropout[2], self.normal_skip_count
        )
    }
}

/// Median of a non-empty list (mean of the two middle values for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Searches every seed twice, with and without skip dropout, and records the
/// skip count of the unrefined normal cell. `plan` supplies everything but
/// the dropout rates.
pub fn dropout_ablation(setup: &StudySetup<'_>, seeds: &[u64], with_dropout: [f64; 3]) -> Result<Vec<AblationRow>> {
    if setup.plan.stages.len() != 3 {
        return Err(Error::config("the dropout ablation expects a three-stage plan"));
    }
    let mut rows = Vec::new();
    for &s in seeds {
        for (arm, rates) in [("no_dropout", [0.0; 3]), ("dropout", with_dropout)] {
            let mut plan = setup.plan.clone();
            for (stage, r) in plan.stages.iter_mut().zip(rates) {
                stage.init_skip_dropout = r;
            }
            let out = run_progressive_search(setup.network, &plan, setup.optimizer, search_data(setup), s, |_| Ok(()))?;
            let g = derive(out.final_snapshot())?;
            info!("ablation seed {s} {arm}: {} normal-cell skips", g.skip_count(CellType::Normal));
            rows.push(AblationRow {
                seed: s,
                arm: arm.into(),
                skip_dropout: rates,
                normal_skip_count: g.skip_count(CellType::Normal),
            });
        }
    }
    Ok(rows)
}
