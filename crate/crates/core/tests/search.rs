use pdarts::data::{search_split, DatasetSpec, LoadedData};
use pdarts::optim::cosine_lr;
use pdarts::ops::OpKind;
use pdarts::search::{
    dropout_schedule, run_progressive_search, OptimizerConfig, Phase, SearchData, SearchOutcome, StagePlan, StageSpec,
};
use pdarts::supernet::{rebuild_for_stage, CandidateSpace, NetworkConfig};
use pdarts::{seed, Error};

#[test]
fn dropout_decays_linearly_and_stays_positive() {
    assert!((dropout_schedule(0.7, 20, 25).unwrap() - 0.14).abs() < 1e-12);
    assert_eq!(dropout_schedule(0.3, 0, 12).unwrap(), 0.3);
    for e in 0..12 {
        let r = dropout_schedule(0.6, e, 12).unwrap();
        assert!(r > 0.0);
        if e > 0 {
            assert!(r < dropout_schedule(0.6, e - 1, 12).unwrap());
        }
    }
    assert_eq!(dropout_schedule(0.0, 5, 12).unwrap(), 0.0);
    assert!(matches!(dropout_schedule(1.2, 0, 12), Err(Error::Config(_))));
    assert!(matches!(dropout_schedule(0.3, 12, 12), Err(Error::Config(_))));
}

#[test]
fn cosine_lr_runs_from_base_to_floor() {
    assert_eq!(cosine_lr(0.025, 0.001, 0, 12), 0.025);
    assert!((cosine_lr(0.025, 0.001, 11, 12) - 0.001).abs() < 1e-15);
    assert!((cosine_lr(0.025, 0.001, 5, 11) - 0.013).abs() < 1e-12);
    let lrs: Vec<f64> = (0..12).map(|e| cosine_lr(0.025, 0.001, e, 12)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn built_in_plans_validate() {
    for plan in [StagePlan::desk([0.0, 0.3, 0.6]), StagePlan::paper([0.0, 0.4, 0.7])] {
        plan.validate().unwrap();
        let budgets: Vec<usize> = plan.stages.iter().map(|s| s.op_budget).collect();
        assert_eq!(budgets, [8, 5, 3]);
    }
    let depths: Vec<usize> = StagePlan::paper([0.0; 3]).stages.iter().map(|s| s.depth).collect();
    assert_eq!(depths, [5, 11, 17]);
}

#[test]
fn malformed_plans_are_rejected() {
    let base = StagePlan::desk([0.0; 3]);
    let mut cases: Vec<(&str, StagePlan)> = Vec::new();
    cases.push(("empty", StagePlan { stages: vec![] }));
    let mut p = base.clone();
    p.stages[0].op_budget = 7;
    cases.push(("first budget", p));
    let mut p = base.clone();
    p.stages[1].depth = 5;
    cases.push(("depth", p));
    let mut p = base.clone();
    p.stages[2].op_budget = 5;
    cases.push(("budget", p));
    let mut p = base.clone();
    p.stages[1].warm_epochs = 12;
    cases.push(("warm", p));
    let mut p = base.clone();
    p.stages[2].init_skip_dropout = 1.5;
    cases.push(("dropout", p));
    for (name, plan) in cases {
        assert!(matches!(plan.validate(), Err(Error::Config(_))), "{name}");
    }
}

#[test]
fn rebuild_rejects_an_empty_candidate_set() {
    let cfg = NetworkConfig::desk(3, 4);
    let mut space = CandidateSpace::full(cfg.n_edges());
    space.reduce[3].clear();
    let err = rebuild_for_stage(&cfg, 5, &space, &mut seed::rng(0, "t", 0)).unwrap_err();
    assert!(matches!(err, Error::Edge { from: 1, to: 3, .. }), "{err}");
}

fn tiny_data() -> LoadedData {
    let mut spec = DatasetSpec::desk("shapes");
    spec.image_size = 8;
    spec.train = 24;
    spec.test = 8;
    spec.load(4).unwrap()
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        image_size: 8,
        init_channels: 4,
        ..NetworkConfig::desk(3, 4)
    }
}

fn tiny_plan() -> StagePlan {
    let stage = |depth, op_budget, d| StageSpec {
        depth,
        op_budget,
        epochs: 3,
        warm_epochs: 1,
        init_skip_dropout: d,
    };
    StagePlan {
        stages: vec![stage(3, 8, 0.0), stage(4, 4, 0.3), stage(5, 2, 0.6)],
    }
}

fn tiny_search(data: &LoadedData, run_seed: u64) -> SearchOutcome {
    let split = search_split(&data.train.labels, 1);
    let opt = OptimizerConfig {
        batch_size: 6,
        alpha_lr: 0.05,
        ..OptimizerConfig::default()
    };
    let sd = SearchData {
        train: &data.train,
        split: &split,
    };
    run_progressive_search(&tiny_network(), &tiny_plan(), &opt, sd, run_seed, |_| Ok(())).unwrap()
}

#[test]
fn tiny_search_honours_the_stage_contract() {
    let data = tiny_data();
    let out = tiny_search(&data, 3);
    let plan = tiny_plan();
    assert_eq!(out.stages.len(), 3);
    for (k, (stage, spec)) in out.stages.iter().zip(&plan.stages).enumerate() {
        assert!(stage.alpha_at_start.iter().all(|a| *a == 0.0), "stage {} starts from zero alphas", k + 1);
        let start: Vec<u64> = stage.alpha_at_start.iter().map(|a| a.to_bits()).collect();
        let warm: Vec<u64> = stage.alpha_after_warm.iter().map(|a| a.to_bits()).collect();
        assert_eq!(start, warm, "stage {} warm phase moved alphas", k + 1);
        let end = &stage.snapshot;
        let moved = end
            .cells
            .normal
            .iter()
            .flat_map(|e| &e.ops)
            .any(|o| o.weight() != 1.0 / spec.op_budget as f64);
        assert!(moved, "stage {} joint phase left alphas uniform", k + 1);
        for e in end.cells.normal.iter().chain(&end.cells.reduce) {
            assert_eq!(e.ops.len(), spec.op_budget);
        }
        assert_eq!(end.metadata.stage, k + 1);
        assert_eq!(stage.accounting.candidates_per_edge, spec.op_budget);
        assert_eq!(stage.accounting.depth, spec.depth);
        for row in &stage.metrics {
            let warm = row.epoch < spec.warm_epochs;
            assert_eq!(row.phase == Phase::Warm, warm);
            assert_eq!(row.lr_alpha == 0.0, warm);
            assert_eq!(row.skip_dropout_rate, dropout_schedule(spec.init_skip_dropout, row.epoch, spec.epochs).unwrap());
            assert!(row.train_loss.is_finite() && row.val_loss.is_finite());
        }
    }
    // Every later stage only searches what the previous one kept.
    for w in out.stages.windows(2) {
        for (prev, next) in w[0].snapshot.cells.normal.iter().zip(&w[1].snapshot.cells.normal) {
            let kept: Vec<OpKind> = next.ops.iter().map(|o| o.kind()).collect();
            assert!(kept.iter().all(|k| prev.ops.iter().any(|o| o.kind() == *k)));
        }
    }
}

#[test]
fn tiny_search_is_deterministic() {
    let data = tiny_data();
    let a = tiny_search(&data, 5);
    let b = tiny_search(&data, 5);
    for (x, y) in a.stages.iter().zip(&b.stages) {
        assert_eq!(x.snapshot.to_json().unwrap(), y.snapshot.to_json().unwrap());
        assert_eq!(x.metrics, y.metrics);
    }
    let c = tiny_search(&data, 6);
    assert_ne!(a.final_snapshot().to_json().unwrap(), c.final_snapshot().to_json().unwrap());
}

#[test]
fn optimizer_presets_differ_only_in_batch_and_alpha_rate() {
    let (desk, paper) = (OptimizerConfig::desk(), OptimizerConfig::paper());
    assert_eq!(OptimizerConfig::default(), desk);
    assert_eq!((paper.batch_size, paper.alpha_lr), (96, 6e-4));
    assert_eq!((desk.batch_size, desk.alpha_lr), (32, 0.03));
    assert_eq!(
        OptimizerConfig {
            batch_size: 96,
            alpha_lr: 6e-4,
            ..desk
        },
        paper
    );
    desk.validate().unwrap();
    paper.validate().unwrap();
}
