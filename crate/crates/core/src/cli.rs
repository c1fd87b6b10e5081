//! Command-line entry points.
//!
//! Every command takes an optional `--config` TOML file and a few targeted
//! overrides. Flags are checked for conflicts and every named input file for
//! existence before any computation starts. Failures print one line
//! `error kind=<kind>: <message>` to stderr; usage errors exit with 2, all
//! others with 1.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::config::{PlanChoice, RunConfig};
use crate::data::{search_split, DatasetSpec, Generator, LoadedData, Normalization, SearchSplit};
use crate::error::{Error, Result};
use crate::eval::{build_eval_network, train_eval, InputSpec, EVAL_METRICS_HEADER};
use crate::experiments::{
    depth_gap_probe, dropout_ablation, experiment_random_space, experiment_skip_sweep, median, StudySetup,
    ABLATION_HEADER, DEPTH_GAP_HEADER, RANDOM_SPACE_HEADER, SKIP_SWEEP_HEADER,
};
use crate::genotype::{derive, export_graph, refine_skip_count, AlphaSnapshot, CellType, Genotype, RefineStep};
use crate::opcheck;
use crate::run::RunDir;
use crate::search::{run_progressive_search, Accounting, OptimizerConfig, SearchData, ACCOUNTING_HEADER, METRICS_HEADER};
use crate::seed;

#[derive(Debug, Parser)]
#[command(name = "pdarts", version, about = "Progressive differentiable architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (TOML); built-in desk defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Generator name ("shapes", "shortcut") or a PDTS training file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// PDTS test file, required when --dataset is a file.
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanArg {
    /// Depths 5/8/11, 12 epochs per stage.
    Desk,
    /// Depths 5/11/17, 25 epochs per stage, batch 96, alpha learning rate 6e-4.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Approximated versus uniformly drawn candidate sets in the last stage.
    RandomSpace,
    /// Skip count and size of the genotype under each skip cap.
    SkipSweep,
    /// Normal-cell connectivity of every stage's genotype.
    DepthGap,
    /// Derived skip count with and without skip dropout.
    DropoutAblation,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::RandomSpace => "random_space",
            Study::SkipSweep => "skip_sweep",
            Study::DepthGap => "depth_gap",
            Study::DropoutAblation => "dropout_ablation",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Progressive search: stage snapshots, genotype and refined genotype.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        plan: Option<PlanArg>,
    },
    /// Derives a genotype from an alpha snapshot.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Derives a genotype with at most M normal-cell skip connections.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        m_skip: Option<usize>,
    },
    /// Trains the evaluation network of a genotype and reports test error.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Runs one of the diagnostic studies.
    Experiment {
        #[arg(value_enum)]
        study: Study,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        plan: Option<PlanArg>,
        /// Comma-separated seeds (random-space, dropout-ablation).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Snapshot to sweep (skip-sweep).
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Also train every swept genotype (skip-sweep).
        #[arg(long)]
        evaluate: bool,
        /// Search run directory holding stage snapshots (depth-gap).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Writes the normal and reduction cells of a genotype as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
        /// Output directory; the graphs go to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and candidate operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seed_count: u64,
        #[arg(long, default_value_t = pdarts_tensor::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                // A closed stdout (e.g. piped into `head`) is not an error.
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage: {first}");
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={}: {msg}", e.kind());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Search { common, data, plan } => search(common, data, plan),
        Command::Derive { common, snapshot } => derive_cmd(common, &snapshot),
        Command::Refine { common, snapshot, m_skip } => refine_cmd(common, &snapshot, m_skip),
        Command::Eval { common, data, genotype } => eval_cmd(common, data, &genotype),
        Command::Experiment {
            study,
            common,
            data,
            plan,
            seeds,
            snapshot,
            evaluate,
            run,
        } => experiment(study, common, data, plan, seeds, snapshot, evaluate, run),
        Command::ExportDot { genotype, out } => export_dot(&genotype, out),
        Command::Gradcheck { seed_count, tolerance } => gradcheck(seed_count, tolerance),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

/// Reads the configuration file (or the defaults) and applies --seed.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_file(path, "config file")?;
            RunConfig::read(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_dataset(spec: &mut DatasetSpec, data: &DataArgs) -> Result<()> {
    match (&data.dataset, &data.test_dataset) {
        (None, None) => {}
        (None, Some(_)) => return Err(usage("--test-dataset needs --dataset")),
        (Some(name), test) if Generator::parse(name).is_some() => {
            if test.is_some() {
                return Err(usage(format!("--test-dataset conflicts with the generated dataset {name:?}")));
            }
            spec.source = name.clone();
            spec.test_source = None;
        }
        (Some(_), None) => return Err(usage("a dataset file needs --test-dataset")),
        (Some(train), Some(test)) => {
            spec.source = train.clone();
            spec.test_source = Some(test.display().to_string());
        }
    }
    if Generator::parse(&spec.source).is_none() {
        require_file(Path::new(&spec.source), "dataset file")?;
        let test = spec
            .test_source
            .as_ref()
            .ok_or_else(|| usage("a dataset file needs a test file"))?;
        require_file(Path::new(test), "test dataset file")?;
    }
    Ok(())
}

fn apply_plan(cfg: &mut RunConfig, plan: Option<PlanArg>) -> Result<()> {
    let Some(plan) = plan else { return Ok(()) };
    if cfg.search.stages.is_some() {
        return Err(usage("--plan conflicts with the custom stages of the config file"));
    }
    match plan {
        PlanArg::Desk => cfg.search.plan = PlanChoice::Desk,
        PlanArg::Paper => {
            let paper = OptimizerConfig::paper();
            cfg.search.plan = PlanChoice::Paper;
            cfg.search.optimizer.batch_size = paper.batch_size;
            cfg.search.optimizer.alpha_lr = paper.alpha_lr;
        }
    }
    Ok(())
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

#[derive(Debug, Serialize)]
struct DatasetRecord<'a> {
    source: &'a str,
    test_source: Option<&'a str>,
    train_images: usize,
    test_images: usize,
    train_sha256: &'a str,
    test_sha256: &'a str,
    normalization: &'a Normalization,
}

fn dataset_record<'a>(spec: &'a DatasetSpec, data: &'a LoadedData) -> DatasetRecord<'a> {
    DatasetRecord {
        source: &spec.source,
        test_source: spec.test_source.as_deref(),
        train_images: data.train.len(),
        test_images: data.test.len(),
        train_sha256: &data.digests.0,
        test_sha256: &data.digests.1,
        normalization: &data.normalization,
    }
}

fn split_for(cfg: &RunConfig, data: &LoadedData) -> SearchSplit {
    search_split(&data.train.labels, seed::derive(cfg.seed, "search.split", 0))
}

#[derive(Debug, Serialize)]
struct RefineRecord<'a> {
    m_skip: usize,
    skip_candidates: usize,
    derivations: usize,
    rounds: usize,
    trace: &'a [RefineStep],
}

fn write_refinement(dir: &mut RunDir, snapshot: &AlphaSnapshot, m_skip: usize) -> Result<Genotype> {
    let refined = refine_skip_count(snapshot, m_skip)?;
    let record = RefineRecord {
        m_skip,
        skip_candidates: refined.skip_candidates,
        derivations: refined.derivations(),
        rounds: refined.rounds(),
        trace: &refined.trace,
    };
    dir.write("genotype.refined.json", refined.genotype.to_json()?)?;
    dir.write("refine_trace.json", crate::genotype::to_json(&record)?)?;
    Ok(refined.genotype)
}

#[derive(Debug, Serialize)]
struct SearchDetails<'a> {
    seed: u64,
    plan_digest: String,
    dataset: DatasetRecord<'a>,
    split_sizes: (usize, usize),
    accounting: Vec<Accounting>,
    /// Activation floats of each stage relative to stage 1.
    activation_ratios: Vec<f64>,
    normal_skip_count: usize,
    refined_normal_skip_count: usize,
}

fn search(common: Common, data: DataArgs, plan: Option<PlanArg>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    apply_dataset(&mut cfg.dataset, &data)?;
    apply_plan(&mut cfg, plan)?;
    let plan = cfg.search.plan()?;
    cfg.search.optimizer.validate()?;
    let out = out_dir(&common, "search");
    let mut dir = RunDir::create(&out)?;
    dir.write("config.toml", cfg.to_toml())?;

    let loaded = cfg.dataset.load(cfg.seed)?;
    let split = split_for(&cfg, &loaded);
    let train = &loaded.train;
    let network = cfg.network(train.channels, train.classes, train.height);
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut accounting = format!("{ACCOUNTING_HEADER}\n");
    let outcome = run_progressive_search(
        &network,
        &plan,
        &cfg.search.optimizer,
        SearchData { train, split: &split },
        cfg.seed,
        |stage| {
            let k = stage.snapshot.metadata.stage;
            for row in &stage.metrics {
                metrics.push_str(&row.csv());
                metrics.push('\n');
            }
            accounting.push_str(&stage.accounting.csv());
            accounting.push('\n');
            dir.write(&format!("stage{k}.snapshot.json"), stage.snapshot.to_json()?)?;
            dir.write("metrics.csv", &metrics)?;
            dir.write("accounting.csv", &accounting)?;
            info!("stage {k} finished");
            Ok(())
        },
    )?;
    let last = outcome.final_snapshot();
    let genotype = derive(last)?;
    dir.write("genotype.json", genotype.to_json()?)?;
    let refined = write_refinement(&mut dir, last, cfg.refine.m_skip)?;

    let accounting: Vec<Accounting> = outcome.stages.iter().map(|s| s.accounting.clone()).collect();
    let base = accounting[0].activation_floats as f64;
    let details = SearchDetails {
        seed: cfg.seed,
        plan_digest: plan.digest(),
        dataset: dataset_record(&cfg.dataset, &loaded),
        split_sizes: (split.a.len(), split.b.len()),
        activation_ratios: accounting.iter().map(|a| a.activation_floats as f64 / base).collect(),
        accounting,
        normal_skip_count: genotype.skip_count(CellType::Normal),
        refined_normal_skip_count: refined.skip_count(CellType::Normal),
    };
    dir.finish("search", &details)?;
    println!("search finished: {}", out.display());
    println!(
        "normal-cell skips: {} derived, {} after refinement",
        details.normal_skip_count, details.refined_normal_skip_count
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SnapshotSource {
    snapshot: String,
    snapshot_sha256: String,
    m_skip: Option<usize>,
    normal_skip_count: usize,
}

fn snapshot_source(path: &Path, m_skip: Option<usize>, g: &Genotype) -> Result<SnapshotSource> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(SnapshotSource {
        snapshot: path.display().to_string(),
        snapshot_sha256: crate::run::sha256_hex(&bytes),
        m_skip,
        normal_skip_count: g.skip_count(CellType::Normal),
    })
}

fn derive_cmd(common: Common, snapshot: &Path) -> Result<()> {
    require_file(snapshot, "snapshot")?;
    let cfg = load_config(&common)?;
    let snap = AlphaSnapshot::read(snapshot)?;
    let genotype = derive(&snap)?;
    let out = out_dir(&common, "derive");
    let mut dir = RunDir::create(&out)?;
    dir.write("config.toml", cfg.to_toml())?;
    let path = dir.write("genotype.json", genotype.to_json()?)?;
    dir.finish("derive", &snapshot_source(snapshot, None, &genotype)?)?;
    println!("{}", path.display());
    Ok(())
}

fn refine_cmd(common: Common, snapshot: &Path, m_skip: Option<usize>) -> Result<()> {
    require_file(snapshot, "snapshot")?;
    let mut cfg = load_config(&common)?;
    if let Some(m) = m_skip {
        cfg.refine.m_skip = m;
    }
    let snap = AlphaSnapshot::read(snapshot)?;
    let out = out_dir(&common, "refine");
    let mut dir = RunDir::create(&out)?;
    dir.write("config.toml", cfg.to_toml())?;
    let genotype = write_refinement(&mut dir, &snap, cfg.refine.m_skip)?;
    dir.finish("refine", &snapshot_source(snapshot, Some(cfg.refine.m_skip), &genotype)?)?;
    println!("{}", out.join("genotype.refined.json").display());
    println!("normal-cell skips: {}", genotype.skip_count(CellType::Normal));
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalDetails<'a> {
    seed: u64,
    genotype: String,
    dataset: DatasetRecord<'a>,
    param_count: usize,
    initial_test_error: f64,
    final_test_error: f64,
}

fn eval_cmd(common: Common, data: DataArgs, genotype_path: &Path) -> Result<()> {
    require_file(genotype_path, "genotype")?;
    let mut cfg = load_config(&common)?;
    apply_dataset(&mut cfg.dataset, &data)?;
    cfg.eval.validate()?;
    let genotype = Genotype::read(genotype_path)?;
    let out = out_dir(&common, "eval");
    let mut dir = RunDir::create(&out)?;
    dir.write("config.toml", cfg.to_toml())?;
    let loaded = cfg.dataset.load(cfg.seed)?;
    let mut net = build_eval_network(&genotype, InputSpec::of(&loaded.train), &cfg.eval, cfg.seed)?;
    let param_count = net.param_count();
    let history = train_eval(&mut net, &loaded.train, &loaded.test, &cfg.eval, cfg.seed)?;
    let mut csv = format!("{EVAL_METRICS_HEADER}\n");
    for e in &history.epochs {
        csv.push_str(&e.csv());
        csv.push('\n');
    }
    dir.write("eval_metrics.csv", csv)?;
    let details = EvalDetails {
        seed: cfg.seed,
        genotype: genotype_path.display().to_string(),
        dataset: dataset_record(&cfg.dataset, &loaded),
        param_count,
        initial_test_error: history.initial_test_error,
        final_test_error: history.final_test_error(),
    };
    dir.finish("eval", &details)?;
    println!("parameters: {param_count}");
    println!("final test error: {:.4}", details.final_test_error);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExperimentDetails<'a, S: Serialize> {
    study: &'static str,
    seed: u64,
    dataset: Option<DatasetRecord<'a>>,
    summary: S,
}

#[derive(Debug, Serialize)]
struct ArmMedian {
    arm: String,
    median: f64,
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    study: Study,
    common: Common,
    data: DataArgs,
    plan: Option<PlanArg>,
    seeds: Option<Vec<u64>>,
    snapshot: Option<PathBuf>,
    evaluate: bool,
    run: Option<PathBuf>,
) -> Result<()> {
    if snapshot.is_some() && study != Study::SkipSweep {
        return Err(usage("--snapshot only applies to skip-sweep"));
    }
    if evaluate && study != Study::SkipSweep {
        return Err(usage("--evaluate only applies to skip-sweep"));
    }
    if run.is_some() && study != Study::DepthGap {
        return Err(usage("--run only applies to depth-gap"));
    }
    if seeds.is_some() && !matches!(study, Study::RandomSpace | Study::DropoutAblation) {
        return Err(usage("--seeds only applies to random-space and dropout-ablation"));
    }
    if plan.is_some() && !matches!(study, Study::RandomSpace | Study::DropoutAblation) {
        return Err(usage("--plan only applies to random-space and dropout-ablation"));
    }
    let mut cfg = load_config(&common)?;
    if study == Study::DropoutAblation && data.dataset.is_none() {
        cfg.dataset.source = cfg.experiment.ablation_dataset.clone();
        cfg.dataset.test_source = None;
    }
    apply_dataset(&mut cfg.dataset, &data)?;
    apply_plan(&mut cfg, plan)?;
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(usage("--seeds needs at least one seed"));
        }
        cfg.experiment.seeds = s;
    }
    match study {
        Study::SkipSweep => {
            let snapshot = snapshot.as_ref().ok_or_else(|| usage("skip-sweep needs --snapshot"))?;
            require_file(snapshot, "snapshot")?;
        }
        Study::DepthGap => {
            let run = run.as_ref().ok_or_else(|| usage("depth-gap needs --run"))?;
            require_dir(run, "run directory")?;
        }
        _ => {}
    }
    let out = out_dir(&common, study.name());
    let mut dir = RunDir::create(&out)?;
    dir.write("config.toml", cfg.to_toml())?;
    let csv_name = format!("{}.csv", study.name());

    match study {
        Study::RandomSpace | Study::DropoutAblation => {
            let plan = cfg.search.plan()?;
            let loaded = cfg.dataset.load(cfg.seed)?;
            let split = split_for(&cfg, &loaded);
            let t = &loaded.train;
            let network = cfg.network(t.channels, t.classes, t.height);
            let setup = StudySetup {
                network: &network,
                plan: &plan,
                optimizer: &cfg.search.optimizer,
                data: &loaded,
                split: &split,
            };
            let (csv, medians) = if study == Study::RandomSpace {
                let rows = experiment_random_space(&setup, &cfg.eval, &cfg.experiment.seeds, cfg.experiment.random_repeats)?;
                let csv = csv_of(RANDOM_SPACE_HEADER, rows.iter().map(|r| r.csv()));
                let medians = ["approximated", "random"]
                    .iter()
                    .map(|arm| ArmMedian {
                        arm: arm.to_string(),
                        median: median(
                            &rows
                                .iter()
                                .filter(|r| r.arm == *arm && r.selected)
                                .map(|r| r.test_error)
                                .collect::<Vec<_>>(),
                        ),
                    })
                    .collect::<Vec<_>>();
                (csv, medians)
            } else {
                let rows = dropout_ablation(&setup, &cfg.experiment.seeds, cfg.experiment.ablation_dropout)?;
                let csv = csv_of(ABLATION_HEADER, rows.iter().map(|r| r.csv()));
                let medians = ["no_dropout", "dropout"]
                    .iter()
                    .map(|arm| ArmMedian {
                        arm: arm.to_string(),
                        median: median(
                            &rows
                                .iter()
                                .filter(|r| r.arm == *arm)
                                .map(|r| r.normal_skip_count as f64)
                                .collect::<Vec<_>>(),
                        ),
                    })
                    .collect::<Vec<_>>();
                (csv, medians)
            };
            dir.write(&csv_name, csv)?;
            for m in &medians {
                println!("{}: median {}", m.arm, m.median);
            }
            let details = ExperimentDetails {
                study: study.name(),
                seed: cfg.seed,
                dataset: Some(dataset_record(&cfg.dataset, &loaded)),
                summary: medians,
            };
            dir.finish("experiment", &details)?;
        }
        Study::SkipSweep => {
            let snapshot = AlphaSnapshot::read(&snapshot.expect("checked above"))?;
            let loaded = if evaluate { Some(cfg.dataset.load(cfg.seed)?) } else { None };
            let input = match &loaded {
                Some(l) => InputSpec::of(&l.train),
                None => InputSpec {
                    channels: cfg.dataset.channels,
                    image_size: cfg.dataset.image_size,
                    classes: cfg.dataset.classes,
                },
            };
            let rows = experiment_skip_sweep(
                &snapshot,
                &cfg.experiment.m_values,
                input,
                &cfg.eval,
                loaded.as_ref().map(|l| (&l.train, &l.test)),
                cfg.seed,
            )?;
            for r in &rows {
                println!("m_skip {}: {} skips, {} parameters", r.m_skip, r.skip_count, r.param_count);
            }
            dir.write(&csv_name, csv_of(SKIP_SWEEP_HEADER, rows.iter().map(|r| r.csv())))?;
            let details = ExperimentDetails {
                study: study.name(),
                seed: cfg.seed,
                dataset: loaded.as_ref().map(|l| dataset_record(&cfg.dataset, l)),
                summary: rows,
            };
            dir.finish("experiment", &details)?;
        }
        Study::DepthGap => {
            let run = run.expect("checked above");
            let mut snapshots = Vec::new();
            for k in 1.. {
                let path = run.join(format!("stage{k}.snapshot.json"));
                if !path.is_file() {
                    break;
                }
                snapshots.push(AlphaSnapshot::read(&path)?);
            }
            if snapshots.is_empty() {
                return Err(usage(format!("{} holds no stage snapshots", run.display())));
            }
            let rows = depth_gap_probe(&snapshots)?;
            for r in &rows {
                println!(
                    "stage {}: longest path {}, {} intermediate sources",
                    r.stage, r.longest_path, r.intermediate_sources
                );
            }
            dir.write(&csv_name, csv_of(DEPTH_GAP_HEADER, rows.iter().map(|r| r.csv())))?;
            let details = ExperimentDetails {
                study: study.name(),
                seed: cfg.seed,
                dataset: None,
                summary: rows,
            };
            dir.finish("experiment", &details)?;
        }
    }
    println!("experiment finished: {}", out.display());
    Ok(())
}

fn csv_of(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn export_dot(genotype_path: &Path, out: Option<PathBuf>) -> Result<()> {
    require_file(genotype_path, "genotype")?;
    let genotype = Genotype::read(genotype_path)?;
    let normal = export_graph(&genotype, CellType::Normal);
    let reduce = export_graph(&genotype, CellType::Reduce);
    match out {
        Some(out) => {
            let mut dir = RunDir::create(&out)?;
            dir.write("normal.dot", normal)?;
            dir.write("reduce.dot", reduce)?;
            dir.finish("export-dot", &genotype_path.display().to_string())?;
            println!("{}", out.display());
        }
        None => print!("{normal}{reduce}"),
    }
    Ok(())
}

fn gradcheck(seed_count: u64, tolerance: f64) -> Result<()> {
    if seed_count == 0 {
        return Err(usage("--seed-count must be positive"));
    }
    let rows = opcheck::full_suite(seed_count, tolerance)?;
    print!("{}", opcheck::format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} cases pass (tolerance {tolerance:e})", rows.len());
        Ok(())
    } else {
        Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
