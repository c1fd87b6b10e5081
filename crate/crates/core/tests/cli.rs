use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdarts::genotype::{CellType, Genotype};

const TINY_CONFIG: &str = r#"
schema_version = 1
seed = 3

[dataset]
source = "shapes"
classes = 4
image_size = 8
channels = 3
train = 24
test = 8

[network]
init_channels = 4

[search]
plan = "custom"
stages = [
  { depth = 3, op_budget = 8, epochs = 2, warm_epochs = 1, init_skip_dropout = 0.0 },
  { depth = 4, op_budget = 4, epochs = 2, warm_epochs = 1, init_skip_dropout = 0.3 },
]

[search.optimizer]
batch_size = 6
w_lr = 0.025
w_lr_min = 0.001
w_momentum = 0.9
w_weight_decay = 0.0003
grad_clip = 5.0
alpha_lr = 0.0006
alpha_betas = [0.5, 0.999]
alpha_weight_decay = 0.001

[eval]
depth = 3
init_channels = 4
epochs = 1
batch_size = 8
drop_path_prob = 0.2
cutout_length = 2
lr = 0.025
lr_min = 0.0
momentum = 0.9
weight_decay = 0.0003
grad_clip = 5.0
"#;

fn pdarts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdarts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pinned(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn assert_usage(o: &Output) {
    assert_eq!(o.status.code(), Some(2), "{}", stderr(o));
    assert!(stderr(o).lines().any(|l| l.starts_with("error kind=usage: ")), "{}", stderr(o));
}

#[test]
fn missing_input_files_are_usage_errors() {
    assert_usage(&pdarts(&["derive", "--snapshot", "/nonexistent/s.json"]));
    assert_usage(&pdarts(&["search", "--config", "/nonexistent/c.toml"]));
    assert_usage(&pdarts(&["export-dot", "--genotype", "/nonexistent/g.json"]));
}

#[test]
fn bad_invocations_are_usage_errors() {
    assert_usage(&pdarts(&["frobnicate"]));
    assert_usage(&pdarts(&["search", "--seed", "minus-one"]));
    assert_usage(&pdarts(&["search", "--dataset", "shapes", "--test-dataset", "x.pdts"]));
    assert_usage(&pdarts(&["search", "--test-dataset", "x.pdts"]));
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_usage(&pdarts(&["search", "--config", s(&cfg), "--plan", "paper"]));
    assert_usage(&pdarts(&["experiment", "skip-sweep", "--seeds", "1,2"]));
}

#[test]
fn help_exits_zero() {
    let o = pdarts(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("search"));
}

#[test]
fn malformed_config_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "schema_version = 1\n[search]\nplann = \"desk\"\n").unwrap();
    let o = pdarts(&["search", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("plann"), "{}", stderr(&o));
}

#[test]
fn derive_reproduces_the_pinned_genotype() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdarts(&["derive", "--snapshot", s(&pinned("desk_stage3.snapshot.json")), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("genotype.json")).unwrap(),
        fs::read(pinned("desk_stage3.genotype.json")).unwrap()
    );
}

#[test]
fn refine_caps_skip_connections() {
    let snap = pinned("skip_heavy.snapshot.json");
    for m in 0..=4usize {
        let dir = tempfile::tempdir().unwrap();
        let o = pdarts(&["refine", "--snapshot", s(&snap), "--m-skip", &m.to_string(), "--out", s(dir.path())]);
        assert!(o.status.success(), "{}", stderr(&o));
        let g = Genotype::read(&dir.path().join("genotype.refined.json")).unwrap();
        assert!(g.skip_count(CellType::Normal) <= m, "m={m}");
        let trace: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("refine_trace.json")).unwrap()).unwrap();
        assert!(trace["rounds"].as_u64().unwrap() <= trace["skip_candidates"].as_u64().unwrap());
    }
}

#[test]
fn export_dot_writes_both_cells() {
    let genotype = pinned("desk_stage3.genotype.json");
    let o = pdarts(&["export-dot", "--genotype", s(&genotype)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("digraph").count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let o = pdarts(&["export-dot", "--genotype", s(&genotype), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["normal.dot", "reduce.dot"] {
        assert!(fs::read_to_string(dir.path().join(f)).unwrap().starts_with("digraph"));
    }
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "").unwrap();
    let o = pdarts(&["derive", "--snapshot", s(&pinned("desk_stage3.snapshot.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error kind=locked"), "{}", stderr(&o));
    assert!(!dir.path().join("genotype.json").exists());
}

#[test]
fn tiny_search_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        let o = pdarts(&["search", "--config", s(&cfg), "--out", s(run)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.json", "stage1.snapshot.json", "stage2.snapshot.json", "genotype.json", "metrics.csv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    assert!(!runs[0].join(".lock").exists());

    let eval = dir.path().join("eval");
    let g = runs[0].join("genotype.json");
    let o = pdarts(&["eval", "--config", s(&cfg), "--genotype", s(&g), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(eval.join("eval_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn gradcheck_passes() {
    let o = pdarts(&["gradcheck", "--seed-count", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("sep_conv_5x5_s2") && !table.contains("FAIL"), "{table}");
}
