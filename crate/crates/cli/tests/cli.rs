use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use htsr_core::allocation::{plan_sparsity, EndpointSpec, Granularity, QualityTable, SparsityPlan};
use htsr_core::metrics::ModelAnalysis;
use htsr_core::tensorio::{load_checkpoint, CheckpointFormat};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn htsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htsr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = htsr(args);
    assert!(
        out.status.success(),
        "htsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn analyze(dir: &Path, variant: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("analysis-{variant}"));
    let model = fixture(&format!("toy_{variant}.safetensors"));
    let mut args = vec!["analyze", "--model", s(&model), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn analyze_writes_one_row_per_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = analyze(dir.path(), "trained", &[]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 28);
    let report = ModelAnalysis::from_json(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.blocks.len(), 4);
    assert!(report.matrices.iter().all(|m| (1.0..=20.0).contains(&m.alpha_hill)));
}

#[test]
fn analyze_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    let model = fixture("toy_random.safetensors");
    ok(&["--threads", "1", "analyze", "--model", s(&model), "--out", s(&one)]);
    ok(&["--threads", "4", "analyze", "--model", s(&model), "--out", s(&many)]);
    for f in ["metrics.json", "metrics.csv"] {
        assert_eq!(std::fs::read(one.join(f)).unwrap(), std::fs::read(many.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn allocate_equals_library_plan() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "trained", &[]).join("metrics.json");
    let plan_path = dir.path().join("plan.json");
    ok(&["allocate", "--metrics", s(&metrics), "--sparsity", "0.7", "--tau", "0.2", "--out", s(&plan_path)]);
    let cli = SparsityPlan::from_json(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();

    let report = ModelAnalysis::from_json(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let table = QualityTable::from_analysis(&report).unwrap();
    let lib = plan_sparsity(&table, 0.7, EndpointSpec::Tau(0.2), Granularity::PerBlock, None).unwrap();
    assert_eq!(cli.per_matrix, lib.per_matrix);
    assert_eq!(cli.eta, lib.eta);
}

#[test]
fn tau_zero_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "random", &[]).join("metrics.json");
    let plan_path = dir.path().join("flat.json");
    ok(&["allocate", "--metrics", s(&metrics), "--sparsity", "0.5", "--tau", "0", "--out", s(&plan_path)]);
    let plan = SparsityPlan::from_json(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert!(plan.per_matrix.values().all(|&v| v == 0.5));
}

#[test]
fn tau_sweep_writes_one_plan_per_tau() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "random", &[]).join("metrics.json");
    let out = dir.path().join("sweep.json");
    ok(&["allocate", "--metrics", s(&metrics), "--sparsity", "0.6", "--tau-sweep", "--out", s(&out)]);
    for t in ["0.1", "0.2", "0.3", "0.4", "0.5"] {
        assert!(dir.path().join(format!("sweep.tau{t}.json")).exists(), "{t}");
    }
}

#[test]
fn prune_hits_target_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "trained", &[]).join("metrics.json");
    let plan = dir.path().join("plan.json");
    ok(&["allocate", "--metrics", s(&metrics), "--sparsity", "0.5", "--out", s(&plan)]);
    let model = fixture("toy_trained.safetensors");
    let once = dir.path().join("once.safetensors");
    let twice = dir.path().join("twice.safetensors");
    ok(&["prune", "--model", s(&model), "--plan", s(&plan), "--out", s(&once)]);
    ok(&["prune", "--model", s(&once), "--plan", s(&plan), "--out", s(&twice)]);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("once.safetensors.report.json")).unwrap())
            .unwrap();
    let achieved = report["global_sparsity"].as_f64().unwrap();
    let total = report["total_params"].as_f64().unwrap();
    assert!((achieved - 0.5).abs() <= 28.0 * 0.5 / total, "{achieved}");
    assert!(dir.path().join("once.safetensors.report.csv").exists());

    let a = load_checkpoint(&once, CheckpointFormat::Safetensors).unwrap();
    let b = load_checkpoint(&twice, CheckpointFormat::Safetensors).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(std::fs::read(&once).unwrap(), std::fs::read(&twice).unwrap());
}

#[test]
fn prune_to_rawbin() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "random", &[]).join("metrics.json");
    let plan = dir.path().join("nm.json");
    ok(&["budget", "nm", "--metrics", s(&metrics), "--density", "0.5", "--out", s(&plan)]);
    let model = fixture("toy_random.safetensors");
    let out = dir.path().join("pruned.json");
    ok(&["prune", "--model", s(&model), "--plan", s(&plan), "--out", s(&out), "--out-format", "rawbin"]);
    let pruned = load_checkpoint(&out, CheckpointFormat::Rawbin).unwrap();
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    for (name, n) in plan["per_layer"].as_object().unwrap() {
        let n = n.as_u64().unwrap() as usize;
        for g in pruned.get(name).unwrap().data().chunks(8) {
            assert_eq!(g.iter().filter(|v| **v != 0.0).count(), n);
        }
    }
}

#[test]
fn budget_bits_and_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = analyze(dir.path(), "trained", &[]).join("metrics.json");
    let bits = dir.path().join("bits.json");
    ok(&["budget", "bits", "--metrics", s(&metrics), "--target", "4", "--out", s(&bits)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bits).unwrap()).unwrap();
    assert_eq!(v["kind"], "bits");
    assert_eq!(v["per_layer"].as_object().unwrap().len(), 28);

    let ranks = dir.path().join("ranks.json");
    let model = fixture("toy_trained.safetensors");
    ok(&["budget", "ranks", "--metrics", s(&metrics), "--model", s(&model), "--keep", "896", "--out", s(&ranks)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ranks).unwrap()).unwrap();
    let total: u64 = v["per_layer"].as_object().unwrap().values().map(|r| r.as_u64().unwrap()).sum();
    assert_eq!(total, 896);
    let out = dir.path().join("lra.safetensors");
    ok(&["prune", "--model", s(&model), "--plan", s(&ranks), "--out", s(&out)]);
}

#[test]
fn synth_correlation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let stdout = ok(&["synth", "correlation", "--n", "2000", "--out", s(&a)]);
    ok(&["--threads", "2", "synth", "correlation", "--n", "2000", "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "alpha_true,seed,alpha_hill,stable_rank");
    assert_eq!(text.lines().count(), 1 + 30);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(stdout.contains("pearson r"));

    let shifted = dir.path().join("c.csv");
    ok(&["--seed", "7", "synth", "correlation", "--n", "2000", "--out", s(&shifted)]);
    assert_ne!(text, std::fs::read_to_string(&shifted).unwrap());
}

#[test]
fn synth_lra_reports_both_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lra.csv");
    let model = fixture("toy_trained.safetensors");
    let stdout = ok(&["synth", "lra", "--model", s(&model), "--keep", "896", "--out", s(&out)]);
    assert!(stdout.contains("more_on_ht") && stdout.contains("less_on_ht"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 28);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(htsr(&["analyze"]).status.code(), Some(1));
    assert_eq!(htsr(&["frobnicate"]).status.code(), Some(1));
    let metrics = analyze(dir.path(), "random", &[]).join("metrics.json");
    let plan = dir.path().join("p.json");
    let out = htsr(&["allocate", "--metrics", s(&metrics), "--sparsity", "1.5", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!plan.exists());
    // data
    let missing = dir.path().join("missing.safetensors");
    assert_eq!(htsr(&["analyze", "--model", s(&missing), "--out", s(dir.path())]).status.code(), Some(2));
    let garbage = dir.path().join("garbage.safetensors");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(htsr(&["analyze", "--model", s(&garbage), "--out", s(dir.path())]).status.code(), Some(2));
    // infeasible
    let out = htsr(&["allocate", "--metrics", s(&metrics), "--sparsity", "0.5", "--min-sparsity", "0.6", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(3));
    let out = htsr(&["budget", "nm", "--metrics", s(&metrics), "--density", "0.05", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!plan.exists());
    assert_eq!(htsr(&["--help"]).status.code(), Some(0));
}
