use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reasongraph"));
    c.env_remove("REASONGRAPH_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Small enough for every stage to finish in seconds.
const TINY: &str = r#"{
  "train_per_class": 30,
  "test_per_class": 4,
  "teacher": { "epochs": 3, "lr": 0.003, "batch_size": 16, "val_fraction": 0.15 },
  "discovery_images_per_class": 30,
  "discover": {
    "k": 8, "n_concepts": 4, "min_cluster_size": 2, "min_images": 3, "tau": 0.5,
    "attention_filter": false, "segment": { "grids": [4, 2], "max_masked_fraction": 0.5, "patch_size": 32 },
    "kmeans_max_iter": 50, "kmeans_tol": 1e-6, "occlusion_members": 4, "n_exemplars": 3
  },
  "distill": { "epochs": 2, "batch_size": 32 },
  "bias": {
    "train_per_class": 20, "test_per_class": 6, "discovery_images_per_class": 20,
    "distill_epochs": 2, "extra_per_pose": 5, "min_errors": 1
  }
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["explain", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-world", "train-teacher", "extract-concepts", "build-scg", "distill", "explain"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    for sub in ["export-edge-weights", "exp-logic", "exp-sensitivity", "exp-bias", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_inputs_fail_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["explain", "--image", "nope.bin", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn stages_run_one_by_one_and_explain_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    for args in [
        vec!["gen-world", "--config", &cfg, "--out", o],
        vec!["train-teacher", "--config", &cfg, "--out", o],
        vec!["extract-concepts", "--config", &cfg, "--out", o],
        vec!["distill", "--config", &cfg, "--out", o],
    ] {
        let r = run(&args);
        assert_eq!(r.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    }

    let image = out.join("world/test/images/1000000.bin");
    let image = image.to_str().unwrap();
    let model = out.join("model");
    let banks = out.join("banks");
    let e = dir.path().join("e.json");
    let r = run(&[
        "explain", "--image", image, "--model", model.to_str().unwrap(), "--banks", banks.to_str().unwrap(),
        "--out", e.to_str().unwrap(), "--config", &cfg,
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let expl = reasongraph::vdi::parse_explanation(&std::fs::read_to_string(&e).unwrap()).unwrap();
    assert_eq!(expl.class_ids, vec![0, 1, 2]);
    expl.check_identities(1e-8).unwrap();

    let dot = dir.path().join("e.dot");
    let r = run(&["explain", "--image", image, "--model", model.to_str().unwrap(), "--out", dot.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));

    let w = dir.path().join("w.csv");
    let r = run(&["export-edge-weights", "--model", model.to_str().unwrap(), "--format", "csv", "--out", w.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    // Header plus 3 classes × 12 directed pairs.
    assert_eq!(std::fs::read_to_string(&w).unwrap().lines().count(), 1 + 36);

    let r = run(&["build-scg", "--image", image, "--out", o, "--config", &cfg]);
    assert_eq!(r.status.code(), Some(0));
    let hyps: reasongraph::scg::HypothesisSet =
        serde_json::from_str(&std::fs::read_to_string(out.join("scg.json")).unwrap()).unwrap();
    assert_eq!(hyps.graphs.len(), 3);
}

#[test]
fn exp_bias_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut reports = Vec::new();
    for run_id in ["a", "b"] {
        let out = dir.path().join(run_id);
        let r = bin()
            .args(["exp-bias", "--seed", "7", "--config", &cfg, "--quiet"])
            .env("REASONGRAPH_OUT", &out)
            .output()
            .unwrap();
        // Thresholds are not the point at this scale; 2 is a legitimate outcome.
        assert!(matches!(r.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&r.stderr));
        reports.push(std::fs::read(out.join("bias.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn report_gates_on_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = reasongraph::harness::ExperimentReport::new("demo", 1, &());
    ok.check(reasongraph::harness::Check::at_least("x", 1.0, 0.5));
    reasongraph::harness::save_report(&ok, dir.path(), "demo", false, 0.0).unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["report", "--out", out]).status.code(), Some(0));

    let mut bad = ok.clone();
    bad.check(reasongraph::harness::Check::at_least("y", 0.1, 0.5));
    reasongraph::harness::save_report(&bad, dir.path(), "bad", false, 0.0).unwrap();
    assert_eq!(run(&["report", "--out", out]).status.code(), Some(2));
    assert!(dir.path().join("summary.json").exists());
}
