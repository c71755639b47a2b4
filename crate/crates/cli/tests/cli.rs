use std::path::Path;
use std::process::{Command, Output};

fn blns(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blns"))
        .current_dir(dir)
        .env_remove("BLNS_OUT")
        .args(args)
        .output()
        .expect("spawn blns")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_common_flag_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--seed", "--out", "--config", "--threads", "--preset"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(text.contains("[default: blns-out]"));
    for cmd in ["train", "hessian", "steer", "tasks", "diagnose", "report", "run-all"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let o = blns(dir.path(), &["train", "--help"]);
    assert!(stdout(&o).contains("[default: all]"));
}

#[test]
fn train_single_variant_writes_checkpoint_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(
        dir.path(),
        &["--preset", "toy", "--out", "run", "train", "--variant", "single_control", "--steps", "10"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("run/checkpoints/single_control.blns");
    assert!(ckpt.exists());
    assert!(stdout(&o).contains("single_control.blns"));
    let curve = std::fs::read_to_string(dir.path().join("run/checkpoints/single_control_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 10);
    assert!(!dir.path().join("run/checkpoints/cascade_aux.blns").exists());
}

#[test]
fn train_all_gives_equal_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(dir.path(), &["--preset", "toy", "--out", "run", "train", "--variant", "all", "--steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = std::fs::read_to_string(dir.path().join("run/checkpoints/train.jsonl")).unwrap();
    let counts: Vec<u64> = records
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["record"]["param_count"].as_u64().unwrap()
        })
        .collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    for name in ["cascade_aux", "cascade_control", "single_aux", "single_control"] {
        assert!(dir.path().join(format!("run/checkpoints/{name}.blns")).exists());
    }
}

#[test]
fn invalid_variant_is_a_usage_error_listing_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(dir.path(), &["train", "--variant", "double_aux"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["cascade_aux", "cascade_control", "single_aux", "single_control"] {
        assert!(e.contains(name), "{e}");
    }
}

#[test]
fn stages_before_train_name_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["hessian", "steer", "tasks"] {
        let o = blns(dir.path(), &["--preset", "toy", "--out", "run", stage]);
        assert!(!o.status.success());
        let e = stderr(&o);
        assert!(e.contains(stage), "{e}");
        assert!(e.contains("checkpoints/cascade_aux.blns"), "{e}");
    }
    let o = blns(dir.path(), &["--preset", "toy", "--out", "run", "report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("raw/phase1.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 4\n").unwrap();
    let o = blns(dir.path(), &["--config", "bad.toml", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn diagnose_synthetic_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(dir.path(), &["diagnose", "--synthetic", "isotropic"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("cosine 1.000000") && s.contains("verdict sound"), "{s}");
    let o = blns(dir.path(), &["diagnose", "--synthetic", "crushed"]);
    let s = stdout(&o);
    assert!(s.contains("cosine 0.000000") && s.contains("verdict unreliable"), "{s}");
}

#[test]
fn out_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_blns"))
        .current_dir(dir.path())
        .env("BLNS_OUT", "from_env")
        .args(["--preset", "toy", "train", "--variant", "single_aux", "--steps", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from_env/checkpoints/single_aux.blns").exists());
}

#[test]
fn staged_pipeline_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "preset = \"toy\"\n[train]\nsteps = 5\n[phase2]\nn_contexts = 2\nmax_steps = 30\n";
    std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let common = ["--config", "run.toml", "--out", "run", "--seed", "3"];
    for stage in [&["train"][..], &["hessian"], &["steer"], &["tasks"], &["report"]] {
        let args: Vec<&str> = common.iter().chain(stage).copied().collect();
        let o = blns(dir.path(), &args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    for f in files {
        assert!(run.join(f["path"].as_str().unwrap()).exists());
    }
    for t in ["table1_effective_rank", "table2_condition_trace", "table3_kl_advantage", "table4_cosine"] {
        assert!(run.join(format!("tables/{t}.csv")).exists(), "{t}");
        assert!(run.join(format!("tables/{t}.txt")).exists(), "{t}");
    }

    // Diagnosing a trained checkpoint prints a cosine and a verdict.
    let args: Vec<&str> = common.iter().copied().chain(["diagnose", "--variant", "cascade_aux", "--layer", "0"]).collect();
    let o = blns(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict "));
}

#[test]
fn run_all_toy_matches_the_staged_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = blns(dir.path(), &["--preset", "toy", "--out", "a", "run-all", "--steps", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("table3_kl_advantage.csv"));
    let staged = ["train", "hessian", "steer", "tasks", "report"];
    for s in staged {
        let args = ["--preset", "toy", "--out", "b", s];
        let args: Vec<&str> = if s == "train" {
            args.iter().copied().chain(["--steps", "4"]).collect()
        } else {
            args.to_vec()
        };
        let o = blns(dir.path(), &args);
        assert!(o.status.success(), "{s}: {}", stderr(&o));
    }
    for t in ["table1_effective_rank.csv", "table3_kl_advantage.csv", "task_summary.csv"] {
        let a = std::fs::read(dir.path().join("a/tables").join(t)).unwrap();
        let b = std::fs::read(dir.path().join("b/tables").join(t)).unwrap();
        assert_eq!(a, b, "{t}");
    }
}
