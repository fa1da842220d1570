mod common;

use std::path::Path;
use std::process::{Command, Output};

use dss::config::AttackSpec;

fn dss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dss")).args(args).output().expect("run dss")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let out = dss(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for sub in [
        "train-model", "attack", "run-dss", "features", "detect-train", "detect-eval", "experiment", "sweep",
        "generalize", "ablate", "diagnose", "fig6",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dss(&["experiment", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let mnist = common::mnist_dir();
    let model = common::model_path();
    let o = dir.path().join("o");
    let base = ["experiment", "--mnist-dir", s(&mnist), "--model", s(&model), "--examples", "5"];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = base.to_vec();
        v.extend_from_slice(extra);
        v.extend_from_slice(&["--output-dir", s(&o)]);
        dss(&v)
    };
    for extra in [&["--attacks", "fgsm:0"][..], &["--attacks", "cw:0.3"], &["--disrupt-ratio", "2"], &["--norms", "l7"]] {
        let out = with(extra);
        assert_eq!(code(&out), 2, "{extra:?}: {}", stderr(&out));
    }
    assert!(!o.exists());
}

#[test]
fn zero_triplets_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let examples = common::mnist_test(4);
    let clean = dir.path().join("clean.csv");
    let imgs: Vec<&dss_core::Tensor> = examples.iter().map(|e| e.image.as_tensor()).collect();
    dss::formats::write_tensors(&clean, examples[0].image.shape(), &imgs).unwrap();
    let mut cfg = common::mnist_config(4, &dir.path().join("out"));
    cfg.attacks = vec![AttackSpec::Recorded { name: "unchanged".into(), epsilon: 0.3, adversarial: clean }];
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = dss(&["experiment", "--config", s(&cfg_path)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("no usable triplets"), "{}", stderr(&out));
}

#[test]
fn unreadable_input_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "# shape=1,28,28\n0.1,0.2\n").unwrap();
    let model = common::model_path();
    let out = dss(&["run-dss", "--model", s(&model), "--input", s(&bad), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn stepwise_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mnist = common::mnist_dir();
    let model = common::model_path();

    let out = dss(&[
        "attack", "--mnist-dir", s(&mnist), "--model", s(&model), "--examples", "30", "--attacks", "fgsm:0.3",
        "--output-dir", s(&p("unused")), "--out", s(&p("triplets")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("triplets kept"));
    let (set, meta) = dss::formats::load_triplets(p("triplets")).unwrap();
    assert_eq!(meta.attack, "fgsm");
    assert!(!set.triplets.is_empty());

    let out = dss(&["features", "--model", s(&model), "--triplets", s(&p("triplets")), "--out", s(&p("f.csv"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = dss::formats::read_features(p("f.csv")).unwrap();
    assert_eq!(table.len(), 3 * set.triplets.len());

    let out = dss(&[
        "detect-train", "--features", s(&p("f.csv")), "--out", s(&p("d.json")), "--held-out", s(&p("held.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("held-out AUC"));

    let out = dss(&[
        "detect-eval", "--detector", s(&p("d.json")), "--features", s(&p("held.csv")), "--out", s(&p("scores.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let scores = std::fs::read_to_string(p("scores.csv")).unwrap();
    assert!(scores.starts_with("id,label,score\n"));

    // a detector trained on one view refuses another
    let out = dss(&["detect-eval", "--detector", s(&p("d.json")), "--features", s(&p("held.csv")), "--view", "pixel"]);
    assert_ne!(code(&out), 0);

    let out = dss(&["diagnose", "--model", s(&model), "--triplets", s(&p("triplets")), "--out", s(&p("res.csv"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("adversarial residuals are non-zero"));

    let out = dss(&[
        "run-dss", "--model", s(&model), "--input", s(&p("triplets/adv.csv")), "--index", "0", "--out", s(&p("traj")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let traj = dss::formats::load_trajectory(p("traj")).unwrap();
    assert_eq!(traj.loops(), 5);
    assert_eq!(traj.masks[0].disrupted_count(), 23);
}

#[test]
fn experiment_writes_the_report_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("exp");
    let mnist = common::mnist_dir();
    let model = common::model_path();
    let args = [
        "experiment", "--mnist-dir", s(&mnist), "--model", s(&model), "--examples", "25", "--attacks", "fgsm:0.3",
        "--output-dir", s(&out_dir),
    ];
    let out = dss(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["report/auc.csv", "report/roc_fgsm.csv", "report/fig6.csv", "report/provenance.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let first = std::fs::read(out_dir.join("report/auc.csv")).unwrap();
    // rerunning over an existing report replaces it
    let out = dss(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(out_dir.join("report/auc.csv")).unwrap(), first);

    // the embedded config reproduces the run
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report/provenance.json")).unwrap()).unwrap();
    let mut cfg: dss::config::ExperimentConfig = serde_json::from_value(prov["config"].clone()).unwrap();
    cfg.output_dir = dir.path().join("again");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = dss(&["experiment", "--config", s(&cfg_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(dir.path().join("again/report/auc.csv")).unwrap(), first);
}
