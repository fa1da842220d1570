//! Experiment studies and the report directory, on a small MNIST slice.

mod common;

use std::sync::OnceLock;

use dss::config::{streams, AttackSpec};
use dss::error::DssError;
use dss::harness::*;
use dss_core::monitor::{fit_detector, roc_auc, FeatureTable, FeatureView};
use dss_core::RandomSeed;

const EXAMPLES: usize = 300;

struct Shared {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
    fgsm: AttackRun,
    pgd: AttackRun,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::mnist_config(EXAMPLES, &dir.path().join("out"));
        let pipeline = Pipeline::with_model(cfg, common::model()).unwrap();
        let fgsm = pipeline.run_attack(&AttackSpec::fgsm(0.3)).unwrap();
        let pgd = pipeline.run_attack(&AttackSpec::pgd(0.3, 40)).unwrap();
        Shared { _dir: dir, pipeline, fgsm, pgd }
    })
}

#[test]
fn records_are_ordered_by_id_with_one_label_per_role() {
    let run = &shared().fgsm;
    let ids: Vec<&str> = run.stability.table.records.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(ids.len(), 3 * run.triplets.triplets.len());
    for r in &run.stability.table.records {
        assert_eq!(r.label, u8::from(r.id.ends_with("-adv")));
    }
    assert_eq!(run.stability.table.columns.len(), 5 * 4 * 3);
}

#[test]
fn held_out_records_never_enter_training() {
    let run = &shared().fgsm;
    let split = &run.detection.split;
    let mut all: Vec<usize> = split.train.iter().chain(&split.held_out).copied().collect();
    all.sort();
    assert_eq!(all, (0..run.stability.table.len()).collect::<Vec<_>>());
    let expected_train = (run.stability.table.len() as f64 * 0.8).round() as usize;
    assert!(split.train.len().abs_diff(expected_train) <= 1);
}

#[test]
fn divergence_report_shape_and_ordering() {
    let runs = [shared().fgsm.clone()];
    let csv = emit_divergence_report(&divergence_groups(&runs)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 6);
    for class in ["clean", "noisy", "adversarial"] {
        let mine: Vec<_> = rows.iter().filter(|r| r[2] == class).collect();
        assert_eq!(mine.len(), 6, "{class}");
        assert_eq!((mine[0][3], mine[0][4]), ("0", "0"));
    }
    let at_n = |class: &str| -> f64 { rows.iter().find(|r| r[1] == "5" && r[2] == class).unwrap()[3].parse().unwrap() };
    assert!(at_n("clean") <= at_n("adversarial"));

    let empty: Vec<(&str, &str, Vec<&RecordDistances>)> = vec![("fgsm", "clean", vec![])];
    assert!(emit_divergence_report(&empty).is_err());
}

#[test]
fn self_transfer_reproduces_the_detection_auc() {
    let run = &shared().fgsm;
    let rows = transfer(run, &[run], FeatureView::Both, &shared().pipeline.config.detector).unwrap();
    assert_eq!(rows[0].test_records, run.detection.held_out.len());
    assert_eq!(rows[0].auc, run.auc());
}

#[test]
fn pixel_and_logit_views_transfer_differently() {
    let s = shared();
    let settings = &s.pipeline.config.detector;
    let pixel = transfer(&s.fgsm, &[&s.pgd], FeatureView::Pixel, settings).unwrap();
    let logit = transfer(&s.fgsm, &[&s.pgd], FeatureView::Logit, settings).unwrap();
    assert_ne!(pixel[0].auc, logit[0].auc);
    assert_eq!(pixel[0].test_records, logit[0].test_records);
}

#[test]
fn transfer_excludes_ids_seen_in_training() {
    let s = shared();
    let rows = transfer(&s.fgsm, &[&s.pgd], FeatureView::Logit, &s.pipeline.config.detector).unwrap();
    let train_ids: std::collections::BTreeSet<&str> = s
        .fgsm
        .detection
        .split
        .train
        .iter()
        .map(|&i| s.fgsm.stability.table.records[i].id.as_str())
        .collect();
    let fresh = s
        .pgd
        .detection
        .split
        .held_out
        .iter()
        .filter(|&&i| !train_ids.contains(s.pgd.stability.table.records[i].id.as_str()))
        .count();
    assert_eq!(rows[0].test_records, fresh);
}

#[test]
fn combined_view_is_not_worse_than_either_part() {
    for run in [&shared().fgsm, &shared().pgd] {
        let rows = ablate(run, &shared().pipeline.config.detector).unwrap();
        assert_eq!(rows.len(), 3);
        let auc = |v: FeatureView| rows.iter().find(|r| r.view == v).unwrap().auc;
        let (p, l, both) = (auc(FeatureView::Pixel), auc(FeatureView::Logit), auc(FeatureView::Both));
        assert!(both >= p.max(l) - 0.02, "{}: P {p} L {l} P+L {both}", run.name);
        assert_eq!(both, run.auc());
    }
    let csv = ablation_csv(&ablate(&shared().fgsm, &shared().pipeline.config.detector).unwrap());
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains("fgsm,P+L,"));
}

#[test]
fn constant_pixel_features_carry_no_signal() {
    let mut t = FeatureTable::new(vec!["t1_pix_comp_l2".into(), "t1_logit_comp_l2".into()]);
    for i in 0..40 {
        t.push(format!("{i:06}-x"), (i % 2) as u8, vec![0.0, (i % 2) as f64 + i as f64 / 100.0]).unwrap();
    }
    let pixel = t.select(FeatureView::Pixel);
    assert_eq!(pixel.columns, ["t1_pix_comp_l2"]);
    let d = fit_detector(&pixel, &shared().pipeline.config.detector.logistic()).unwrap();
    let auc = roc_auc(&d.decisions(&pixel).unwrap(), &pixel.labels()).unwrap().auc;
    assert_eq!(auc, 0.5);
}

#[test]
fn residual_rows_cover_every_triplet_member() {
    let s = shared();
    let rows = lyapunov_residuals(&s.pipeline.model, &s.fgsm.triplets, 0.075).unwrap();
    assert_eq!(rows.len(), 3 * s.fgsm.triplets.triplets.len());
    let csv = residuals_csv(&rows);
    assert!(csv.starts_with("id,true_label,predicted,residual_l2,vdot\n"));
    for r in rows.iter().filter(|r| r.id.ends_with("-adv")) {
        assert_ne!(r.predicted, r.true_label);
    }
}

#[test]
fn ratio_lists_are_sorted_and_deduplicated() {
    let (r, warnings) = normalize_ratios(&[0.05, 0.01, 0.05, 0.03]).unwrap();
    assert_eq!(r, [0.01, 0.03, 0.05]);
    assert_eq!(warnings.len(), 1);
    assert!(normalize_ratios(&[0.0]).is_err());
    assert!(normalize_ratios(&[1.0]).is_err());
    assert!(normalize_ratios(&[]).is_err());
}

#[test]
fn ratio_too_small_for_any_pixel_is_an_error() {
    let s = shared();
    let x = &s.fgsm.triplets.triplets[0].clean.image;
    let dss = dss_core::stability::DssConfig { disrupt_ratio: 0.001, ..s.pipeline.config.dss.dss_config() };
    assert!(s.pipeline.run_dss(x, &dss).is_err());
}

#[test]
fn sensitivity_sweep_writes_one_row_per_distinct_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::mnist_config(60, &dir.path().join("sweep"));
    cfg.attacks = vec![AttackSpec::fgsm(0.3)];
    let pipeline = Pipeline::with_model(cfg, common::model()).unwrap();
    let (ratios, warnings) = normalize_ratios(&[0.05, 0.03, 0.05]).unwrap();
    let report = sensitivity_with(&pipeline, &ratios, warnings).unwrap();
    assert_eq!(report.points.len(), 2);
    assert_eq!(report.warnings.len(), 1);
    let csv = std::fs::read_to_string(report.output_dir.join("report/sweep_ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("ratio,attack,triplets,auc\n"));
    for name in ["report/auc.csv", "report/provenance.json", "report/roc_fgsm_r0.03.csv", "features/fgsm_r0.05.csv"] {
        assert!(report.output_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn intensity_sweep_needs_two_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mnist_config(20, &dir.path().join("x"));
    for eps in [&[0.3][..], &[0.3, 0.3]] {
        assert!(matches!(run_intensity_sweep(cfg.clone(), eps), Err(DssError::Config(_))));
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn pgd_detection_does_not_degrade_with_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::mnist_config(1000, &dir.path().join("eps"));
    cfg.attacks = vec![AttackSpec::pgd(0.3, 40)];
    let report = run_intensity_sweep(cfg, &[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(report.points.len(), 3);
    let csv = std::fs::read_to_string(report.output_dir.join("report/sweep_epsilon.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let aucs: Vec<f64> = report.points.iter().map(|p| p.auc).collect();
    for w in aucs.windows(2) {
        assert!(w[1] >= w[0] - 0.03, "AUC by epsilon {aucs:?}");
    }
}

#[test]
fn generalization_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mnist_config(20, &dir.path().join("g"));
    let same = run_generalization_study(cfg.clone(), "fgsm", &["fgsm".into()], FeatureView::Logit);
    assert!(matches!(same, Err(DssError::Config(_))));
    match run_generalization_study(cfg, "fgsm", &["cw".into()], FeatureView::Logit) {
        Err(DssError::Config(msg)) => assert!(msg.contains("cw"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn zero_triplets_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.csv");
    let examples = common::mnist_test(3);
    let images: Vec<&dss_core::Tensor> = examples.iter().map(|e| e.image.as_tensor()).collect();
    dss::formats::write_tensors(&clean, examples[0].image.shape(), &images).unwrap();
    let mut cfg = common::mnist_config(3, &dir.path().join("z"));
    cfg.attacks = vec![AttackSpec::Recorded { name: "none".into(), epsilon: 0.3, adversarial: clean }];
    let err = run_detection_experiment(cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("attack"), "{err}");
}

#[test]
fn identical_configs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = common::mnist_config(40, &dir.path().join(name));
        cfg.attacks = vec![AttackSpec::fgsm(0.3)];
        run_detection_experiment(cfg).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["report/auc.csv", "report/fig6.csv", "report/roc_fgsm.csv", "splits/fgsm.csv", "features/fgsm.csv"] {
        let read = |r: &ExperimentReport| std::fs::read(r.output_dir.join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
    assert_ne!(a.config_hash, "");
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.output_dir.join("report/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn output_directory_is_replaced_only_when_it_holds_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("precious");
    std::fs::create_dir(&target).unwrap();
    std::fs::write(target.join("notes.txt"), "keep").unwrap();
    let out = OutputDir::create(&target).unwrap();
    out.write("report/auc.csv", "x").unwrap();
    assert!(matches!(out.commit(), Err(DssError::Config(_))));
    assert_eq!(std::fs::read_to_string(target.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn split_seed_comes_from_the_config() {
    let s = shared();
    let again = detect(&s.fgsm.stability.table, s.pipeline.config.seed(streams::SPLIT), &s.pipeline.config.detector).unwrap();
    assert_eq!(again.split, s.fgsm.detection.split);
    let other = detect(&s.fgsm.stability.table, RandomSeed(12345), &s.pipeline.config.detector).unwrap();
    assert_ne!(other.split, s.fgsm.detection.split);
}
