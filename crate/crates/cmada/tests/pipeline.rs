mod common;

use std::fs;
use std::process::Command;

use cmada::artifacts::{DirLock, Layout};
use cmada::pipeline::{collect_evaluations, holdout_count, METHOD_ORDER};
use cmada::{run_ablation, run_plan, run_stage, Context, Error, Stage, Variant};

use common::tiny;

fn quiet(_: &str) {}

#[test]
fn holdout_leaves_a_training_volume() {
    assert_eq!(holdout_count(8, 0.2), 2);
    assert_eq!(holdout_count(3, 0.3), 1);
    assert_eq!(holdout_count(2, 0.9), 1);
    assert_eq!(holdout_count(1, 0.5), 0);
}

#[test]
fn evaluate_before_training_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(dir.path()), Variant::Full, false).unwrap();
    match run_stage(&ctx, Stage::Evaluate) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "preprocess"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    run_stage(&ctx, Stage::Synth).unwrap();
    run_stage(&ctx, Stage::Preprocess).unwrap();
    match run_stage(&ctx, Stage::Evaluate) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "select"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn stage_outside_the_plan_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(dir.path()), Variant::S1Only, false).unwrap();
    assert!(matches!(
        run_stage(&ctx, Stage::Adapt),
        Err(Error::NotInPlan { .. })
    ));
}

#[test]
fn second_writer_is_locked_out() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(dir.path()), Variant::Full, false).unwrap();
    let held = DirLock::acquire(&Layout::new(dir.path())).unwrap();
    assert!(matches!(
        run_stage(&ctx, Stage::Synth),
        Err(Error::Locked(_))
    ));
    drop(held);
    run_stage(&ctx, Stage::Synth).unwrap();
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn predecessor_from_another_config_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(
        &Context::new(cfg.clone(), Variant::Full, false).unwrap(),
        Stage::Synth,
    )
    .unwrap();
    let mut other = cfg;
    other.seed += 1;
    let strict = Context::new(other.clone(), Variant::Full, false).unwrap();
    assert!(matches!(
        run_stage(&strict, Stage::Preprocess),
        Err(Error::HashMismatch { .. })
    ));
    let lax = Context::new(other, Variant::Full, true).unwrap();
    run_stage(&lax, Stage::Preprocess).unwrap();
}

#[test]
fn ablation_writes_every_method_in_report_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut lines = Vec::new();
    run_ablation(&cfg, false, &mut |l| lines.push(l.to_string())).unwrap();
    let ctx = Context::new(cfg.clone(), Variant::Full, false).unwrap();
    let tables = collect_evaluations(&ctx).unwrap();
    let methods: Vec<&str> = tables.iter().map(|t| t.method.as_str()).collect();
    assert_eq!(methods, METHOD_ORDER);
    for t in &tables {
        assert_eq!(t.config_hash, cfg.hash());
        assert_eq!(t.classes, vec![1, 2]);
        assert_eq!(t.rows.len(), 2 * 3);
        assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.2)));
    }
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let pos: Vec<usize> = METHOD_ORDER
        .iter()
        .map(|m| report.find(&format!("\n{m} ")).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{report}");
    assert!(dir.path().join("report.tsv").exists());
    let scores = fs::read_to_string(dir.path().join("variants/full/select/scores.tsv")).unwrap();
    assert!(scores
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("checkpoint\tstep\tr_1\tr_2\tdiceLoss_1\tdiceLoss_2"));

    // a second pass reuses the shared stages
    let ctx = Context::new(cfg, Variant::NoAdapt, false).unwrap();
    let mut again = Vec::new();
    run_plan(&ctx, &mut |l| again.push(l.to_string())).unwrap();
    assert_eq!(again[0], "synth: up to date");
    assert_eq!(again[1], "preprocess: up to date");
}

#[test]
fn report_refuses_results_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ctx = Context::new(cfg.clone(), Variant::NoAdapt, false).unwrap();
    run_plan(&ctx, &mut quiet).unwrap();
    let mut other = cfg;
    other.supervised.epochs += 1;
    let strict = Context::new(other.clone(), Variant::NoAdapt, false).unwrap();
    assert!(matches!(
        run_stage(&strict, Stage::Report),
        Err(Error::HashMismatch { .. })
    ));
    let lax = Context::new(other, Variant::NoAdapt, true).unwrap();
    run_stage(&lax, Stage::Report).unwrap();
}

#[test]
fn cli_reports_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cmada"))
        .args(["evaluate", "--variant", "no_adapt", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains("preprocess"), "{err}");
}

#[test]
fn cli_prints_config_with_its_hash() {
    let out = Command::new(env!("CARGO_BIN_EXE_cmada"))
        .args(["show-config", "--preset", "crossmoda", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let mut cfg = cmada::RunConfig::preset(cmada::Preset::Crossmoda);
    cfg.seed = 3;
    assert!(
        text.starts_with(&format!("# config_hash = {}", cfg.hash())),
        "{text}"
    );
}
