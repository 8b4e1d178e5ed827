//! End-to-end pipeline behavior on a miniature configuration.

use dra_cli::config::{Arm, RunConfig};
use dra_cli::ledger::Ledger;
use dra_cli::pipeline::Pipeline;
use dra_cli::report::emit_report;

fn tiny_config(name: &str) -> RunConfig {
    let mut cfg: RunConfig = toml::from_str(
        r#"
        [run]
        seeds = [0]
        arms = ["AT"]
        [dataset]
        train_per_class = 24
        test_per_class = 12
        [diffusion]
        steps = 30
        batch_size = 8
        width = 6
        [pool]
        count = 32
        [recipe]
        epochs = 1
        batch_size = 8
        pgd_steps = 2
        peak_lr = 0.02
        encoder = { kind = "small-conv", width = 4 }
        [eval]
        preset = "fast-pgd"
        examples = 16
        [analysis]
        examples = 12
        cls_dim = false
        sae = false
        "#,
    )
    .unwrap();
    cfg.run.name = name.to_string();
    cfg
}

#[test]
fn single_arm_inventory_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("single");
    let pipeline = Pipeline::open(cfg.clone(), Some(dir.path()), false).unwrap();
    let first = pipeline.run_all().unwrap();
    assert!(!first.executed.is_empty());
    // Dependency re-checks may record skips, but no stage runs twice.
    let mut executed = first.executed.clone();
    executed.sort();
    executed.dedup();
    assert_eq!(executed.len(), first.executed.len());

    // Inventory: exactly one checkpoint, one eval row, one analysis record.
    let cell = pipeline.cell_dir(Arm::At, 0);
    assert!(pipeline.checkpoint_path(Arm::At, 0).exists());
    assert!(cell.join("eval.json").exists());
    assert!(cell.join("analysis.json").exists());
    let ledger = Ledger::at(&pipeline.run_dir);
    let rows = ledger.rows().unwrap();
    assert_eq!(rows.iter().filter(|r| r.kind == "eval").count(), 1);
    assert_eq!(rows.iter().filter(|r| r.kind == "analysis").count(), 1);
    // AT-only run builds no diffusion model or pool.
    assert!(!pipeline.diffusion_path().exists());
    assert!(!pipeline.pool_path().exists());

    // Re-invoking an already-complete run executes nothing.
    let second = pipeline.run_all().unwrap();
    assert!(second.executed.is_empty(), "re-ran: {:?}", second.executed);
    assert!(!second.skipped.is_empty());
    let rows_after = ledger.rows().unwrap();
    assert_eq!(rows.len(), rows_after.len(), "ledger grew on idempotent rerun");
}

#[test]
fn config_change_is_refused_then_accepted_with_scoped_invalidation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("lock");
    let pipeline = Pipeline::open(cfg.clone(), Some(dir.path()), false).unwrap();
    pipeline.run_all().unwrap();

    let mut changed = cfg.clone();
    changed.eval.examples = 8;
    let err = match Pipeline::open(changed.clone(), Some(dir.path()), false) {
        Err(e) => e,
        Ok(_) => panic!("config change was not refused"),
    };
    let msg = err.to_string();
    assert!(msg.contains("eval.examples"), "diff missing from: {msg}");

    // Accepting the change invalidates eval (and analysis, which also keys
    // on the eval section) but not training.
    let pipeline = Pipeline::open(changed, Some(dir.path()), true).unwrap();
    let outcome = pipeline.run_all().unwrap();
    assert!(outcome.skipped.iter().any(|s| s.starts_with("train/")));
    assert!(outcome.executed.iter().any(|s| s.starts_with("eval/")));
    assert!(!outcome.executed.iter().any(|s| s.starts_with("train/")));
}

#[test]
fn grid_produces_distinct_rows_and_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("grid");
    cfg.run.arms = vec![Arm::At, Arm::AtDra];
    cfg.run.seeds = vec![0, 1];
    let pipeline = Pipeline::open(cfg, Some(dir.path()), false).unwrap();
    pipeline.run_all().unwrap();

    let rows = Ledger::at(&pipeline.run_dir).rows().unwrap();
    let eval_keys: Vec<(String, u64)> = rows
        .iter()
        .filter(|r| r.kind == "eval")
        .map(|r| (r.arm.clone(), r.seed))
        .collect();
    assert_eq!(eval_keys.len(), 4);
    let mut dedup = eval_keys.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), 4, "duplicate (arm, seed) rows");

    // DRA arm required the diffusion model.
    assert!(pipeline.diffusion_path().exists());

    let files = emit_report(&pipeline.run_dir).unwrap();
    assert!(files.iter().any(|f| f.ends_with("results.csv")));
    assert!(files.iter().any(|f| f.ends_with("reference_comparison.csv")));
    assert!(files.iter().any(|f| f.ends_with("scatter.csv")));
    // Frequency maps for both arms, plus the AT+DRA minus AT difference.
    assert!(files
        .iter()
        .any(|f| f.to_string_lossy().contains("diff-at-dra-minus-at")));

    // Reports regenerate bit-identically.
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let files2 = emit_report(&pipeline.run_dir).unwrap();
    assert_eq!(files, files2);
    for (f, prior) in files.iter().zip(before.iter()) {
        assert_eq!(&std::fs::read(f).unwrap(), prior, "{} changed", f.display());
    }
}
