//! Acceptance: deterministic replay of the full pipeline.
//!
//! Two complete toy runs (diffusion training, pool generation, all four
//! arms, evaluation, analyses, report emission) into separate directories
//! must produce bit-identical artifacts, verified by content hashes.

use std::path::{Path, PathBuf};

use dra_cli::config::{Arm, RunConfig};
use dra_cli::pipeline::Pipeline;
use dra_cli::report::emit_report;
use dra_core::archive::sha256_file;

fn full_toy_config() -> RunConfig {
    let mut cfg: RunConfig = toml::from_str(
        r#"
        [run]
        name = "replay"
        seeds = [0]
        arms = ["AT", "AT+DRA", "DM-AT", "DM-AT+DRA"]
        [dataset]
        train_per_class = 32
        test_per_class = 16
        [diffusion]
        steps = 60
        batch_size = 8
        width = 6
        [pool]
        count = 48
        [recipe]
        epochs = 2
        batch_size = 8
        pgd_steps = 3
        peak_lr = 0.02
        encoder = { kind = "small-conv", width = 4 }
        [eval]
        preset = "fast-pgd"
        examples = 16
        [analysis]
        examples = 12
        [lambda_sweep]
        grid = [0.0, 1.2]
        "#,
    )
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Every regular file under `dir`, relative path -> content hash.
fn hash_tree(dir: &Path) -> Vec<(PathBuf, String)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, String)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, sha256_file(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn determinism_two_full_runs_hash_identically() {
    let root_a = tempfile::tempdir().unwrap();
    let root_b = tempfile::tempdir().unwrap();
    let cfg = full_toy_config();

    for root in [root_a.path(), root_b.path()] {
        let pipeline = Pipeline::open(cfg.clone(), Some(root), false).unwrap();
        pipeline.run_all().unwrap();
        pipeline.sweep_lambda().unwrap();
        emit_report(&pipeline.run_dir).unwrap();
    }

    let run_a = root_a.path().join(&cfg.run.name);
    let run_b = root_b.path().join(&cfg.run.name);
    let hashes_a = hash_tree(&run_a);
    let hashes_b = hash_tree(&run_b);

    assert_eq!(
        hashes_a.len(),
        hashes_b.len(),
        "different artifact inventories"
    );
    let mut mismatches = Vec::new();
    for ((pa, ha), (pb, hb)) in hashes_a.iter().zip(hashes_b.iter()) {
        assert_eq!(pa, pb, "artifact inventories diverge");
        if ha != hb {
            mismatches.push(pa.clone());
        }
    }
    let pass = mismatches.is_empty();
    println!(
        "[{}] determinism: {} artifacts compared, {} mismatched {:?}",
        if pass { "PASS" } else { "FAIL" },
        hashes_a.len(),
        mismatches.len(),
        mismatches
    );
    assert!(pass, "non-deterministic artifacts: {mismatches:?}");

    // Sanity on inventory: four checkpoints, diffusion model, pool, ledger.
    let names: Vec<String> = hashes_a
        .iter()
        .map(|(p, _)| p.to_string_lossy().into_owned())
        .collect();
    for arm in Arm::all() {
        assert!(names
            .iter()
            .any(|n| n.contains(&format!("arms/{}/seed0/checkpoint.dra", arm.slug()))));
    }
    assert!(names.iter().any(|n| n.ends_with("diffusion/model.dra")));
    assert!(names.iter().any(|n| n.ends_with("pool/pool.dra")));
    assert!(names.iter().any(|n| n.ends_with("ledger/results.jsonl")));
    assert!(names.iter().any(|n| n.contains("report/")));
}
