//! Append-only JSON-lines results ledger with a sidecar CSV export.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dra_core::error::{Error, Result};

/// One ledger row. `kind` distinguishes eval rows, analysis summaries and
/// lambda-sweep rows; unused fields stay None and serialize away.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LedgerRow {
    pub kind: String,
    pub run: String,
    pub arm: String,
    pub seed: u64,
    pub checkpoint_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cknna: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls95: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls99: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sae_losses: Option<Vec<(usize, f64)>>,
}

impl LedgerRow {
    pub fn new(kind: &str, run: &str, arm: &str, seed: u64, checkpoint_id: &str) -> Self {
        LedgerRow {
            kind: kind.into(),
            run: run.into(),
            arm: arm.into(),
            seed,
            checkpoint_id: checkpoint_id.into(),
            preset: None,
            weights: None,
            lambda: None,
            clean: None,
            robust: None,
            uniformity: None,
            alignment: None,
            cknna: None,
            cls95: None,
            cls99: None,
            robust_dim: None,
            sae_losses: None,
        }
    }
}

/// The ledger file pair under a run directory.
pub struct Ledger {
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl Ledger {
    pub fn at(run_dir: &Path) -> Self {
        let dir = run_dir.join("ledger");
        Ledger {
            jsonl_path: dir.join("results.jsonl"),
            csv_path: dir.join("results.csv"),
        }
    }

    pub fn jsonl_path(&self) -> &Path {
        &self.jsonl_path
    }

    /// Append one row and refresh the CSV export.
    pub fn append(&self, row: &LedgerRow) -> Result<()> {
        if let Some(parent) = self.jsonl_path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.jsonl_path)?;
        let line = serde_json::to_string(row)
            .map_err(|e| Error::Generation(format!("ledger row: {e}")))?;
        writeln!(f, "{line}")?;
        self.export_csv()?;
        Ok(())
    }

    pub fn rows(&self) -> Result<Vec<LedgerRow>> {
        if !self.jsonl_path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.jsonl_path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: LedgerRow = serde_json::from_str(line).map_err(|e| {
                Error::Generation(format!("ledger line {}: {e}", i + 1))
            })?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Rows of a given kind for (arm, seed), newest last.
    pub fn rows_for(&self, kind: &str, arm: &str, seed: u64) -> Result<Vec<LedgerRow>> {
        Ok(self
            .rows()?
            .into_iter()
            .filter(|r| r.kind == kind && r.arm == arm && r.seed == seed)
            .collect())
    }

    fn export_csv(&self) -> Result<()> {
        let rows = self.rows()?;
        let mut w = csv::Writer::from_path(&self.csv_path)
            .map_err(|e| Error::Generation(format!("csv export: {e}")))?;
        w.write_record([
            "kind", "run", "arm", "seed", "checkpoint_id", "preset", "weights", "lambda",
            "clean", "robust", "uniformity", "alignment", "cknna", "cls95", "cls99",
            "robust_dim", "sae_losses",
        ])
        .map_err(|e| Error::Generation(format!("csv export: {e}")))?;
        let fmt_f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let fmt_u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in rows {
            let sae = r
                .sae_losses
                .as_ref()
                .map(|ls| {
                    ls.iter()
                        .map(|(k, l)| format!("K{k}:{l}"))
                        .collect::<Vec<_>>()
                        .join(";")
                })
                .unwrap_or_default();
            w.write_record([
                r.kind.clone(),
                r.run.clone(),
                r.arm.clone(),
                r.seed.to_string(),
                r.checkpoint_id.clone(),
                r.preset.clone().unwrap_or_default(),
                r.weights.clone().unwrap_or_default(),
                fmt_f(r.lambda),
                fmt_f(r.clean),
                fmt_f(r.robust),
                fmt_f(r.uniformity),
                fmt_f(r.alignment),
                fmt_f(r.cknna),
                fmt_u(r.cls95),
                fmt_u(r.cls99),
                fmt_u(r.robust_dim),
                sae,
            ])
            .map_err(|e| Error::Generation(format!("csv export: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::at(dir.path());
        let mut row = LedgerRow::new("eval", "r", "AT", 0, "abc");
        row.clean = Some(0.9);
        row.robust = Some(0.6);
        row.preset = Some("strong-pgd".into());
        ledger.append(&row).unwrap();
        let mut row2 = LedgerRow::new("eval", "r", "AT+DRA", 1, "def");
        row2.clean = Some(0.92);
        ledger.append(&row2).unwrap();

        let rows = ledger.rows().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], row);
        assert_eq!(ledger.rows_for("eval", "AT+DRA", 1).unwrap().len(), 1);
        assert!(dir.path().join("ledger/results.csv").exists());
        let csv_text = std::fs::read_to_string(dir.path().join("ledger/results.csv")).unwrap();
        assert!(csv_text.lines().count() == 3);
        assert!(csv_text.contains("strong-pgd"));
    }
}
