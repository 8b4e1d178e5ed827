//! Experiment orchestration: the AT / DM-AT / +DRA grid with content-hashed,
//! resumable stages.
//!
//! Every stage computes a key over exactly the config sections and input
//! artifact hashes it depends on; a stage re-executes only when its key
//! changes, so editing one config field invalidates just the dependent
//! stages. A run directory locks its config; resuming with a different
//! config is refused with a field-level diff unless explicitly accepted.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array1;

use dra_core::analysis::{
    alignment_metric, classification_dimension, cknna, frequency_saliency, normalized_sae_loss,
    train_topk_sae, uniformity_metric, AnalysisReport, SaeTrainConfig, SaliencyMode,
};
use dra_core::archive::{sha256_file, ArchiveWriter};
use dra_core::attacks::{evaluate_robust_multi, worst_case_adversarial, EvalMode};
use dra_core::data::{build_synthetic_pool, load_dataset, open_pool, Dataset, Split};
use dra_core::diffusion::{train_diffusion, DiffusionModel};
use dra_core::error::{Error, Result};
use dra_core::repr::{Condition, NoiseMode, RepresentationSource};
use dra_core::rng::derive_seed;
use dra_core::robust::{train_robust, ClassifierTarget, RobustCheckpoint};

use crate::config::{config_diff, Arm, RunConfig};
use crate::ledger::{Ledger, LedgerRow};

/// What a pipeline invocation did: stage names executed vs skipped.
#[derive(Debug, Default, Clone)]
pub struct StageOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

impl StageOutcome {
    fn ran(&mut self, name: &str) {
        info!("executed stage {name}");
        self.executed.push(name.to_string());
    }

    fn skip(&mut self, name: &str) {
        info!("skipped stage {name} (up to date)");
        self.skipped.push(name.to_string());
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub ledger: Ledger,
}

impl Pipeline {
    /// Open (or create) the run directory, enforcing the config lock.
    pub fn open(
        config: RunConfig,
        root_override: Option<&Path>,
        accept_config_change: bool,
    ) -> Result<Self> {
        let run_dir = config.run_dir(root_override);
        fs::create_dir_all(&run_dir)?;
        let lock_path = run_dir.join("config.lock.json");
        let canonical = serde_json::to_string_pretty(&config.to_canonical_json())
            .expect("config serializes");
        if lock_path.exists() {
            let prior_text = fs::read_to_string(&lock_path)?;
            let prior: RunConfig = serde_json::from_str(&prior_text).map_err(|e| {
                Error::config(format!("corrupt config lock {}: {e}", lock_path.display()))
            })?;
            if prior != config {
                let diff = config_diff(&prior, &config);
                if !accept_config_change {
                    return Err(Error::config(format!(
                        "run directory {} was created with a different config; \
                         changed fields:\n  {}\nre-run with --accept-config-change to update \
                         the lock (stages whose inputs changed will re-execute)",
                        run_dir.display(),
                        diff.join("\n  ")
                    )));
                }
                info!("config lock updated; changed fields: {}", diff.join(", "));
                fs::write(&lock_path, &canonical)?;
            }
        } else {
            fs::write(&lock_path, &canonical)?;
        }
        let ledger = Ledger::at(&run_dir);
        Ok(Pipeline {
            config,
            run_dir,
            ledger,
        })
    }

    // -- stage-hash plumbing -------------------------------------------------

    fn stage_hash_path(&self, name: &str) -> PathBuf {
        let safe = name.replace('/', "_");
        self.run_dir.join(".stages").join(format!("{safe}.hash"))
    }

    fn stage_is_current(&self, name: &str, key: &str, outputs: &[&Path]) -> bool {
        let hash_path = self.stage_hash_path(name);
        match fs::read_to_string(&hash_path) {
            Ok(existing) if existing.trim() == key => outputs.iter().all(|p| p.exists()),
            _ => false,
        }
    }

    fn mark_stage(&self, name: &str, key: &str) -> Result<()> {
        let hash_path = self.stage_hash_path(name);
        if let Some(parent) = hash_path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(hash_path, key)?;
        Ok(())
    }

    fn key_of(value: &serde_json::Value) -> String {
        dra_core::archive::sha256_hex(value.to_string().as_bytes())
    }

    // -- data ----------------------------------------------------------------

    pub fn train_dataset(&self) -> Result<Dataset> {
        load_dataset(
            &self.config.dataset.spec()?,
            Split::Train,
            self.config.dataset.seed,
        )
    }

    pub fn test_subset(&self, examples: usize) -> Result<dra_core::data::LabeledImageBatch> {
        let ds = load_dataset(
            &self.config.dataset.spec()?,
            Split::Test,
            self.config.dataset.seed,
        )?;
        let n = examples.min(ds.len());
        Ok(ds.data.select(&(0..n).collect::<Vec<_>>()))
    }

    // -- shared artifacts ----------------------------------------------------

    pub fn diffusion_path(&self) -> PathBuf {
        self.run_dir.join("diffusion").join("model.dra")
    }

    pub fn pool_path(&self) -> PathBuf {
        self.run_dir.join("pool").join("pool.dra")
    }

    pub fn ensure_diffusion(&self, outcome: &mut StageOutcome) -> Result<PathBuf> {
        let path = self.diffusion_path();
        let key = Self::key_of(&serde_json::json!({
            "stage": "diffusion",
            "dataset": self.config.dataset,
            "diffusion": self.config.diffusion,
        }));
        if self.stage_is_current("diffusion", &key, &[&path]) {
            outcome.skip("diffusion");
            return Ok(path);
        }
        let data = self.train_dataset()?;
        let mut model = train_diffusion(&data, &self.config.diffusion.train_config())?;
        model.save(&path)?;
        self.mark_stage("diffusion", &key)?;
        outcome.ran("diffusion");
        Ok(path)
    }

    pub fn ensure_pool(&self, outcome: &mut StageOutcome) -> Result<PathBuf> {
        let diffusion_path = self.ensure_diffusion(outcome)?;
        let pool_path = self.pool_path();
        let key = Self::key_of(&serde_json::json!({
            "stage": "pool",
            "pool": self.config.pool,
            "diffusion_artifact": sha256_file(&diffusion_path)?,
        }));
        if self.stage_is_current("pool", &key, &[&pool_path]) {
            outcome.skip("pool");
            return Ok(pool_path);
        }
        let model = DiffusionModel::load(&diffusion_path)?;
        build_synthetic_pool(
            &model,
            self.config.pool.count,
            self.config.pool.class_balanced,
            self.config.pool.seed,
            &pool_path,
        )?;
        self.mark_stage("pool", &key)?;
        outcome.ran("pool");
        Ok(pool_path)
    }

    // -- per-cell stages -----------------------------------------------------

    pub fn cell_dir(&self, arm: Arm, seed: u64) -> PathBuf {
        self.run_dir
            .join("arms")
            .join(arm.slug())
            .join(format!("seed{seed}"))
    }

    pub fn checkpoint_path(&self, arm: Arm, seed: u64) -> PathBuf {
        self.cell_dir(arm, seed).join("checkpoint.dra")
    }

    pub fn ensure_train(&self, outcome: &mut StageOutcome, arm: Arm, seed: u64) -> Result<PathBuf> {
        let ckpt_path = self.checkpoint_path(arm, seed);
        let stage = format!("train/{}/{seed}", arm.slug());

        let diffusion_hash = if arm.uses_dra() || arm.uses_synth() {
            let p = self.ensure_diffusion(outcome)?;
            Some(sha256_file(&p)?)
        } else {
            None
        };
        let pool_hash = if arm.uses_synth() {
            let p = self.ensure_pool(outcome)?;
            Some(sha256_file(&p)?)
        } else {
            None
        };

        let key = Self::key_of(&serde_json::json!({
            "stage": "train",
            "arm": arm.id(),
            "seed": seed,
            "dataset": self.config.dataset,
            "recipe": self.config.recipe,
            "diffusion_artifact": diffusion_hash,
            "pool_artifact": pool_hash,
        }));
        if self.stage_is_current(&stage, &key, &[&ckpt_path]) {
            outcome.skip(&stage);
            return Ok(ckpt_path);
        }

        let data = self.train_dataset()?;
        let recipe = self.config.recipe.recipe(seed);
        let diffusion = if arm.uses_dra() {
            Some(DiffusionModel::load(&self.diffusion_path())?)
        } else {
            None
        };
        let pool = if arm.uses_synth() {
            Some(open_pool(&self.pool_path())?)
        } else {
            None
        };
        let ckpt = train_robust(
            &recipe,
            &data,
            pool.as_ref(),
            diffusion
                .as_ref()
                .map(|m| m as &dyn RepresentationSource),
            arm.uses_dra(),
            arm.uses_synth(),
        )?;
        ckpt.save(&ckpt_path)?;
        self.mark_stage(&stage, &key)?;
        outcome.ran(&stage);
        Ok(ckpt_path)
    }

    pub fn ensure_eval(&self, outcome: &mut StageOutcome, arm: Arm, seed: u64) -> Result<()> {
        let ckpt_path = self.ensure_train(outcome, arm, seed)?;
        let stage = format!("eval/{}/{seed}", arm.slug());
        let eval_path = self.cell_dir(arm, seed).join("eval.json");
        let key = Self::key_of(&serde_json::json!({
            "stage": "eval",
            "eval": self.config.eval,
            "checkpoint_artifact": sha256_file(&ckpt_path)?,
        }));
        if self.stage_is_current(&stage, &key, &[&eval_path]) {
            outcome.skip(&stage);
            return Ok(());
        }

        let ckpt = RobustCheckpoint::load(&ckpt_path)?;
        let model = ckpt.classifier(ckpt.recipe.eval_on_ema);
        let batch = self.test_subset(self.config.eval.examples)?;
        let preset = self.config.eval.preset()?;
        let configs = preset.configs(
            ckpt.recipe.epsilon,
            ckpt.recipe.alpha,
            derive_seed(self.config.eval.seed, arm.id(), seed),
        );
        let target = ClassifierTarget { model: &model };
        let report =
            evaluate_robust_multi(&target, &batch.images, &batch.labels, &configs, EvalMode::Plain)?;
        if let Some(w) = &report.sanity_warning {
            log::warn!("{stage}: {w}");
        }
        let checkpoint_id = sha256_file(&ckpt_path)?[..12].to_string();
        let weights = if ckpt.recipe.eval_on_ema { "ema" } else { "live" };
        let payload = serde_json::json!({
            "arm": arm.id(),
            "seed": seed,
            "checkpoint_id": checkpoint_id,
            "preset": preset.id(),
            "weights": weights,
            "clean_accuracy": report.clean_accuracy,
            "robust_accuracy": report.robust_accuracy,
            "examples": batch.len(),
        });
        fs::write(&eval_path, serde_json::to_string_pretty(&payload).unwrap())?;

        let mut row = LedgerRow::new("eval", &self.config.run.name, arm.id(), seed, &checkpoint_id);
        row.preset = Some(preset.id().to_string());
        row.weights = Some(weights.to_string());
        row.clean = Some(report.clean_accuracy);
        row.robust = Some(report.robust_accuracy);
        self.ledger.append(&row)?;
        self.mark_stage(&stage, &key)?;
        outcome.ran(&stage);
        Ok(())
    }

    pub fn ensure_analysis(&self, outcome: &mut StageOutcome, arm: Arm, seed: u64) -> Result<()> {
        let ckpt_path = self.ensure_train(outcome, arm, seed)?;
        let stage = format!("analysis/{}/{seed}", arm.slug());
        let cell = self.cell_dir(arm, seed);
        let analysis_path = cell.join("analysis.json");
        let key = Self::key_of(&serde_json::json!({
            "stage": "analysis",
            "analysis": self.config.analysis,
            "eval": self.config.eval,
            "checkpoint_artifact": sha256_file(&ckpt_path)?,
        }));
        if self.stage_is_current(&stage, &key, &[&analysis_path]) {
            outcome.skip(&stage);
            return Ok(());
        }

        let a = &self.config.analysis;
        let ckpt = RobustCheckpoint::load(&ckpt_path)?;
        let model = ckpt.classifier(ckpt.recipe.eval_on_ema);
        let batch = self.test_subset(a.examples)?;
        let checkpoint_id = sha256_file(&ckpt_path)?[..12].to_string();
        let preset = self.config.eval.preset()?;
        let configs = preset.configs(
            ckpt.recipe.epsilon,
            ckpt.recipe.alpha,
            derive_seed(self.config.eval.seed, "analysis", derive_seed(seed, arm.id(), 0)),
        );

        let mut report = AnalysisReport::new(format!(
            "{}/{}/seed{seed}",
            self.config.run.name,
            arm.id()
        ));
        let mut row = LedgerRow::new(
            "analysis",
            &self.config.run.name,
            arm.id(),
            seed,
            &checkpoint_id,
        );

        let target = ClassifierTarget { model: &model };
        let adv_needed = a.uniformity_alignment || a.cls_dim;
        let adv = if adv_needed {
            Some(worst_case_adversarial(
                &target,
                &batch.images,
                &batch.labels,
                &configs,
                EvalMode::Plain,
            )?)
        } else {
            None
        };

        if a.uniformity_alignment {
            let feats_clean = model.features(&batch.images);
            let feats_adv = model.features(adv.as_ref().expect("adv computed"));
            let alignment = alignment_metric(&feats_clean, &feats_adv)?;
            let uniformity = uniformity_metric(&feats_clean, 2.0)?;
            report.push(
                "alignment",
                serde_json::json!({"pairs": "clean-vs-strong-pgd", "preset": preset.id()}),
                serde_json::json!(alignment),
            );
            report.push(
                "uniformity",
                serde_json::json!({"t": 2.0}),
                serde_json::json!(uniformity),
            );
            row.alignment = Some(alignment);
            row.uniformity = Some(uniformity);
        }

        if a.cknna {
            if self.diffusion_path().exists() {
                let diffusion = DiffusionModel::load(&self.diffusion_path())?;
                let feats_clean = model.features(&batch.images);
                let dr = diffusion.extract(
                    &batch.images,
                    Condition::Unconditional,
                    diffusion.schedule.eval_sigma,
                    NoiseMode::Seeded(derive_seed(self.config.eval.seed, "cknna-noise", 0)),
                )?;
                let score = cknna(&feats_clean, &dr, a.cknna_k.min(batch.len() - 1))?;
                report.push(
                    "cknna",
                    serde_json::json!({
                        "k": a.cknna_k,
                        "versus": "diffusion-bottleneck",
                        "formula": "sym-HSIC(mask.*Ga, mask.*Gb)/sqrt(HSIC(maskA.*Ga,..)*HSIC(maskB.*Gb,..)), unbiased HSIC, mask = intersection of per-space top-k",
                    }),
                    serde_json::json!(score),
                );
                row.cknna = Some(score);
            } else {
                report.push(
                    "cknna",
                    serde_json::Value::Null,
                    serde_json::json!("skipped: no diffusion model in this run"),
                );
            }
        }

        if a.frequency {
            let map = frequency_saliency(
                &target,
                &batch.images,
                &batch.labels,
                SaliencyMode::Single,
            )?;
            let freq_path = cell.join("freq_map.dra");
            let mut w = ArchiveWriter::new(serde_json::json!({
                "kind": "frequency-map",
                "arm": arm.id(),
                "seed": seed,
                "checkpoint_id": checkpoint_id,
            }));
            w.put_f64("map", &map.clone().into_dyn());
            w.write_to(&freq_path)?;
            report.push(
                "frequency-map",
                serde_json::json!({"file": "freq_map.dra"}),
                serde_json::json!({"height": map.nrows(), "width": map.ncols()}),
            );
        }

        if a.cls_dim {
            let cls = classification_dimension(&model, &batch, &configs[0], (0.95, 0.99))?;
            report.push(
                "classification-dimension",
                serde_json::json!({"attack": preset.id(), "thresholds": [0.95, 0.99]}),
                serde_json::to_value(&cls).unwrap(),
            );
            row.cls95 = Some(cls.cls95);
            row.cls99 = Some(cls.cls99);
            row.robust_dim = Some(cls.robust_dim);
        }

        if a.sae {
            let train = self.train_dataset()?;
            let n = train.len().min(512);
            let feats = model.features(&train.data.select(&(0..n).collect::<Vec<_>>()).images);
            let m = a.sae_latent_factor * feats.ncols();
            let mut losses = Vec::new();
            for &k in &a.sae_ks {
                let sae = train_topk_sae(
                    &feats,
                    m,
                    k,
                    &SaeTrainConfig {
                        seed: derive_seed(seed, "sae", k as u64),
                        ..SaeTrainConfig::default()
                    },
                )?;
                losses.push((k, normalized_sae_loss(&sae, &feats)?));
            }
            report.push(
                "topk-sae",
                serde_json::json!({"latents": m, "ks": a.sae_ks}),
                serde_json::to_value(&losses).unwrap(),
            );
            row.sae_losses = Some(losses);
        }

        fs::write(
            &analysis_path,
            serde_json::to_string_pretty(&report).unwrap(),
        )?;
        self.ledger.append(&row)?;
        self.mark_stage(&stage, &key)?;
        outcome.ran(&stage);
        Ok(())
    }

    /// The full grid: every (arm, seed) trained, evaluated and analyzed.
    pub fn run_all(&self) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        if self.config.needs_diffusion() {
            self.ensure_diffusion(&mut outcome)?;
        }
        if self.config.needs_pool() {
            self.ensure_pool(&mut outcome)?;
        }
        for &arm in &self.config.run.arms.clone() {
            for &seed in &self.config.run.seeds.clone() {
                self.ensure_train(&mut outcome, arm, seed)?;
                self.ensure_eval(&mut outcome, arm, seed)?;
                self.ensure_analysis(&mut outcome, arm, seed)?;
            }
        }
        Ok(outcome)
    }

    /// Lambda sweep: train and evaluate the sweep arm across the grid.
    pub fn sweep_lambda(&self) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let arm = self.config.lambda_sweep.arm;
        if !arm.uses_dra() {
            return Err(Error::config("lambda sweep arm must include DRA"));
        }
        for &lambda in &self.config.lambda_sweep.grid.clone() {
            for &seed in &self.config.run.seeds.clone() {
                self.lambda_cell(&mut outcome, arm, lambda, seed)?;
            }
        }
        Ok(outcome)
    }

    fn lambda_cell(
        &self,
        outcome: &mut StageOutcome,
        arm: Arm,
        lambda: f64,
        seed: u64,
    ) -> Result<()> {
        let slug = format!("lambda{lambda}");
        let cell = self.run_dir.join("lambda").join(&slug).join(format!("seed{seed}"));
        let ckpt_path = cell.join("checkpoint.dra");
        let eval_path = cell.join("eval.json");
        let stage = format!("lambda/{lambda}/{seed}");

        let diffusion_hash = {
            let p = self.ensure_diffusion(outcome)?;
            Some(sha256_file(&p)?)
        };
        let pool_hash = if arm.uses_synth() {
            let p = self.ensure_pool(outcome)?;
            Some(sha256_file(&p)?)
        } else {
            None
        };
        let key = Self::key_of(&serde_json::json!({
            "stage": "lambda",
            "arm": arm.id(),
            "lambda": lambda,
            "seed": seed,
            "dataset": self.config.dataset,
            "recipe": self.config.recipe,
            "eval": self.config.eval,
            "diffusion_artifact": diffusion_hash,
            "pool_artifact": pool_hash,
        }));
        if self.stage_is_current(&stage, &key, &[&ckpt_path, &eval_path]) {
            outcome.skip(&stage);
            return Ok(());
        }

        let data = self.train_dataset()?;
        let mut recipe = self.config.recipe.recipe(seed);
        recipe.lambda = lambda;
        let diffusion = DiffusionModel::load(&self.diffusion_path())?;
        let pool = if arm.uses_synth() {
            Some(open_pool(&self.pool_path())?)
        } else {
            None
        };
        let ckpt = train_robust(
            &recipe,
            &data,
            pool.as_ref(),
            Some(&diffusion as &dyn RepresentationSource),
            true,
            arm.uses_synth(),
        )?;
        ckpt.save(&ckpt_path)?;

        let model = ckpt.classifier(recipe.eval_on_ema);
        let batch = self.test_subset(self.config.eval.examples)?;
        let preset = self.config.eval.preset()?;
        let configs = preset.configs(
            recipe.epsilon,
            recipe.alpha,
            derive_seed(self.config.eval.seed, "lambda", derive_seed(seed, &slug, 0)),
        );
        let target = ClassifierTarget { model: &model };
        let report =
            evaluate_robust_multi(&target, &batch.images, &batch.labels, &configs, EvalMode::Plain)?;
        let checkpoint_id = sha256_file(&ckpt_path)?[..12].to_string();
        fs::write(
            &eval_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "arm": arm.id(),
                "lambda": lambda,
                "seed": seed,
                "clean_accuracy": report.clean_accuracy,
                "robust_accuracy": report.robust_accuracy,
                "preset": preset.id(),
            }))
            .unwrap(),
        )?;
        let mut row = LedgerRow::new(
            "lambda-sweep",
            &self.config.run.name,
            arm.id(),
            seed,
            &checkpoint_id,
        );
        row.lambda = Some(lambda);
        row.preset = Some(preset.id().to_string());
        row.clean = Some(report.clean_accuracy);
        row.robust = Some(report.robust_accuracy);
        self.ledger.append(&row)?;
        self.mark_stage(&stage, &key)?;
        outcome.ran(&stage);
        Ok(())
    }
}

/// Median helper used by reports and tests.
pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Convenience wrapper: one eval's labels as an ndarray.
pub fn labels_of(batch: &dra_core::data::LabeledImageBatch) -> Array1<usize> {
    batch.labels.clone()
}
