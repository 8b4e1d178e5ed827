//! Run configuration: one structured-text (TOML) file drives every verb.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dra_core::attacks::AttackPreset;
use dra_core::data::{DatasetSpec, ToyConfig};
use dra_core::diffusion::{DiffusionTrainConfig, NoiseSchedule};
use dra_core::error::{Error, Result};
use dra_core::nn::EncoderArch;
use dra_core::robust::TrainRecipe;

/// Experiment arms of the 2x2 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Arm {
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "AT+DRA")]
    AtDra,
    #[serde(rename = "DM-AT")]
    DmAt,
    #[serde(rename = "DM-AT+DRA")]
    DmAtDra,
}

impl Arm {
    pub fn id(&self) -> &'static str {
        match self {
            Arm::At => "AT",
            Arm::AtDra => "AT+DRA",
            Arm::DmAt => "DM-AT",
            Arm::DmAtDra => "DM-AT+DRA",
        }
    }

    pub fn from_id(id: &str) -> Result<Arm> {
        match id {
            "AT" => Ok(Arm::At),
            "AT+DRA" => Ok(Arm::AtDra),
            "DM-AT" => Ok(Arm::DmAt),
            "DM-AT+DRA" => Ok(Arm::DmAtDra),
            other => Err(Error::config(format!("unknown arm {other}"))),
        }
    }

    pub fn uses_dra(&self) -> bool {
        matches!(self, Arm::AtDra | Arm::DmAtDra)
    }

    pub fn uses_synth(&self) -> bool {
        matches!(self, Arm::DmAt | Arm::DmAtDra)
    }

    /// The no-DRA baseline this arm is compared against.
    pub fn baseline(&self) -> Arm {
        match self {
            Arm::AtDra => Arm::At,
            Arm::DmAtDra => Arm::DmAt,
            other => *other,
        }
    }

    pub fn all() -> [Arm; 4] {
        [Arm::At, Arm::AtDra, Arm::DmAt, Arm::DmAtDra]
    }

    /// Directory-safe name.
    pub fn slug(&self) -> String {
        self.id().to_lowercase().replace('+', "-")
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.id())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            arms: vec![Arm::At],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    pub id: String,
    pub root: Option<PathBuf>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pixel_noise: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub distractor_min: f64,
    pub distractor_max: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let toy = ToyConfig::default();
        DatasetSection {
            id: "toy-2class".into(),
            root: None,
            train_per_class: toy.train_per_class,
            test_per_class: toy.test_per_class,
            pixel_noise: toy.pixel_noise,
            amplitude_min: toy.amplitude_min,
            amplitude_max: toy.amplitude_max,
            distractor_min: toy.distractor_min,
            distractor_max: toy.distractor_max,
            seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> Result<DatasetSpec> {
        match self.id.as_str() {
            "toy-2class" => Ok(DatasetSpec::Toy2Class(ToyConfig {
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                pixel_noise: self.pixel_noise,
                amplitude_min: self.amplitude_min,
                amplitude_max: self.amplitude_max,
                distractor_min: self.distractor_min,
                distractor_max: self.distractor_max,
            })),
            "cifar10" => {
                let root = self.root.clone().ok_or_else(|| {
                    Error::config("dataset cifar10 requires [dataset].root")
                })?;
                Ok(DatasetSpec::Cifar10 { root })
            }
            other => Err(Error::config(format!("unknown dataset id {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub seed: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub eval_sigma: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        DiffusionSection {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            width: d.width,
            seed: 0,
            sigma_min: d.schedule.sigma_min,
            sigma_max: d.schedule.sigma_max,
            eval_sigma: d.schedule.eval_sigma,
        }
    }
}

impl DiffusionSection {
    pub fn train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            width: self.width,
            seed: self.seed,
            schedule: NoiseSchedule {
                sigma_min: self.sigma_min,
                sigma_max: self.sigma_max,
                eval_sigma: self.eval_sigma,
                ..NoiseSchedule::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PoolSection {
    pub count: usize,
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            count: 512,
            class_balanced: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RecipeSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub pgd_steps: usize,
    pub trades_beta: f64,
    pub lambda: f64,
    pub ema_tau: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub real_fraction: f64,
    pub sigma_align: f64,
    pub conditional_align: bool,
    pub encoder: EncoderArch,
    pub eval_on_ema: bool,
}

impl Default for RecipeSection {
    fn default() -> Self {
        let r = TrainRecipe::default();
        RecipeSection {
            epsilon: r.epsilon,
            alpha: r.alpha,
            pgd_steps: r.pgd_steps,
            trades_beta: r.trades_beta,
            lambda: r.lambda,
            ema_tau: r.ema_tau,
            momentum: r.momentum,
            weight_decay: r.weight_decay,
            peak_lr: 0.05,
            epochs: 10,
            batch_size: 16,
            real_fraction: r.real_fraction,
            sigma_align: r.sigma_align,
            conditional_align: r.conditional_align,
            encoder: r.encoder,
            eval_on_ema: r.eval_on_ema,
        }
    }
}

impl RecipeSection {
    pub fn recipe(&self, seed: u64) -> TrainRecipe {
        TrainRecipe {
            epsilon: self.epsilon,
            alpha: self.alpha,
            pgd_steps: self.pgd_steps,
            trades_beta: self.trades_beta,
            lambda: self.lambda,
            ema_tau: self.ema_tau,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            peak_lr: self.peak_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            real_fraction: self.real_fraction,
            sigma_align: self.sigma_align,
            conditional_align: self.conditional_align,
            encoder: self.encoder,
            eval_on_ema: self.eval_on_ema,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub preset: String,
    /// Number of held-out examples evaluated (prefix of the shuffled split).
    pub examples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            preset: "strong-pgd".into(),
            examples: 96,
            seed: 0,
        }
    }
}

impl EvalSection {
    pub fn preset(&self) -> Result<AttackPreset> {
        AttackPreset::from_id(&self.preset)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AnalysisSection {
    pub uniformity_alignment: bool,
    pub cknna: bool,
    pub frequency: bool,
    pub cls_dim: bool,
    pub sae: bool,
    pub examples: usize,
    pub cknna_k: usize,
    pub sae_latent_factor: usize,
    pub sae_ks: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            uniformity_alignment: true,
            cknna: true,
            frequency: true,
            cls_dim: true,
            sae: false,
            examples: 64,
            cknna_k: 10,
            sae_latent_factor: 8,
            sae_ks: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LambdaSweepSection {
    pub grid: Vec<f64>,
    pub arm: Arm,
}

impl Default for LambdaSweepSection {
    fn default() -> Self {
        LambdaSweepSection {
            grid: vec![0.0, 0.3, 0.6, 1.2, 2.4, 4.8],
            arm: Arm::AtDra,
        }
    }
}

/// The whole run configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub diffusion: DiffusionSection,
    pub pool: PoolSection,
    pub recipe: RecipeSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
    pub lambda_sweep: LambdaSweepSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.run.arms.is_empty() {
            return Err(Error::config("at least one arm is required"));
        }
        self.dataset.spec()?;
        self.eval.preset()?;
        // A DM arm needs a pool; a DRA arm needs the diffusion model. Both
        // are buildable from this config, so only sanity-check sizes.
        if self.run.arms.iter().any(Arm::uses_synth) && self.pool.count == 0 {
            return Err(Error::config("DM arms require a nonzero pool count"));
        }
        Ok(())
    }

    /// Run directory for this config under `root`.
    pub fn run_dir(&self, root_override: Option<&Path>) -> PathBuf {
        let root = root_override
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("DRA_RUN_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| self.run.output_dir.clone());
        root.join(&self.run.name)
    }

    pub fn needs_diffusion(&self) -> bool {
        self.run
            .arms
            .iter()
            .any(|a| a.uses_dra() || a.uses_synth())
    }

    pub fn needs_pool(&self) -> bool {
        self.run.arms.iter().any(Arm::uses_synth)
    }

    pub fn to_canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Flatten a JSON tree into dotted paths for field-level diffs.
fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&p, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Dotted-path fields that differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    flatten("", &a.to_canonical_json(), &mut fa);
    flatten("", &b.to_canonical_json(), &mut fb);
    let ma: std::collections::BTreeMap<_, _> = fa.into_iter().collect();
    let mb: std::collections::BTreeMap<_, _> = fb.into_iter().collect();
    let keys: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
    let mut out = Vec::new();
    for k in keys {
        let va = ma.get(k);
        let vb = mb.get(k);
        if va != vb {
            out.push(format!(
                "{k}: {} -> {}",
                va.map(String::as_str).unwrap_or("<absent>"),
                vb.map(String::as_str).unwrap_or("<absent>")
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.arms, vec![Arm::At]);
        assert_eq!(cfg.eval.preset, "strong-pgd");
    }

    #[test]
    fn arm_roundtrip_and_relations() {
        for arm in Arm::all() {
            assert_eq!(Arm::from_id(arm.id()).unwrap(), arm);
        }
        assert!(Arm::AtDra.uses_dra() && !Arm::AtDra.uses_synth());
        assert!(Arm::DmAt.uses_synth() && !Arm::DmAt.uses_dra());
        assert_eq!(Arm::DmAtDra.baseline(), Arm::DmAt);
        assert!(Arm::from_id("FGSM").is_err());
    }

    #[test]
    fn toml_sections_override_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [run]
            name = "grid"
            arms = ["AT", "DM-AT+DRA"]
            seeds = [0, 1, 2]
            [recipe]
            lambda = 0.6
            encoder = { kind = "patch-transformer", embed = 24 }
            [dataset]
            train_per_class = 64
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.arms, vec![Arm::At, Arm::DmAtDra]);
        assert_eq!(cfg.recipe.lambda, 0.6);
        assert_eq!(cfg.dataset.train_per_class, 64);
        assert!(matches!(
            cfg.recipe.encoder,
            EncoderArch::PatchTransformer { embed: 24 }
        ));
        assert!(cfg.needs_diffusion() && cfg.needs_pool());
    }

    #[test]
    fn diff_reports_changed_fields() {
        let a: RunConfig = toml::from_str("").unwrap();
        let mut b = a.clone();
        b.recipe.lambda = 2.4;
        b.run.name = "other".into();
        let diff = config_diff(&a, &b);
        assert_eq!(diff.len(), 2);
        assert!(diff.iter().any(|d| d.starts_with("recipe.lambda")));
        assert!(diff.iter().any(|d| d.starts_with("run.name")));
    }
}
