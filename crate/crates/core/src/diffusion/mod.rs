//! Class-conditional denoising diffusion model.
//!
//! A small U-shaped epsilon-predictor: two conv stages down, a conditioned
//! bottleneck, one upsample stage with a skip connection. The model serves
//! three roles: synthetic-image generator (deterministic Euler sampler over
//! a geometric sigma grid), denoising trainee, and frozen feature extractor
//! (spatial-mean pooled activations at a named tap point).

pub mod probe;
mod unet;

pub use probe::{argmax_rows, train_linear_probe, LinearProbe};
pub use unet::{DenoiseCache, ReprCache, UNetConfig};

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng as _;
use serde::{Deserialize, Serialize};

use crate::archive::{sha256_hex, Archive, ArchiveWriter};
use crate::data::{Dataset, ImageGenerator, LabeledImageBatch};
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{Images, ParamSet};
use crate::repr::{Condition, NoiseMode, RepresentationSource};
use crate::rng::{self, normal_array, substream};

/// Tap point names exposed by the UNet.
pub const TAP_BOTTLENECK: &str = "bottleneck-pre-upsample";
pub const TAP_ENCODER: &str = "encoder-post-downsample";

pub fn tap_points() -> Vec<&'static str> {
    vec![TAP_BOTTLENECK, TAP_ENCODER]
}

/// Noise-scale schedule: training draws sigma log-uniformly from
/// [sigma_min, sigma_max]; extraction defaults to `eval_sigma`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub train_sampler: SigmaSampler,
    pub eval_sigma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSampler {
    LogUniform,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.02,
            sigma_max: 3.0,
            train_sampler: SigmaSampler::LogUniform,
            eval_sigma: 0.1,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0
            && self.sigma_min <= self.eval_sigma
            && self.eval_sigma <= self.sigma_max)
        {
            return Err(Error::config(
                "schedule must satisfy 0 < sigma_min <= eval_sigma <= sigma_max",
            ));
        }
        Ok(())
    }

    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.sigma_min && sigma <= self.sigma_max
    }

    pub fn sample_sigma(&self, rng: &mut rng::Stream) -> f64 {
        match self.train_sampler {
            SigmaSampler::LogUniform => {
                use rand::Rng;
                let lo = self.sigma_min.ln();
                let hi = self.sigma_max.ln();
                rng.random_range(lo..hi).exp()
            }
        }
    }
}

/// The trained denoiser plus everything needed to reuse it: schedule,
/// architecture, and the outlier channels to zero during extraction.
pub struct DiffusionModel {
    pub config: UNetConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamSet,
    /// Channels of the tap activation zeroed before pooling.
    pub outlier_channels: Vec<usize>,
    checkpoint_id: Option<String>,
}

impl DiffusionModel {
    pub fn init(config: UNetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let params = unet::init_params(&config, &mut substream(seed, "diffusion-init", 0));
        Ok(DiffusionModel {
            config,
            schedule,
            params,
            outlier_channels: Vec::new(),
            checkpoint_id: None,
        })
    }

    /// Channel width of a tap point's activation.
    pub fn tap_dim(&self, tap_point: &str) -> Result<usize> {
        match tap_point {
            TAP_BOTTLENECK | TAP_ENCODER => Ok(2 * self.config.width),
            other => Err(Error::config(format!("unknown tap point {other}"))),
        }
    }

    // -- persistence --------------------------------------------------------

    pub fn save(&mut self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "kind": "diffusion-model",
            "config": serde_json::to_value(&self.config).unwrap(),
            "schedule": serde_json::to_value(&self.schedule).unwrap(),
            "tap_points": tap_points(),
            "outlier_channels": self.outlier_channels,
        });
        let mut w = ArchiveWriter::new(meta);
        self.params.save_into(&mut w, "params");
        let bytes = w.to_bytes()?;
        std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, &bytes)?;
        let id = sha256_hex(&bytes)[..12].to_string();
        self.checkpoint_id = Some(id.clone());
        Ok(id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::open(path)?;
        let meta = archive.metadata();
        if meta["kind"] != "diffusion-model" {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                msg: format!("expected diffusion-model checkpoint, got {}", meta["kind"]),
            });
        }
        let config: UNetConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::config(format!("bad checkpoint config: {e}")))?;
        let schedule: NoiseSchedule = serde_json::from_value(meta["schedule"].clone())
            .map_err(|e| Error::config(format!("bad checkpoint schedule: {e}")))?;
        let outlier_channels: Vec<usize> =
            serde_json::from_value(meta["outlier_channels"].clone()).unwrap_or_default();
        let mut params = unet::init_params(&config, &mut substream(0, "diffusion-load", 0));
        params.load_from(&archive, "params")?;
        let id = crate::archive::sha256_file(path)?[..12].to_string();
        Ok(DiffusionModel {
            config,
            schedule,
            params,
            outlier_channels,
            checkpoint_id: Some(id),
        })
    }

    /// Stable identifier: recorded id if the model round-tripped through
    /// disk, otherwise a hash of the serialized parameters.
    pub fn id(&self) -> String {
        if let Some(id) = &self.checkpoint_id {
            return id.clone();
        }
        let mut w = ArchiveWriter::new(serde_json::Value::Null);
        self.params.save_into(&mut w, "params");
        sha256_hex(&w.to_bytes().expect("in-memory archive"))[..12].to_string()
    }
}

/// Pooled diffusion representation with its provenance.
#[derive(Debug, Clone)]
pub struct DiffusionRepresentation {
    pub features: Array2<f64>,
    pub sigma: f64,
    pub condition: String,
    pub tap_point: String,
    pub pooling: &'static str,
    pub noise_mode: String,
}

/// Options for [`extract_representation`].
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub tap_point: String,
    /// Concatenate a second pooled feature at an extra per-image sigma drawn
    /// from the training sampler. Off by default.
    pub extra_timestep: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            tap_point: TAP_BOTTLENECK.to_string(),
            extra_timestep: false,
        }
    }
}

/// Mean squared error between the model's noise prediction on x + sigma*noise
/// and the injected noise.
pub fn denoise_loss(
    model: &DiffusionModel,
    x: &Images,
    sigma: f64,
    noise: &Images,
    condition: Condition<'_>,
) -> Result<f64> {
    if noise.dim() != x.dim() {
        return Err(Error::argument("noise must be shaped like the images"));
    }
    if !model.schedule.contains(sigma) {
        return Err(Error::argument(format!(
            "sigma {sigma} outside schedule range"
        )));
    }
    let sigmas = Array1::from_elem(x.dim().0, sigma);
    let x_t = x + &(noise * sigma);
    let (eps_hat, _cache) = unet::forward_denoise(model, &x_t, &sigmas, condition)?;
    Ok(mse(&eps_hat, noise))
}

/// As [`denoise_loss`] but also returns the gradient wrt model parameters.
pub fn denoise_loss_grad(
    model: &DiffusionModel,
    x: &Images,
    sigma: f64,
    noise: &Images,
    condition: Condition<'_>,
) -> Result<(f64, ParamSet)> {
    let sigmas = Array1::from_elem(x.dim().0, sigma);
    let x_t = x + &(noise * sigma);
    denoise_loss_grad_per_example(model, &x_t, &sigmas, noise, condition)
}

/// Training-path variant with per-example sigmas; `x_t` is already noised.
fn denoise_loss_grad_per_example(
    model: &DiffusionModel,
    x_t: &Images,
    sigmas: &Array1<f64>,
    noise: &Images,
    condition: Condition<'_>,
) -> Result<(f64, ParamSet)> {
    let (eps_hat, cache) = unet::forward_denoise(model, x_t, sigmas, condition)?;
    let loss = mse(&eps_hat, noise);
    let scale = 2.0 / eps_hat.len() as f64;
    let g_eps = (&eps_hat - noise) * scale;
    let (_gx, grads) = unet::backward_denoise(model, &cache, &g_eps);
    Ok((loss, grads))
}

fn mse(a: &Images, b: &Images) -> f64 {
    let diff = a - b;
    diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
}

/// Diffusion training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub width: usize,
    pub schedule: NoiseSchedule,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            width: 16,
            schedule: NoiseSchedule::default(),
        }
    }
}

/// Train an epsilon-predictor on the dataset. Seed-deterministic; 0 steps
/// returns the initialization unchanged.
pub fn train_diffusion(data: &Dataset, cfg: &DiffusionTrainConfig) -> Result<DiffusionModel> {
    let (c, h, w) = data.image_shape;
    let config = UNetConfig {
        in_channels: c,
        width: cfg.width,
        num_classes: data.num_classes,
        image_size: h.max(w),
    };
    let mut model = DiffusionModel::init(config, cfg.schedule.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.params);
    let mut batch_rng = substream(cfg.seed, "diffusion-batch", 0);
    let mut sigma_rng = substream(cfg.seed, "diffusion-sigma", 0);
    let mut noise_rng = substream(cfg.seed, "diffusion-noise", 0);

    for step in 0..cfg.steps {
        use rand::Rng;
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..data.len()))
            .collect();
        let batch = data.data.select(&idx);
        let sigmas =
            Array1::from_shape_fn(cfg.batch_size, |_| model.schedule.sample_sigma(&mut sigma_rng));
        let noise: Images = normal_array(&mut noise_rng, batch.images.dim());
        let mut x_t = batch.images.clone();
        for i in 0..cfg.batch_size {
            let mut row = x_t.slice_mut(s![i, .., .., ..]);
            row.zip_mut_with(&noise.slice(s![i, .., .., ..]), |v, &e| {
                *v += sigmas[i] * e
            });
        }
        let (loss, grads) = denoise_loss_grad_per_example(
            &model,
            &x_t,
            &sigmas,
            &noise,
            Condition::Labels(&batch.labels),
        )
        .map_err(|e| Error::Training {
            step,
            msg: e.to_string(),
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("denoise loss diverged to {loss}"),
            });
        }
        opt.step(&mut model.params, &grads, cfg.lr)?;
    }
    Ok(model)
}

const SAMPLER_STEPS: usize = 20;

/// Deterministic Euler sampler over a geometric sigma grid, class-conditional.
pub fn sample_images(
    model: &DiffusionModel,
    n: usize,
    class: usize,
    seed: u64,
) -> Result<Images> {
    if n == 0 {
        return Err(Error::argument("sample count must be positive"));
    }
    if class >= model.config.num_classes {
        return Err(Error::argument(format!(
            "class {class} out of range ({} classes)",
            model.config.num_classes
        )));
    }
    let (c, s_img) = (model.config.in_channels, model.config.image_size);
    let mut rng = substream(seed, "sample-init", class as u64);
    let sched = &model.schedule;
    let mut x: Images = normal_array(&mut rng, (n, c, s_img, s_img));
    x.mapv_inplace(|v| v * sched.sigma_max);

    let labels = Array1::from_elem(n, class);
    // Geometric grid from sigma_max to sigma_min, then a final step to 0.
    let mut grid: Vec<f64> = (0..SAMPLER_STEPS)
        .map(|i| {
            let t = i as f64 / (SAMPLER_STEPS - 1) as f64;
            sched.sigma_max * (sched.sigma_min / sched.sigma_max).powf(t)
        })
        .collect();
    grid.push(0.0);

    for i in 0..SAMPLER_STEPS {
        let sigma = grid[i];
        let sigmas = Array1::from_elem(n, sigma);
        let (eps_hat, _) = unet::forward_denoise(model, &x, &sigmas, Condition::Labels(&labels))
            .map_err(|e| Error::Generation(format!("sampling step {i}: {e}")))?;
        let dsigma = grid[i + 1] - sigma;
        x.zip_mut_with(&eps_hat, |v, &e| *v += dsigma * e);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation(format!(
                "non-finite state at sampling step {i}"
            )));
        }
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(x)
}

/// Extract pooled representations at a tap point on x + sigma*eps.
pub fn extract_representation(
    model: &DiffusionModel,
    x: &Images,
    sigma: f64,
    condition: Condition<'_>,
    noise_mode: NoiseMode,
    options: &ExtractOptions,
) -> Result<DiffusionRepresentation> {
    model.tap_dim(&options.tap_point)?;
    if !model.schedule.contains(sigma) {
        return Err(Error::argument(format!(
            "sigma {sigma} outside schedule range"
        )));
    }
    let features = pooled_features(model, x, sigma, condition, noise_mode, &options.tap_point)?;
    let features = if options.extra_timestep {
        // One extra sigma per image from the training sampler, derived from
        // the same noise mode so replays stay exact.
        let n = x.dim().0;
        let mut extra = Array2::<f64>::zeros((n, features.ncols()));
        for i in 0..n {
            let mut srng = substream(noise_mode.per_image_seed(i), "extra-sigma", 0);
            let sigma_i = model.schedule.sample_sigma(&mut srng);
            let one = x.slice(s![i..i + 1, .., .., ..]).to_owned();
            let labels_one;
            let cond_one = match condition {
                Condition::Labels(l) => {
                    labels_one = Array1::from_elem(1, l[i]);
                    Condition::Labels(&labels_one)
                }
                Condition::Unconditional => Condition::Unconditional,
            };
            let f = pooled_features(
                model,
                &one,
                sigma_i,
                cond_one,
                NoiseMode::Seeded(noise_mode.per_image_seed(i) ^ 0x9e37),
                &options.tap_point,
            )?;
            extra.slice_mut(s![i, ..]).assign(&f.slice(s![0, ..]));
        }
        ndarray::concatenate(ndarray::Axis(1), &[features.view(), extra.view()])
            .expect("feature concat")
    } else {
        features
    };
    Ok(DiffusionRepresentation {
        features,
        sigma,
        condition: condition.describe(),
        tap_point: options.tap_point.clone(),
        pooling: "spatial-mean",
        noise_mode: noise_mode.describe(),
    })
}

fn noised(x: &Images, sigma: f64, noise_mode: NoiseMode) -> Images {
    let mut x_t = x.clone();
    let n = x.dim().0;
    for i in 0..n {
        let mut ex_rng = rng::Stream::seed_from_u64(noise_mode.per_image_seed(i));
        let eps: ndarray::Array3<f64> =
            normal_array(&mut ex_rng, (x.dim().1, x.dim().2, x.dim().3));
        let mut row = x_t.slice_mut(s![i, .., .., ..]);
        row.zip_mut_with(&eps, |v, &e| *v += sigma * e);
    }
    x_t
}

fn pooled_features(
    model: &DiffusionModel,
    x: &Images,
    sigma: f64,
    condition: Condition<'_>,
    noise_mode: NoiseMode,
    tap_point: &str,
) -> Result<Array2<f64>> {
    let x_t = noised(x, sigma, noise_mode);
    let sigmas = Array1::from_elem(x.dim().0, sigma);
    let (pooled, _cache) = unet::forward_repr(model, &x_t, &sigmas, condition, tap_point)?;
    Ok(pooled)
}

/// Pooled features plus the gradient hook used by pipeline attacks and the
/// noisy-discriminative trainer: returns d(loss)/dx and parameter grads given
/// d(loss)/d(pooled).
pub fn features_with_grad(
    model: &DiffusionModel,
    x: &Images,
    sigma: f64,
    condition: Condition<'_>,
    noise_mode: NoiseMode,
    tap_point: &str,
    g_pooled: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Option<(Images, ParamSet)>)> {
    let x_t = noised(x, sigma, noise_mode);
    let sigmas = Array1::from_elem(x.dim().0, sigma);
    let (pooled, cache) = unet::forward_repr(model, &x_t, &sigmas, condition, tap_point)?;
    match g_pooled {
        None => Ok((pooled, None)),
        Some(g) => {
            let (gx, grads) = unet::backward_repr(model, &cache, g);
            Ok((pooled, Some((gx, grads))))
        }
    }
}

impl RepresentationSource for DiffusionModel {
    fn feature_dim(&self) -> usize {
        2 * self.config.width
    }

    fn extract(
        &self,
        images: &Images,
        condition: Condition<'_>,
        sigma: f64,
        noise: NoiseMode,
    ) -> Result<Array2<f64>> {
        Ok(
            extract_representation(self, images, sigma, condition, noise, &ExtractOptions::default())?
                .features,
        )
    }

    fn source_id(&self) -> String {
        self.id()
    }
}

impl ImageGenerator for DiffusionModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.config.in_channels,
            self.config.image_size,
            self.config.image_size,
        )
    }

    fn generate(&self, n: usize, class: usize, seed: u64) -> Result<Images> {
        sample_images(self, n, class, seed)
    }

    fn checkpoint_id(&self) -> String {
        self.id()
    }
}

/// One probe-accuracy sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub sigma: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub points: Vec<ProbePoint>,
    /// Sigma attaining the maximum accuracy (smallest sigma on ties).
    pub best_sigma: f64,
    pub best_index: usize,
}

/// Train one linear probe per sigma on frozen features and report test
/// accuracy across the sweep.
pub fn sweep_probe_timesteps(
    model: &DiffusionModel,
    train: &LabeledImageBatch,
    test: &LabeledImageBatch,
    num_classes: usize,
    sigma_list: &[f64],
    seed: u64,
) -> Result<ProbeSweep> {
    if sigma_list.is_empty() {
        return Err(Error::argument("sigma list must be nonempty"));
    }
    if sigma_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::argument("sigma list must be sorted ascending"));
    }
    let mut points = Vec::with_capacity(sigma_list.len());
    for (si, &sigma) in sigma_list.iter().enumerate() {
        let tr = extract_representation(
            model,
            &train.images,
            sigma,
            Condition::Unconditional,
            NoiseMode::Seeded(rng::derive_seed(seed, "sweep-train", si as u64)),
            &ExtractOptions::default(),
        )?;
        let te = extract_representation(
            model,
            &test.images,
            sigma,
            Condition::Unconditional,
            NoiseMode::Seeded(rng::derive_seed(seed, "sweep-test", si as u64)),
            &ExtractOptions::default(),
        )?;
        let probe = train_linear_probe(&tr.features, &train.labels, num_classes)?;
        let accuracy = probe.accuracy(&te.features, &test.labels);
        points.push(ProbePoint { sigma, accuracy });
    }
    let mut best_index = 0;
    for (i, p) in points.iter().enumerate() {
        if p.accuracy > points[best_index].accuracy {
            best_index = i;
        }
    }
    Ok(ProbeSweep {
        best_sigma: points[best_index].sigma,
        best_index,
        points,
    })
}

/// Channels whose mean absolute tap activation exceeds
/// `threshold_multiplier` times the median channel level.
pub fn identify_outlier_channels(
    model: &DiffusionModel,
    data: &Images,
    threshold_multiplier: f64,
) -> Result<Vec<usize>> {
    if data.dim().0 == 0 {
        return Err(Error::argument("outlier scan needs at least one example"));
    }
    if threshold_multiplier <= 1.0 {
        return Err(Error::argument("threshold multiplier must exceed 1"));
    }
    let sigma = model.schedule.eval_sigma;
    let x_t = noised(data, sigma, NoiseMode::Seeded(0));
    let sigmas = Array1::from_elem(data.dim().0, sigma);
    let (_pooled, cache) =
        unet::forward_repr(model, &x_t, &sigmas, Condition::Unconditional, TAP_BOTTLENECK)?;
    let acts = cache.tap_activation();
    let (n, c, h, w) = acts.dim();
    let mut norms = vec![0.0_f64; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..n {
            for i in 0..h {
                for j in 0..w {
                    acc += acts[[bi, ch, i, j]].abs();
                }
            }
        }
        norms[ch] = acc / (n * h * w) as f64;
    }
    Ok(outliers_from_channel_levels(&norms, threshold_multiplier))
}

/// Pure detection rule, exposed for direct testing: indices whose level
/// exceeds `multiplier` times the median level.
pub fn outliers_from_channel_levels(levels: &[f64], multiplier: f64) -> Vec<usize> {
    if levels.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = levels.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    levels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > multiplier * median)
        .map(|(i, _)| i)
        .collect()
}
