//! Scratch harness for sizing the acceptance experiments. Not part of the
//! test suite; run with `cargo run -p dra-bench --example explore -- <phase>`.

use std::time::Instant;

use dra_core::attacks::{
    evaluate_robust, evaluate_robust_multi, AttackConfig, AttackPreset, DiffusionProbeTarget,
    EvalMode,
};
use dra_core::data::{build_synthetic_pool, load_dataset, DatasetSpec, Split, ToyConfig};
use dra_core::diffusion::{
    denoise_loss, sample_images, sweep_probe_timesteps, train_diffusion, train_linear_probe,
    DiffusionTrainConfig,
};
use dra_core::nn::EncoderArch;
use dra_core::repr::{Condition, NoiseMode, RepresentationSource};
use dra_core::robust::{
    noisy_discriminative_pretrain, train_robust, ClassifierTarget, NoisyDiscConfig, TrainRecipe,
};
use dra_core::rng::{normal_array, substream};

fn toy(train_pc: usize, test_pc: usize) -> (dra_core::data::Dataset, dra_core::data::Dataset) {
    let spec = DatasetSpec::Toy2Class(ToyConfig {
        train_per_class: train_pc,
        test_per_class: test_pc,
        ..ToyConfig::default()
    });
    (
        load_dataset(&spec, Split::Train, 0).unwrap(),
        load_dataset(&spec, Split::Test, 0).unwrap(),
    )
}

fn flatten_images(x: &dra_core::Images) -> ndarray::Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = ndarray::Array2::zeros((n, c * h * w));
    for i in 0..n {
        for (j, v) in x
            .slice(ndarray::s![i, .., .., ..])
            .iter()
            .enumerate()
        {
            out[[i, j]] = *v;
        }
    }
    out
}

fn phase_diffusion() {
    let (train, test) = toy(256, 64);
    for (width, steps, lr, batch) in [(12usize, 2500usize, 2e-3, 24usize)] {
        let t0 = Instant::now();
        let cfg = DiffusionTrainConfig {
            steps,
            batch_size: batch,
            lr,
            width,
            seed: 0,
            ..Default::default()
        };
        let model = train_diffusion(&train, &cfg).unwrap();
        let train_time = t0.elapsed();

        // Held-out loss vs zero-model baseline at a few sigmas.
        let x = test.data.select(&(0..64).collect::<Vec<_>>());
        let mut rng = substream(1, "explore-noise", 0);
        let mut ratio_acc = 0.0;
        for &sigma in &[0.05, 0.1, 0.2, 0.5, 1.0] {
            let noise: dra_core::Images = normal_array(&mut rng, x.images.dim());
            let loss = denoise_loss(&model, &x.images, sigma, &noise, Condition::Labels(&x.labels))
                .unwrap();
            let zero = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
            println!("  sigma {sigma}: loss {loss:.4} zero {zero:.4} ratio {:.3}", loss / zero);
            ratio_acc += loss / zero;
        }
        println!(
            "width {width} steps {steps}: train {:.1?}s mean-ratio {:.3}",
            train_time,
            ratio_acc / 5.0
        );

        // Sample quality: pixel-probe on real data classifies class-0 samples.
        let t1 = Instant::now();
        let samples0 = sample_images(&model, 32, 0, 7).unwrap();
        let samples1 = sample_images(&model, 32, 1, 7).unwrap();
        let probe = train_linear_probe(
            &flatten_images(&train.data.images),
            &train.data.labels,
            2,
        )
        .unwrap();
        let acc0 = probe.accuracy(
            &flatten_images(&samples0),
            &ndarray::Array1::from_elem(32, 0),
        );
        let acc1 = probe.accuracy(
            &flatten_images(&samples1),
            &ndarray::Array1::from_elem(32, 1),
        );
        println!("  sample probe acc class0 {acc0:.3} class1 {acc1:.3} ({:?})", t1.elapsed());

        // Orientation-energy diagnostic: var(row means) - var(col means),
        // positive for horizontal gratings (class 0).
        let orient = |x: &dra_core::Images, i: usize| -> f64 {
            let img = x.slice(ndarray::s![i, 0, .., ..]);
            let rm: Vec<f64> = (0..16).map(|r| img.row(r).mean().unwrap()).collect();
            let cm: Vec<f64> = (0..16).map(|c| img.column(c).mean().unwrap()).collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
            };
            var(&rm) - var(&cm)
        };
        let stats = |x: &dra_core::Images| -> (f64, f64) {
            let n = x.dim().0;
            let vals: Vec<f64> = (0..n).map(|i| orient(x, i)).collect();
            let pos = vals.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
            (vals.iter().sum::<f64>() / n as f64, pos)
        };
        let real0: Vec<usize> = (0..train.len()).filter(|&i| train.data.labels[i] == 0).take(32).collect();
        let real1: Vec<usize> = (0..train.len()).filter(|&i| train.data.labels[i] == 1).take(32).collect();
        println!("  orient real0 {:?} real1 {:?}", stats(&train.data.select(&real0).images), stats(&train.data.select(&real1).images));
        println!("  orient gen0  {:?} gen1  {:?}", stats(&samples0), stats(&samples1));

        let dir = std::env::temp_dir().join("dra-explore");
        let mut m = model;
        m.save(&dir.join("diffusion.dra")).unwrap();
        println!("  saved to {:?}", dir.join("diffusion.dra"));
    }
}

fn load_explore_model() -> dra_core::diffusion::DiffusionModel {
    let path = std::env::temp_dir().join("dra-explore/diffusion.dra");
    dra_core::diffusion::DiffusionModel::load(&path).expect("run `explore diffusion` first")
}

fn phase_sweep() {
    let (train, test) = toy(256, 64);
    let model = load_explore_model();
    let grid = [0.02, 0.043, 0.093, 0.2, 0.43, 0.93, 2.0];
    for seed in 0..3 {
        let t0 = Instant::now();
        let sweep = sweep_probe_timesteps(&model, &train.data, &test.data, 2, &grid, seed).unwrap();
        let accs: Vec<String> = sweep
            .points
            .iter()
            .map(|p| format!("{:.3}", p.accuracy))
            .collect();
        println!(
            "seed {seed}: [{}] argmax idx {} sigma {} ({:.1?})",
            accs.join(", "),
            sweep.best_index,
            sweep.best_sigma,
            t0.elapsed()
        );
    }
}

fn recipe(seed: u64, epochs: usize) -> TrainRecipe {
    TrainRecipe {
        epochs,
        batch_size: 16,
        peak_lr: 0.05,
        seed,
        encoder: EncoderArch::SmallConv { width: 8 },
        ..Default::default()
    }
}

fn phase_arms() {
    let (train, test) = toy(256, 64);
    let model = load_explore_model();
    let dir = std::env::temp_dir().join("dra-explore");
    let pool = build_synthetic_pool(&model, 512, true, 0, &dir.join("pool.dra")).unwrap();
    let eval_n = 64;
    let eval = test.data.select(&(0..eval_n).collect::<Vec<_>>());
    let epochs = 8;

    for arm in ["AT", "AT+DRA", "DM-AT", "DM-AT+DRA"] {
        for seed in 0..3u64 {
            let t0 = Instant::now();
            let use_dra = arm.contains("DRA");
            let use_synth = arm.starts_with("DM");
            let ckpt = train_robust(
                &recipe(seed, epochs),
                &train,
                use_synth.then_some(&pool),
                if use_dra {
                    Some(&model as &dyn RepresentationSource)
                } else {
                    None
                },
                use_dra,
                use_synth,
            )
            .unwrap();
            let train_time = t0.elapsed();
            let t1 = Instant::now();
            let cls = ckpt.classifier(true);
            let target = ClassifierTarget { model: &cls };
            let configs = AttackPreset::StrongPgd.configs(8.0 / 255.0, 2.0 / 255.0, 1000 + seed);
            let report =
                evaluate_robust_multi(&target, &eval.images, &eval.labels, &configs, EvalMode::Plain)
                    .unwrap();
            println!(
                "{arm} seed {seed}: clean {:.3} robust {:.3} (train {:.1?}, eval {:.1?})",
                report.clean_accuracy,
                report.robust_accuracy,
                train_time,
                t1.elapsed()
            );
        }
    }
}

fn phase_eot() {
    let (train, test) = toy(256, 64);
    let model = load_explore_model();
    let eval = test.data.select(&(0..64).collect::<Vec<_>>());
    for seed in 0..3u64 {
        // Probe trained on fresh-noise features.
        let feats = model
            .extract(
                &train.data.images,
                Condition::Unconditional,
                0.1,
                NoiseMode::Fresh(seed),
            )
            .unwrap();
        let probe = train_linear_probe(&feats, &train.data.labels, 2).unwrap();
        let target = DiffusionProbeTarget::new(&model, &probe, 0.1);
        let config = AttackConfig {
            steps: 20,
            restarts: 1,
            seed: 500 + seed,
            ..Default::default()
        };
        let t0 = Instant::now();
        let plain = evaluate_robust(&target, &eval.images, &eval.labels, &config, EvalMode::Plain)
            .unwrap();
        let eot = evaluate_robust(&target, &eval.images, &eval.labels, &config, EvalMode::Eot(8))
            .unwrap();
        println!(
            "seed {seed}: clean {:.3} plain-robust {:.3} eot8-robust {:.3} ({:.1?})",
            plain.clean_accuracy,
            plain.robust_accuracy,
            eot.robust_accuracy,
            t0.elapsed()
        );
    }
}

fn phase_ablation() {
    let (train, test) = toy(256, 64);
    let model = load_explore_model();
    let eval = test.data.select(&(0..64).collect::<Vec<_>>());
    let t0 = Instant::now();
    let noisy = noisy_discriminative_pretrain(
        &train,
        &NoisyDiscConfig {
            steps: 800,
            batch_size: 24,
            width: 12,
            seed: 0,
            ..Default::default()
        },
    )
    .unwrap();
    println!("noisy-disc pretrain: {:.1?}", t0.elapsed());
    // Clean-probe comparability.
    let nd_feats = noisy
        .extract(&test.data.images, Condition::Unconditional, 0.1, NoiseMode::Seeded(3))
        .unwrap();
    let dr = model
        .extract(&test.data.images, Condition::Unconditional, 0.1, NoiseMode::Seeded(3))
        .unwrap();
    let tr_n = noisy
        .extract(&train.data.images, Condition::Unconditional, 0.1, NoiseMode::Seeded(4))
        .unwrap();
    let tr_d = model
        .extract(&train.data.images, Condition::Unconditional, 0.1, NoiseMode::Seeded(4))
        .unwrap();
    let probe_n = train_linear_probe(&tr_n, &train.data.labels, 2).unwrap();
    let probe_d = train_linear_probe(&tr_d, &train.data.labels, 2).unwrap();
    println!(
        "clean probe acc: noisy {:.3} diffusion {:.3}",
        probe_n.accuracy(&nd_feats, &test.data.labels),
        probe_d.accuracy(&dr, &test.data.labels)
    );

    for seed in 0..3u64 {
        let ckpt_d = train_robust(&recipe(seed, 8), &train, None, Some(&model), true, false).unwrap();
        let ckpt_n = train_robust(&recipe(seed, 8), &train, None, Some(&noisy), true, false).unwrap();
        let configs = AttackPreset::StrongPgd.configs(8.0 / 255.0, 2.0 / 255.0, 2000 + seed);
        let eval_of = |ckpt: &dra_core::robust::RobustCheckpoint| {
            let cls = ckpt.classifier(true);
            let target = ClassifierTarget { model: &cls };
            evaluate_robust_multi(&target, &eval.images, &eval.labels, &configs, EvalMode::Plain)
                .unwrap()
                .robust_accuracy
        };
        println!(
            "seed {seed}: diffusion-target {:.3} noisy-target {:.3}",
            eval_of(&ckpt_d),
            eval_of(&ckpt_n)
        );
    }
}

fn phase_lr_scan() {
    let (train, test) = toy(256, 64);
    let eval = test.data.select(&(0..64).collect::<Vec<_>>());
    for lr in [0.005_f64, 0.01, 0.02] {
        for seed in 0..3u64 {
            let t0 = Instant::now();
            let r = TrainRecipe {
                epochs: 16,
                batch_size: 16,
                peak_lr: lr,
                ema_tau: 0.98,
                seed,
                encoder: EncoderArch::SmallConv { width: 8 },
                ..Default::default()
            };
            let ckpt = train_robust(&r, &train, None, None, false, false).unwrap();
            let cls = ckpt.classifier(true);
            let clean = cls.accuracy(&eval.images, &eval.labels);
            let target = ClassifierTarget { model: &cls };
            let fast = AttackConfig {
                steps: 10,
                seed: 100 + seed,
                ..Default::default()
            };
            let rep = evaluate_robust(&target, &eval.images, &eval.labels, &fast, EvalMode::Plain)
                .unwrap();
            println!(
                "lr {lr} seed {seed}: clean {clean:.3} fast-robust {:.3} ({:.0?})",
                rep.robust_accuracy,
                t0.elapsed()
            );
        }
    }
}

fn phase_train_debug() {
    let (train, test) = toy(256, 64);
    let eval = test.data.select(&(0..64).collect::<Vec<_>>());
    let lr_env: f64 = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(0.005);
    let epochs_env: usize = std::env::args().nth(3).map(|v| v.parse().unwrap()).unwrap_or(32);
    let batch_env: usize = std::env::args().nth(4).map(|v| v.parse().unwrap()).unwrap_or(16);
    for (label, eps, steps) in [("standard", 0.0, 0usize)] {
        for seed in 0..3u64 {
            let r = TrainRecipe {
                epochs: epochs_env,
                batch_size: batch_env,
                peak_lr: lr_env,
                ema_tau: 0.98,
                epsilon: eps,
                pgd_steps: steps,
                seed,
                encoder: EncoderArch::SmallConv { width: 8 },
                ..Default::default()
            };
            let ckpt = train_robust(&r, &train, None, None, false, false).unwrap();
            let trace = &ckpt.loss_trace;
            let head = trace[..4].iter().map(|t| format!("{:.3}", t.l_at)).collect::<Vec<_>>().join(",");
            let mid = trace[trace.len()/2].clone();
            let last = trace.last().unwrap();
            let cls_live = ckpt.classifier(false);
            let cls_ema = ckpt.classifier(true);
            println!(
                "{label} seed {seed}: l_at start [{head}] mid {:.3} end {:.3} | live-clean {:.3} ema-clean {:.3}",
                mid.l_at, last.l_at,
                cls_live.accuracy(&eval.images, &eval.labels),
                cls_ema.accuracy(&eval.images, &eval.labels)
            );
        }
    }
}

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "diffusion".into());
    match phase.as_str() {
        "diffusion" => phase_diffusion(),
        "sweep" => phase_sweep(),
        "arms" => phase_arms(),
        "eot" => phase_eot(),
        "ablation" => phase_ablation(),
        "lr" => phase_lr_scan(),
        "debug" => phase_train_debug(),
        other => eprintln!("unknown phase {other}"),
    }
}
