//! Shared fixtures for the benchmark suite.

use dra_core::data::{load_dataset, Dataset, DatasetSpec, Split, ToyConfig};
use dra_core::diffusion::{DiffusionModel, NoiseSchedule, UNetConfig};
use dra_core::nn::EncoderArch;
use dra_core::robust::RobustClassifier;

pub fn bench_dataset() -> Dataset {
    load_dataset(
        &DatasetSpec::Toy2Class(ToyConfig {
            train_per_class: 64,
            test_per_class: 32,
            ..ToyConfig::default()
        }),
        Split::Train,
        0,
    )
    .expect("toy dataset")
}

pub fn bench_classifier() -> RobustClassifier {
    RobustClassifier::init(EncoderArch::SmallConv { width: 8 }, 1, 16, 2, 0)
}

pub fn bench_diffusion() -> DiffusionModel {
    DiffusionModel::init(
        UNetConfig {
            in_channels: 1,
            width: 16,
            num_classes: 2,
            image_size: 16,
        },
        NoiseSchedule::default(),
        0,
    )
    .expect("diffusion model")
}
