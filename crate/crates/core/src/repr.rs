//! Shared interface for representation providers.
//!
//! Both the frozen diffusion model and the noisy-discriminative encoder can
//! serve as the alignment target during robust training; the trainer only
//! sees this trait.

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::nn::Images;
use crate::rng::derive_seed;

/// How extraction noise is drawn.
///
/// Both variants derive one noise seed per image from the carried value, so
/// the computation is a pure function of (inputs, mode). The distinction is
/// contractual: `Seeded` callers reuse the same value to replay bit-identical
/// features (deterministic robust evaluation), `Fresh` callers pass a new
/// draw id on every call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Fresh(u64),
    Seeded(u64),
}

impl NoiseMode {
    pub fn per_image_seed(&self, image_index: usize) -> u64 {
        let base = match self {
            NoiseMode::Fresh(v) | NoiseMode::Seeded(v) => *v,
        };
        derive_seed(base, "extract-noise", image_index as u64)
    }

    pub fn describe(&self) -> String {
        match self {
            NoiseMode::Fresh(v) => format!("fresh({v})"),
            NoiseMode::Seeded(v) => format!("seeded({v})"),
        }
    }
}

/// Class conditioning for an extraction call.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    Labels(&'a Array1<usize>),
    Unconditional,
}

impl<'a> Condition<'a> {
    pub fn describe(&self) -> String {
        match self {
            Condition::Labels(_) => "class-conditional".to_string(),
            Condition::Unconditional => "unconditional".to_string(),
        }
    }
}

/// A provider of pooled features on noised inputs.
pub trait RepresentationSource {
    fn feature_dim(&self) -> usize;
    fn extract(
        &self,
        images: &Images,
        condition: Condition<'_>,
        sigma: f64,
        noise: NoiseMode,
    ) -> Result<Array2<f64>>;
    /// Stable identifier recorded in checkpoints that aligned against this
    /// source.
    fn source_id(&self) -> String {
        "unspecified".to_string()
    }
}
