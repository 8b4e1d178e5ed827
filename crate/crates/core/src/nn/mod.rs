//! Minimal hand-rolled neural-network substrate: f64 tensors, explicit
//! forward/backward pairs, named parameter sets, and two optimizers. Exact
//! gradients are a hard requirement here (the test suite pins every loss
//! against central finite differences), which is why this stays in-tree
//! instead of binding a framework.

pub mod encoders;
pub mod ops;
pub mod optim;
pub mod params;

pub use encoders::{ClassifierEncoder, EncoderArch, EncoderCache};
pub use ops::Images;
pub use params::ParamSet;
