//! A latent-bottleneck cross-attention transformer for image classification.
//!
//! An image is cut into patches and embedded as a data array of `M` rows. A
//! small learned latent array of `N` rows repeatedly cross-attends into the
//! data array and is refined by a latent self-attention transformer, so the
//! cost grows as `O(MN + LN²)` rather than quadratically in `M`.
//!
//! The crate carries everything needed to train and evaluate it on the CPU:
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and a define-by-run gradient tape
//! - [`attention`] / [`model`]: attention blocks, the classifier, checkpoints
//! - [`optim`]: LAMB and the training loop
//! - [`dataio`]: BMP/PNG decoding, resizing, augmentation, manifests, splits
//! - [`metrics`]: confusion matrices, per-class rates, Cohen's kappa
//! - [`flops`]: analytic cost model used by the complexity benchmark
//! - [`cli`]: the `train`/`evaluate`/`predict`/`bench`/`selftest` commands

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
