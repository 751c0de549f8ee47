//! Joint flow matching over image tokens and a coevolving, learnable
//! projection of frozen encoder features.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` arrays and a define-by-run
//!   reverse-mode tape with a first-class stop-gradient.
//! * [`encoder`]: the synthetic frozen encoder, dataset generator and the
//!   fixed PCA baseline projection.
//! * [`projection`]: the learnable projection followed by affine-free batch
//!   normalization with running statistics.
//! * [`regularizers`]: feature variance, orthogonality and covariance
//!   penalties against feature collapse.
//! * [`flow`]: coupled interpolation and the joint velocity loss.
//! * [`backbone`]: merged-token latent denoiser and the pixel-mode
//!   encoder/decoder variant.
//! * [`samplers`]: Euler, Heun and Euler–Maruyama integrators with
//!   image-only classifier-free guidance.
//! * [`metrics`]: spatial self-similarity metrics, collapse diagnostics
//!   and a Gaussian Fréchet distance.
//! * [`trainer`], [`config`] and [`report`]: optimization, checkpoints,
//!   configuration files and run directories.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod projection;
pub mod regularizers;
pub mod report;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{Mode, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
