//! Identity unlearning for identity-conditioned diffusion models, at desk scale.
//!
//! The crate is organized by subsystem:
//!
//! - [`idspace`]: synthetic identity embeddings, centroids, clustering, anchor selection.
//! - [`diffusion`]: noise schedule, token-attention denoiser, sampler, synthetic observation world.
//! - [`unlearn`]: anchor-guided unlearning objective, surgical masks, the training loop.
//! - [`baselines`]: SISS-style gradient deletion, closed-form UCE editing, WID.
//! - [`metrics`]: ISM, SRK, unbiased MMD², layerwise identity separation, evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod diffusion;
pub mod error;
pub mod idspace;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod unlearn;

pub use error::{PiuError, Result};
