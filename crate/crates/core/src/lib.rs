//! Zero-shot video editing by fusing attention maps captured during DDIM
//! inversion, on a miniature attention-only latent-diffusion stack.
//!
//! The flow mirrors a real editing run at desk scale:
//!
//! 1. [`pipeline::synth_video`] (or frames read from disk) are encoded to a
//!    [`LatentVideo`];
//! 2. [`pipeline::invert_video`] walks the latent up the noise schedule with
//!    the source prompt, capturing every attention map in an
//!    [`store::AttentionStore`];
//! 3. [`pipeline::run_denoise`] samples back down with the edit prompt while
//!    a [`fusion::FusionProbe`] swaps in stored cross-attention columns and
//!    blends stored self-attention under a thresholded word mask.
//!
//! Everything is double precision and seeded, so runs are bit-reproducible.

pub mod error;
pub mod io;
pub mod latent;
pub mod model;
pub mod numerics;
pub mod fusion;
pub mod pipeline;
pub mod schedule;
pub mod selfcheck;
pub mod store;

pub use error::{Error, Result};
pub use latent::LatentVideo;
pub use numerics::{SeededRng, Tensor};
