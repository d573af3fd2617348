//! Heat-conduction visual operators on the discrete cosine transform.
//!
//! The crate bundles everything needed to train and measure a small
//! heat-conduction encoder on a laptop:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`spectral`]: orthonormal 2-D DCT (dense and FFT paths).
//! * [`heat`]: the heat conduction operator, learnable diffusivity and the
//!   residual block.
//! * [`masking`]: random sector masks that split images into low and high
//!   frequency components.
//! * [`model`]: embedding, encoder, frequency and spatial decoders, losses.
//! * [`train`]: synthetic optical/SAR pairs, AdamW, warmup + cosine
//!   schedule, checkpoints and the pretraining loop.
//! * [`bench`]: analytic flop models, throughput scans and a finite
//!   difference heat-equation oracle.
//! * [`gradcheck`]: central-difference gradient verification.
//! * [`netpbm`], [`config`], [`cli`]: file formats and the `heatlens` driver.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heat;
pub mod masking;
pub mod model;
pub mod netpbm;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tape, Tensor, Var};
