//! Fast peripheral vision simulation.
//!
//! The crate is organized bottom-up:
//!
//! * [`imagekit`] image buffers, PNG codec, grayscale and resizing.
//! * [`foveamask`] the eccentricity mask fed to the generator as a fourth channel.
//! * [`radialblur`] the deterministic eccentricity-dependent Gaussian blur.
//! * [`pooling`] overlapping pooling regions whose size follows Bouma's law.
//! * [`texstats`] per-region texture statistics with analytic gradients.
//! * [`statmatch`] gradient-based synthesis of images matching region statistics.
//! * [`fgn`] the foveated generative network: forward, backprop training, checkpoints.
//! * [`evalharness`] pixel and statistics error metrics, reports and benchmarks.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). Concrete
//! aliases for the common instantiations live at the crate root.

pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod fgn;
pub mod foveamask;
pub mod imagekit;
pub mod pooling;
pub mod radialblur;
pub mod scalar;
pub mod statmatch;
pub mod texstats;

pub use error::{Error, Result};
pub use foveamask::{Fixation, MaskChannel};
pub use scalar::Scalar;

/// Unit-range single precision image, the interchange type of the crate.
pub type ImageF32 = imagekit::Image<f32>;
/// Double precision image, used for gradient checks and statistics matching.
pub type ImageF64 = imagekit::Image<f64>;
pub type FgnParamsF32 = fgn::FgnParams<f32>;
pub type FgnParamsF64 = fgn::FgnParams<f64>;
pub type PyramidF64 = texstats::Pyramid<f64>;
pub type StatVectorF64 = texstats::StatVector<f64>;
pub type StatVectorF32 = texstats::StatVector<f32>;
