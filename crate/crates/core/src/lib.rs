//! Large-scale optical characterization of solid-state quantum emitters.
//!
//! The crate covers the full computational chain from raw widefield frames to
//! population statistics:
//!
//! - [`fiducial`]: 25-bit fiducial codes (encode, rasterize, convolutional
//!   detection, majority vote) that define the global chip frame.
//! - [`imageproc`]: convolution, Gaussian kernels, bandpass spot finding,
//!   max projection and 2D Gaussian fitting.
//! - [`ple`]: frequency-tagged frame stacks to per-site PLE spectra and
//!   pseudo-Voigt peak catalogs.
//! - [`registry`]: local-to-global transforms, cross-experiment clustering
//!   and spectral differencing.
//! - [`physics`]: NV and SiV transition labels and the SiV strain model.
//! - [`stats`]: kernel density estimates, Gaussian population fits, binned
//!   linewidths, the widefield timing model and the dip test.
//! - [`synth`]: ground-truth scenes and forward rendering used as test oracle.
//! - [`scan`]: simulated chip traversal with fiducial feedback and autofocus.
//! - [`io`]: on-disk frame stack format and CSV helpers.

pub mod error;
pub mod fiducial;
pub mod image;
pub mod imageproc;
pub mod io;
pub mod lm;
pub mod physics;
pub mod ple;
pub mod registry;
pub mod robust;
pub mod scan;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use image::{Image, Kernel, KernelNorm};

/// Version of the on-disk formats written by [`io`].
pub const FORMAT_VERSION: u32 = 1;
