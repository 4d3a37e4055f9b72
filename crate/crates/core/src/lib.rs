//! Locally optimal block clustered quantization.
//!
//! Tensors are split into block arrays of `L_A` scalars, each scaled into a
//! fixed integer range, and then into blocks of `L_b` scalars. Every block
//! picks one of `N_c` small codebooks and stores a `B`-bit index per scalar.
//! The codebooks are calibrated by alternating block clustering with
//! per-cluster Lloyd-Max refits.

pub mod baselines;
pub mod bitio;
pub mod calib;
pub mod codec;
pub mod error;
pub mod eval;
pub mod formats;
pub mod lloyd_max;
pub mod rng;
pub mod sum;
pub mod tensor;

pub use calib::{
    calibrate, calibrate_tensor, freeze_family, load_family, save_family, BlockSampling, CalibOptions, CalibTrace, Calibration,
    Codebook, CodebookFamily, InitMethod, QuantConfig,
};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{load_tensor, save_tensor, synth_tensor, DistSpec, TensorView};
