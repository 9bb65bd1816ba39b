pub mod diffusion;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod gradguide;
pub mod mdfi;
pub mod metrics;
pub mod minilang;
pub mod oracles;
pub mod suite;
pub mod surrogate;
pub mod verify;

pub use error::{CdcError, Result};
