pub mod circphase;
pub mod cli;
pub mod dataset;
pub mod epie;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod physics;
pub mod recon;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
