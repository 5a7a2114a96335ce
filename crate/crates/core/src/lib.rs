pub mod augment;
pub mod blocks;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
