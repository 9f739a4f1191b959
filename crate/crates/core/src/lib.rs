pub mod autodiff;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod jsonl;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod plm;
pub mod proposals;
pub mod protocol;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
