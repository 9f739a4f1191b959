//! Self-adaptive pseudo-labelling: the loss-trend weight controller and the
//! fusion of model-driven and input-driven candidate scores.

mod controller;
mod fusion;

pub use controller::*;
pub use fusion::*;
