pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod label;
pub mod lp_pooling;
pub mod model;
pub mod nn;
pub mod segment;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use label::CrackLabel;
