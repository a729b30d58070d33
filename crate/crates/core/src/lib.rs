pub mod ablation;
pub mod encoders;
pub mod envsim;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod ope;
pub mod policy;
pub mod tensor;
pub mod textparse;
pub mod train;

pub use error::{Error, Result};
