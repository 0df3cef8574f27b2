pub mod attack;
pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
