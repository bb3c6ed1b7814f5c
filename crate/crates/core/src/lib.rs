pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod reshaper;
pub mod trainer;

pub use error::{Error, Result};
