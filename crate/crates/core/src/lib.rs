pub mod adaptation;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod stream;

pub use error::{Error, Result};
