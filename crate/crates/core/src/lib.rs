pub mod anchors;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod head;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod tracker;
pub mod trainer;

pub use error::{DmvError, Result};
