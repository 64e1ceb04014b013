pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod film;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pooling;
pub mod train;

pub use error::{Error, Result};
