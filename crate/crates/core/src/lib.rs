pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod error;
pub mod features;
pub mod hmc;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod networks;
pub mod params;
pub mod pipeline;
pub mod segmentation;
pub mod util;

pub use error::{Error, Result};
