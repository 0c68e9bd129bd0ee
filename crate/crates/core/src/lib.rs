mod error;
pub mod filters;
pub mod hybrid;
pub mod imgio;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod segnet;
pub mod srnet;
pub mod synthbench;
pub mod train;
pub mod uda;

pub use error::{Error, Result};
