//! Multi-source Gaussian plume localization with recurrent multi-agent Q-learning.

pub mod agents;
pub mod env;
pub mod error;
pub mod heap;
pub mod mapfile;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod replay;
mod binio;
pub mod plume;

pub use error::{Error, Result};
