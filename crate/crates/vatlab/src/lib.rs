//! Files, configuration, experiment drivers and the `vatlab` command line
//! on top of [`vatlab_core`].

pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod records;

pub use config::{RunConfig, Task};
pub use error::{Result, VatlabError};
