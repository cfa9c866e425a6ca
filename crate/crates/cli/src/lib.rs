//! Pipeline stages behind the `qurag` command.

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::RunConfig;
pub use manifest::RunManifest;
pub use stages::Failure;
