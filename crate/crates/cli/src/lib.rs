//! Pipeline driver behind the `sslspk` binary: config parsing, the output
//! directory layout and one function per subcommand.

pub mod config;
pub mod error;
pub mod stages;
pub mod store;

pub use config::PipelineConfig;
pub use error::CliError;
