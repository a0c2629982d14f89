//! Library side of the `rib` binary, exposed so the report format and
//! benchmark driver can be reused and tested.

pub mod bench;
pub mod cli;
pub mod report;

pub use cli::{run, Cli};
