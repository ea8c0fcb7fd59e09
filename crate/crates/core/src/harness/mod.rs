//! Instance generators, experiment drivers and the command-line front end.

mod cli;
mod generate;
mod study;

pub use cli::*;
pub use generate::*;
pub use study::*;
