//! Library surface of the `cauesc` command-line tool: the run
//! configuration and the seven command implementations. The binary in
//! `main.rs` only parses flags and dispatches here.

pub mod config;
pub mod ops;
