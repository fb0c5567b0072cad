//! Library half of the command-line toolkit: evaluation tables, layered run
//! configuration, and gradient verification routines shared by the binary and
//! the test suites.

pub mod commands;
pub mod config;
pub mod eval;
pub mod gradcheck;
