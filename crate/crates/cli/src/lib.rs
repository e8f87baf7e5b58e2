//! Command implementations and the simulation web service behind the
//! `gazechair` binary.

pub mod commands;
pub mod server;
