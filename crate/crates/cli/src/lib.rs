//! Command-line front end for tierkv: configuration files, the TCP server
//! and its line protocol, and the offline tools.

pub mod commands;
pub mod config;
pub mod protocol;
pub mod remote;
pub mod server;
