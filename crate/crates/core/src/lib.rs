//! Discrete-event simulation of QUIC handshakes comparing servers that
//! acknowledge the ClientHello instantly (IACK) with servers that wait for
//! the certificate (WFC).

pub mod analysis;
pub mod cli;
pub mod config;
pub mod endpoints;
pub mod netem;
pub mod profiles;
pub mod recovery;
pub mod sim;
pub mod simulation;
pub mod traces;

pub use endpoints::ServerMode;
pub use profiles::{builtin_profiles, ImplementationProfile, Quirk};
pub use sim::{RunStatus, SimTime};
pub use simulation::{simulate, RunConfig, RunResult};
