//! Networked daemon and client.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{client_query, ClientOptions, QueryOutcome};
pub use server::{admin_command, serve, AdminHandle, ServerConfig, ServerHandle, ServerStats};
