//! Client side of the remote policy protocol (v1), plus a small reference
//! server that mirrors a toy policy for loopback use.

mod client;
pub mod protocol;
mod server;

pub use client::{topk_distribution, RemoteSession, RemoteTeacher, NORMALIZATION_TOL};
pub use protocol::{Message, PolicyRequest, PolicyResponse, RequestKind, PROTOCOL_VERSION};
pub use server::{serve_connection, PolicyServer};
