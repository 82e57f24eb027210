//! Operator-facing surface of the copilot: the `/session` WebSocket endpoint
//! and the batch experiment pipeline used by the `copilot` CLI.

pub mod live;
pub mod pipeline;
pub mod protocol;
pub mod server;
