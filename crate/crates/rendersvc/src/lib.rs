//! Command-line entry points and the frame-streaming service.
//!
//! Clients send [`protocol::PoseMessage`] JSON text frames over WebSocket and
//! receive [`protocol::FrameMessage`] binary frames. Each connection renders
//! the newest pose only ([`mailbox`]); the splats are estimated once at
//! startup and shared read-only ([`engine`]).

pub mod cli;
pub mod engine;
pub mod mailbox;
pub mod protocol;
pub mod server;
