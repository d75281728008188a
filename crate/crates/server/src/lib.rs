//! Crowd-sourced map aggregation: vehicles upload occupied-cell payloads
//! from their drives, the server merges them into one global semantic map
//! and hands out contour-compressed extracts of it.
//!
//! [`MapServer`] is the transport-independent core. [`http`] exposes it over
//! HTTP/1.1 and [`client`] is the matching blocking client.

pub mod client;
pub mod http;
mod service;
pub mod store;

pub use service::{CompactStats, MapServer, ServerConfig, SessionUpload, Snapshot, Status, UploadAck};

use semmap::codec::EncodeError;
use semmap::grid::UploadError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Global version record, bumped once per merged session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MapVersion {
    pub version: u64,
    pub merged_sessions: u64,
    /// Wall-clock time of the last merge, milliseconds since the Unix epoch.
    pub updated_at_ms: u64,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("malformed upload: {0}")]
    BadPayload(#[from] UploadError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("store write failed: {0}")]
    Store(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("encode: {0}")]
    Encode(#[from] EncodeError),
}
