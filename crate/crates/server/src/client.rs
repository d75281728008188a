//! Blocking client for the HTTP front end.

use crate::http::{SESSION_HEADER, VEHICLE_HEADER, VERSION_HEADER};
use crate::{SessionUpload, Status, UploadAck};
use semmap::codec::Region;
use serde::Deserialize;
use std::time::Duration;
use thiserror::Error;
use ureq::Agent;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Network(String),
    #[error("server rejected request ({status}): {error}")]
    Rejected {
        status: u16,
        error: String,
        offset: Option<usize>,
    },
    #[error("unexpected server response: {0}")]
    Protocol(String),
}

impl From<ureq::Error> for ClientError {
    fn from(e: ureq::Error) -> Self {
        ClientError::Network(e.to_string())
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    offset: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MapClient {
    base: String,
    agent: Agent,
}

type Resp = ureq::http::Response<ureq::Body>;

fn rejected(status: u16, body: &str) -> ClientError {
    match serde_json::from_str::<ErrorBody>(body) {
        Ok(b) => ClientError::Rejected {
            status,
            error: b.error,
            offset: b.offset,
        },
        Err(_) => ClientError::Rejected {
            status,
            error: body.trim().to_string(),
            offset: None,
        },
    }
}

fn json<T: for<'de> Deserialize<'de>>(mut r: Resp) -> Result<T, ClientError> {
    let status = r.status().as_u16();
    let text = r.body_mut().read_to_string()?;
    if status != 200 {
        return Err(rejected(status, &text));
    }
    serde_json::from_str(&text).map_err(|e| ClientError::Protocol(e.to_string()))
}

impl MapClient {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn upload(&self, up: &SessionUpload) -> Result<UploadAck, ClientError> {
        let r = self
            .agent
            .post(format!("{}/v1/upload", self.base))
            .header(VEHICLE_HEADER, &up.vehicle_id)
            .header(SESSION_HEADER, &up.session_id)
            .header("content-type", "application/octet-stream")
            .send(&up.payload[..])?;
        json(r)
    }

    /// SMAP bytes and map version for `region`.
    pub fn fetch(&self, region: &Region) -> Result<(Vec<u8>, u64), ClientError> {
        let mut req = self.agent.get(format!("{}/v1/map", self.base));
        for (k, v) in [
            ("min_x", region.min_x),
            ("min_y", region.min_y),
            ("max_x", region.max_x),
            ("max_y", region.max_y),
        ] {
            if v.is_finite() {
                req = req.query(k, v.to_string());
            }
        }
        let mut r = req.call()?;
        let status = r.status().as_u16();
        if status != 200 {
            let text = r.body_mut().read_to_string()?;
            return Err(rejected(status, &text));
        }
        let version = r
            .headers()
            .get(VERSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ClientError::Protocol(format!("missing {VERSION_HEADER} header")))?;
        let bytes = r.body_mut().with_config().limit(u64::MAX).read_to_vec()?;
        Ok((bytes, version))
    }

    pub fn status(&self) -> Result<Status, ClientError> {
        json(self.agent.get(format!("{}/v1/status", self.base)).call()?)
    }
}
