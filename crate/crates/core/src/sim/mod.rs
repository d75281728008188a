//! Deterministic driving simulator: synthetic marking worlds, seeded
//! sensor noise and hidden ground truth.

mod drive;
mod log;
mod render;
pub mod rng;
mod world;

pub use drive::{
    default_route, lane_waypoints, simulate_drive, DrivePath, DriveSpec, NoiseSpec, SensorFrame, SimFrame,
};
pub use log::{decode_log, encode_log, write_log, DriveLog, LogError, LogHeader, LOG_HEADER_LEN, LOG_MAGIC, LOG_VERSION};
pub use render::{render_segmentation, LabeledPixel, RENDER_DENSITY};
pub use world::{generate_world, Dash, Feature, FeatureKind, RoadNetwork, RoadStyle, WorldModel, WorldTemplate};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world template: {0}")]
    InvalidTemplate(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("invalid drive path: {0}")]
    InvalidPath(String),
}
