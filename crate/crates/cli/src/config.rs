//! TOML pipeline configuration. Every section is optional; unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 7
//! calibration = "camera.json"      # default: built-in simulator camera
//!
//! [world]
//! file = "world.json"              # default: generate from the template
//! template = { template = "urban_block", blocks_x = 2, blocks_y = 2, spacing = 100.0, lanes = 2 }
//!
//! [drive]
//! speed = 5.0
//! frame_rate = 10.0
//!
//! [noise]
//! seg_flip_prob = 0.05
//! gnss_blocked = [[200.0, 350.0]]
//!
//! [server]
//! url = "http://127.0.0.1:8080"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use crate::CliError;
use nalgebra::{Matrix3, Vector3};
use semmap::geometry::{CameraModel, RoiSpec};
use semmap::localizer::{IcpConfig, LocalizerConfig, ProcessNoise};
use semmap::pipeline::{LocalizationSetup, MappingConfig};
use semmap::posegraph::{FactorWeights, SolverConfig};
use semmap::sim::{
    default_route, generate_world, lane_waypoints, DrivePath, DriveSpec, NoiseSpec, RoadStyle, WorldModel, WorldTemplate,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// World JSON to load instead of generating one.
    pub file: Option<PathBuf>,
    pub template: WorldTemplate,
    pub style: RoadStyle,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            file: None,
            template: WorldTemplate::UrbanBlock {
                blocks_x: 2,
                blocks_y: 2,
                spacing: 100.0,
                lanes: 2,
            },
            style: RoadStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveConfig {
    pub speed: f64,
    pub frame_rate: f64,
    pub fillet_radius: f64,
    /// Explicit path; by default the template's lane route.
    pub waypoints: Option<Vec<[f64; 2]>>,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            speed: 5.0,
            frame_rate: 10.0,
            fillet_radius: 8.0,
            waypoints: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub process: ProcessNoise,
    /// ICP measurement standard deviations: x, y (m) and yaw (rad).
    pub measurement_sigma: [f64; 3],
    pub heading_baseline: f64,
    pub initial_sigma: [f64; 3],
}

impl Default for FilterConfig {
    fn default() -> Self {
        let s = LocalizationSetup::default();
        let m = LocalizerConfig::default().measurement;
        Self {
            process: ProcessNoise::default(),
            measurement_sigma: [m[(0, 0)].sqrt(), m[(1, 1)].sqrt(), m[(2, 2)].sqrt()],
            heading_baseline: s.heading_baseline,
            initial_sigma: s.initial_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub url: String,
    pub listen: String,
    pub data_dir: PathBuf,
    /// Seconds between background compactions; 0 disables them.
    pub compact_interval_s: f64,
    pub checkpoint_every: u64,
    pub timeout_s: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("semmap-data"),
            compact_interval_s: 5.0,
            checkpoint_every: 256,
            timeout_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds world generation and sensor noise. Overrides `noise.seed`.
    pub seed: u64,
    pub calibration: Option<PathBuf>,
    pub world: WorldConfig,
    pub roi: RoiSpec,
    pub drive: DriveConfig,
    pub noise: NoiseSpec,
    pub weights: FactorWeights,
    pub solver: SolverConfig,
    pub icp: IcpConfig,
    pub filter: FilterConfig,
    pub server: ServerSection,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parse `path`, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.calibration);
        resolve(base, &mut cfg.world.file);
        if cfg.server.data_dir.is_relative() {
            cfg.server.data_dir = base.join(&cfg.server.data_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for p in [&self.calibration, &self.world.file].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        self.noise.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.roi.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.server.compact_interval_s < 0.0 || self.server.timeout_s <= 0.0 {
            return Err(CliError::Config("server intervals must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Noise model with the pipeline seed applied.
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            seed: self.seed,
            ..self.noise.clone()
        }
    }

    pub fn camera(&self) -> Result<CameraModel, CliError> {
        camera_from(self.calibration.as_deref())
    }

    pub fn world(&self) -> Result<WorldModel, CliError> {
        match &self.world.file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                WorldModel::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
            }
            None => generate_world(&self.world.template, &self.world.style, self.seed)
                .map_err(|e| CliError::Config(e.to_string())),
        }
    }

    pub fn drive_spec(&self) -> Result<DriveSpec, CliError> {
        let cfg = |e: semmap::sim::SimError| CliError::Config(e.to_string());
        let waypoints = match &self.drive.waypoints {
            Some(w) => w.clone(),
            None => {
                let t = &self.world.template;
                lane_waypoints(&t.network().map_err(cfg)?, &self.world.style, &default_route(t)).map_err(cfg)?
            }
        };
        Ok(DriveSpec {
            path: DrivePath::new(&waypoints, self.drive.fillet_radius).map_err(cfg)?,
            speed: self.drive.speed,
            frame_rate: self.drive.frame_rate,
            camera: self.camera()?,
            roi: self.roi,
        })
    }

    pub fn mapping(&self, camera: CameraModel) -> MappingConfig {
        MappingConfig {
            camera,
            roi: self.roi,
            weights: self.weights,
            solver: self.solver,
        }
    }

    pub fn localization(&self, camera: CameraModel) -> LocalizationSetup {
        let m = self.filter.measurement_sigma;
        LocalizationSetup {
            camera,
            roi: self.roi,
            filter: LocalizerConfig {
                icp: self.icp,
                process: self.filter.process,
                measurement: nalgebra_diag(m),
            },
            heading_baseline: self.filter.heading_baseline,
            initial_sigma: self.filter.initial_sigma,
        }
    }
}

fn nalgebra_diag(s: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]))
}

pub fn camera_from(path: Option<&Path>) -> Result<CameraModel, CliError> {
    match path {
        Some(p) => CameraModel::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
        None => Ok(CameraModel::simulator_default()),
    }
}
