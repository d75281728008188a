//! End-to-end stages over simulator sensor frames: on-vehicle map building
//! and map-relative localization.

use crate::geometry::{CameraModel, GeometryError, GroundProjector, Pixel, Pose, RoiSpec};
use crate::grid::{FeatureScan, LabeledPoint, ScanPoint, SemanticGridMap, SemanticLabel, CELL_SIZE};
use crate::localizer::{EkfState, LocalizationRecord, Localizer, LocalizerConfig, LocalizerError, MapIndex};
use crate::posegraph::{
    initial_guess, optimize, FactorWeights, GnssMeasurement, OdometryMeasurement, PoseGraphError, PoseGraphProblem,
    Solution, SolverConfig,
};
use crate::sim::{SensorFrame, WorldModel};
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error("pixel ({u}, {v}) in frame {frame} lies outside the {w}x{h} calibration")]
    ImageMismatch { frame: u32, u: f32, v: f32, w: u32, h: u32 },
    #[error("no GNSS fixes far enough apart to initialize the heading")]
    NoInitialFix,
}

/// Back-project one frame's labeled pixels onto the vehicle ground plane.
pub fn frame_scan(frame: &SensorFrame, proj: &GroundProjector, roi: &RoiSpec) -> Result<FeatureScan, PipelineError> {
    let cam = proj.camera();
    let mut points = Vec::with_capacity(frame.pixels.len());
    for p in &frame.pixels {
        let px = Pixel::new(p.u as f64, p.v as f64);
        if !cam.in_bounds(&px) {
            return Err(PipelineError::ImageMismatch {
                frame: frame.index,
                u: p.u,
                v: p.v,
                w: cam.image_w,
                h: cam.image_h,
            });
        }
        if let Some(g) = proj.ground_point_in_roi(&px, roi)? {
            points.push(ScanPoint {
                x: g.x,
                y: g.y,
                label: p.label,
            });
        }
    }
    Ok(FeatureScan {
        timestamp: frame.t,
        points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub camera: CameraModel,
    pub roi: RoiSpec,
    pub weights: FactorWeights,
    pub solver: SolverConfig,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            camera: CameraModel::simulator_default(),
            roi: RoiSpec::default(),
            weights: FactorWeights::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltMap {
    pub map: SemanticGridMap,
    /// Optimized pose per frame.
    pub poses: Vec<Pose>,
    /// Solver report; `None` for an empty drive.
    pub solution: Option<Solution>,
}

/// Vote a vehicle-frame scan into `map` at `pose`.
///
/// Ground points sit near z = 0, which is a layer boundary of the grid, so
/// each point goes to the layer nearest its height rather than the one below.
pub fn vote_scan(map: &mut SemanticGridMap, scan: &FeatureScan, pose: &Pose) {
    for sp in &scan.points {
        let w = pose.transform_point(&Vector3::new(sp.x, sp.y, 0.0));
        map.insert_point(&LabeledPoint::new(w.x, w.y, w.z + CELL_SIZE / 2.0, sp.label));
    }
}

/// Smooth the drive with GNSS + odometry, then vote every frame's scan at
/// its optimized pose.
pub fn build_map(frames: &[SensorFrame], cfg: &MappingConfig) -> Result<BuiltMap, PipelineError> {
    if frames.is_empty() {
        return Ok(BuiltMap {
            map: SemanticGridMap::new(),
            poses: Vec::new(),
            solution: None,
        });
    }
    let proj = cfg.camera.ground_projector()?;
    cfg.roi.validate()?;
    let scans = frames
        .iter()
        .map(|f| frame_scan(f, &proj, &cfg.roi))
        .collect::<Result<Vec<_>, _>>()?;
    let odom: Vec<OdometryMeasurement> = frames[1..].iter().map(|f| f.odom).collect();
    let gnss: BTreeMap<usize, GnssMeasurement> =
        frames.iter().enumerate().filter_map(|(i, f)| f.gnss.map(|g| (i, g))).collect();
    if gnss.is_empty() {
        return Err(PoseGraphError::UnobservableGauge.into());
    }
    let problem = PoseGraphProblem::new(initial_guess(&odom, &gnss), odom, gnss, cfg.weights)?;
    let solution = optimize(&problem, &cfg.solver)?;
    let mut map = SemanticGridMap::new();
    for (scan, pose) in scans.iter().zip(&solution.poses) {
        vote_scan(&mut map, scan, pose);
    }
    Ok(BuiltMap {
        map,
        poses: solution.poses.clone(),
        solution: Some(solution),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSetup {
    pub camera: CameraModel,
    pub roi: RoiSpec,
    pub filter: LocalizerConfig,
    /// GNSS baseline used to estimate the starting heading, meters.
    pub heading_baseline: f64,
    /// Standard deviations of the starting estimate: x, y (m) and yaw (rad).
    pub initial_sigma: [f64; 3],
}

impl Default for LocalizationSetup {
    fn default() -> Self {
        Self {
            camera: CameraModel::simulator_default(),
            roi: RoiSpec::default(),
            filter: LocalizerConfig::default(),
            heading_baseline: 5.0,
            initial_sigma: [0.1, 0.1, 1f64.to_radians()],
        }
    }
}

/// Starting frame and estimate: position from the first fix, heading from
/// the GNSS displacement over the first `baseline` meters compared with the
/// odometry displacement over the same frames.
pub fn initial_state(frames: &[SensorFrame], setup: &LocalizationSetup) -> Result<(usize, EkfState), PipelineError> {
    let (i, first) = frames
        .iter()
        .enumerate()
        .find_map(|(i, f)| f.gnss.map(|g| (i, g)))
        .ok_or(PipelineError::NoInitialFix)?;
    let mut chain = Pose::identity();
    for f in &frames[i + 1..] {
        chain = chain.compose(&f.odom.as_pose());
        let Some(g) = f.gnss else { continue };
        let d = g.p - first.p;
        if d.xy().norm() >= setup.heading_baseline && chain.p.xy().norm() > 1e-9 {
            let yaw = d.y.atan2(d.x) - chain.p.y.atan2(chain.p.x);
            let s = setup.initial_sigma;
            let cov = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
            return Ok((i, EkfState::new(first.p.x, first.p.y, yaw, cov)));
        }
    }
    Err(PipelineError::NoInitialFix)
}

/// Localize a drive against `map`, one record per frame from the
/// initialization frame on.
pub fn localize_drive(
    frames: &[SensorFrame],
    map: &MapIndex,
    setup: &LocalizationSetup,
) -> Result<Vec<LocalizationRecord>, PipelineError> {
    let proj = setup.camera.ground_projector()?;
    setup.roi.validate()?;
    let (start, init) = initial_state(frames, setup)?;
    let mut loc = Localizer::new(map, init, frames[start].t, setup.filter)?;
    let mut out = Vec::with_capacity(frames.len() - start);
    for (k, f) in frames.iter().enumerate().skip(start) {
        let scan = frame_scan(f, &proj, &setup.roi)?;
        let rec = if k == start {
            loc.observe(f.t, &scan)
        } else {
            loc.step(f.t, &f.odom, &scan)
        };
        out.push(rec);
    }
    Ok(out)
}

/// Occupied cells whose label appears nowhere in their footprint.
pub fn label_mismatches(map: &SemanticGridMap, world: &WorldModel) -> Vec<(crate::grid::GridIndex, SemanticLabel)> {
    const STEPS: usize = 4;
    let mut bad = Vec::new();
    for (idx, s) in map.iter() {
        let Ok(label) = s.label() else { continue };
        let (x0, y0) = (idx.ix as f64 * CELL_SIZE, idx.iy as f64 * CELL_SIZE);
        let found = (0..=STEPS).any(|a| {
            (0..=STEPS).any(|b| {
                let x = x0 + CELL_SIZE * a as f64 / STEPS as f64;
                let y = y0 + CELL_SIZE * b as f64 / STEPS as f64;
                world.label_at(x, y) == Some(label)
            })
        });
        if !found {
            bad.push((*idx, label));
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        default_route, generate_world, lane_waypoints, simulate_drive, DrivePath, DriveSpec, NoiseSpec, RoadStyle,
        SimFrame, WorldTemplate,
    };

    fn drive(t: &WorldTemplate, noise: &NoiseSpec) -> (WorldModel, Vec<SimFrame>) {
        let style = RoadStyle::default();
        let world = generate_world(t, &style, 1).unwrap();
        let wp = lane_waypoints(&t.network().unwrap(), &style, &default_route(t)).unwrap();
        let spec = DriveSpec {
            path: DrivePath::new(&wp, 8.0).unwrap(),
            speed: 5.0,
            frame_rate: 10.0,
            camera: CameraModel::simulator_default(),
            roi: RoiSpec::default(),
        };
        let frames = simulate_drive(&world, &spec, noise).unwrap();
        (world, frames)
    }

    fn tight() -> MappingConfig {
        MappingConfig {
            weights: FactorWeights {
                sigma_odom_p: 1e-3,
                sigma_odom_q: 1e-4,
                sigma_gnss: 1e-3,
                ..FactorWeights::default()
            },
            ..MappingConfig::default()
        }
    }

    #[test]
    fn noiseless_straight_road_map_matches_world() {
        let (world, frames) = drive(&WorldTemplate::StraightRoad { lanes: 2, length: 60.0 }, &NoiseSpec::none(3));
        let obs: Vec<SensorFrame> = frames.iter().map(|f| f.observation.clone()).collect();
        let built = build_map(&obs, &tight()).unwrap();
        for (p, f) in built.poses.iter().zip(&frames) {
            assert!((p.p - f.truth.p).norm() < 1e-6);
        }
        assert!(built.map.cell_count() > 10_000);
        assert!(built.map.iter().all(|(i, _)| i.iz == 0));
        assert_eq!(label_mismatches(&built.map, &world), vec![]);
        let lane = built.map.iter().filter(|(_, s)| s.label() == Ok(SemanticLabel::LaneLine)).count();
        assert!(lane > 500, "{lane}");
    }

    #[test]
    fn empty_and_unobservable_drives() {
        assert!(build_map(&[], &MappingConfig::default()).unwrap().map.is_empty());
        let mut noise = NoiseSpec::none(1);
        noise.gnss_blocked = vec![[0.0, 1e9]];
        let (_, frames) = drive(&WorldTemplate::StraightRoad { lanes: 1, length: 20.0 }, &noise);
        let obs: Vec<SensorFrame> = frames.iter().map(|f| f.observation.clone()).collect();
        assert!(matches!(
            build_map(&obs, &MappingConfig::default()),
            Err(PipelineError::PoseGraph(PoseGraphError::UnobservableGauge))
        ));
    }

    #[test]
    fn calibration_mismatch_is_reported() {
        let (_, frames) = drive(&WorldTemplate::StraightRoad { lanes: 1, length: 20.0 }, &NoiseSpec::none(1));
        let obs: Vec<SensorFrame> = frames.iter().map(|f| f.observation.clone()).collect();
        let mut cfg = MappingConfig::default();
        cfg.camera.image_w = 320;
        cfg.camera.image_h = 240;
        assert!(matches!(build_map(&obs, &cfg), Err(PipelineError::ImageMismatch { .. })));
    }

    #[test]
    fn noiseless_localization_stays_within_a_cell() {
        let t = WorldTemplate::Intersection { lanes: 2, arm_length: 60.0 };
        let (_, frames) = drive(&t, &NoiseSpec::none(5));
        let obs: Vec<SensorFrame> = frames.iter().map(|f| f.observation.clone()).collect();
        let built = build_map(&obs, &tight()).unwrap();
        let index = MapIndex::new(&built.map);
        let recs = localize_drive(&obs, &index, &LocalizationSetup::default()).unwrap();
        assert!(recs.len() > 200);
        let truth: Vec<(f64, Pose)> = frames.iter().map(|f| (f.observation.t, f.truth)).collect();
        let (errs, summary) = crate::localizer::evaluate_errors(&recs, &truth);
        assert!(errs.iter().all(|e| e.x < 0.1 && e.y < 0.1), "{summary:?}");
        assert!(summary.x.mean < 0.02 && summary.y.mean < 0.02, "{summary:?}");
    }
}
