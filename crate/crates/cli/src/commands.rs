//! Pipeline stages behind the subcommands. Each returns a report so the
//! stages can also be driven from tests and examples.

use crate::config::{camera_from, PipelineConfig};
use crate::CliError;
use semmap::codec::format::MAP_MAGIC;
use semmap::codec::{decode, decompress_to_map, DecodeError, Region};
use semmap::geometry::{CameraModel, Pose};
use semmap::grid::{decode_upload, encode_upload, SemanticGridMap, UploadError, UPLOAD_MAGIC};
use semmap::localizer::{
    evaluate_errors, read_localization_csv, write_error_csv, write_localization_csv, ErrorStats, ErrorSummary,
    LocalizationRecord, MapIndex, ProcessNoise,
};
use semmap::pipeline::{build_map, label_mismatches, localize_drive, PipelineError};
use semmap::posegraph::PoseGraphError;
use semmap::sim::{decode_log, encode_log, simulate_drive, DriveLog, LogError, LogHeader, NoiseSpec, SimFrame, WorldModel};
use semmap_server::client::{ClientError, MapClient};
use semmap_server::{MapServer, SessionUpload};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Duration;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::UnsupportedVersion(_) => CliError::VersionMismatch(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::UnsupportedVersion { .. } => CliError::VersionMismatch(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<UploadError> for CliError {
    fn from(e: UploadError) -> Self {
        match e {
            UploadError::UnsupportedVersion { .. } => CliError::VersionMismatch(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::PoseGraph(PoseGraphError::UnobservableGauge) | PipelineError::NoInitialFix => {
                CliError::Unobservable(e.to_string())
            }
            PipelineError::ImageMismatch { .. } | PipelineError::Geometry(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Network(m) => CliError::Network(m),
            ClientError::Rejected { status: 400, .. } => CliError::Input(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn load_log(path: &Path) -> Result<DriveLog, CliError> {
    Ok(decode_log(&read(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub frames: usize,
    pub gnss_frames: usize,
    pub gnss_coverage: f64,
    pub length_m: f64,
}

/// Drive the configured path through `world` with `noise`.
pub fn simulate(cfg: &PipelineConfig, world: &WorldModel, noise: &NoiseSpec) -> Result<(LogHeader, Vec<SimFrame>), CliError> {
    let spec = cfg.drive_spec()?;
    let frames = simulate_drive(world, &spec, noise).map_err(|e| CliError::Config(e.to_string()))?;
    let header = LogHeader {
        image_w: spec.camera.image_w,
        image_h: spec.camera.image_h,
        frame_rate: spec.frame_rate,
    };
    Ok((header, frames))
}

pub fn cmd_simulate(cfg: &PipelineConfig, out: &Path, world_out: Option<&Path>) -> Result<SimulateReport, CliError> {
    let world = cfg.world()?;
    let (header, frames) = simulate(cfg, &world, &cfg.noise())?;
    write(out, &encode_log(&header, &frames))?;
    if let Some(p) = world_out {
        write(p, world.to_json().as_bytes())?;
    }
    let gnss_frames = frames.iter().filter(|f| f.observation.gnss.is_some()).count();
    Ok(SimulateReport {
        frames: frames.len(),
        gnss_frames,
        gnss_coverage: if frames.is_empty() { 0.0 } else { gnss_frames as f64 / frames.len() as f64 },
        length_m: cfg.drive_spec()?.path.length(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapBuildReport {
    pub frames: usize,
    pub cells: usize,
    pub bytes: usize,
    pub trajectory_cost: f64,
    pub iterations: usize,
    /// Cells whose label disagrees with the world, when one was given.
    pub label_mismatches: Option<usize>,
}

fn check_calibration(header: &LogHeader, cam: &CameraModel) -> Result<(), CliError> {
    if (header.image_w, header.image_h) != (cam.image_w, cam.image_h) {
        return Err(CliError::Input(format!(
            "log images are {}x{} but the calibration is {}x{}",
            header.image_w, header.image_h, cam.image_w, cam.image_h
        )));
    }
    Ok(())
}

/// Build a local map from a drive log. Nothing is written on failure.
pub fn map_build(cfg: &PipelineConfig, log: &DriveLog, cam: CameraModel) -> Result<(SemanticGridMap, MapBuildReport), CliError> {
    check_calibration(&log.header, &cam)?;
    let obs: Vec<_> = log.observations().cloned().collect();
    let built = build_map(&obs, &cfg.mapping(cam))?;
    let report = MapBuildReport {
        frames: obs.len(),
        cells: built.map.cell_count(),
        bytes: 0,
        trajectory_cost: built.solution.as_ref().map_or(0.0, |s| s.final_cost),
        iterations: built.solution.as_ref().map_or(0, |s| s.iterations),
        label_mismatches: None,
    };
    Ok((built.map, report))
}

pub fn cmd_map_build(
    cfg: &PipelineConfig,
    log: &Path,
    calibration: Option<&Path>,
    out: &Path,
    world: Option<&Path>,
) -> Result<MapBuildReport, CliError> {
    let log = load_log(log)?;
    let cam = match calibration {
        Some(p) => camera_from(Some(p))?,
        None => cfg.camera()?,
    };
    let (map, mut report) = map_build(cfg, &log, cam)?;
    let bytes = encode_upload(&map)?;
    if let Some(w) = world {
        let text = fs::read_to_string(w).map_err(|e| CliError::Input(format!("{}: {e}", w.display())))?;
        let world = WorldModel::from_json(&text).map_err(|e| CliError::Input(e.to_string()))?;
        report.label_mismatches = Some(label_mismatches(&map, &world).len());
    }
    write(out, &bytes)?;
    report.bytes = bytes.len();
    Ok(report)
}

/// Session id derived from the payload, so re-uploading a file is a no-op.
pub fn default_session_id(path: &Path, payload: &[u8]) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("session");
    format!("{stem}-{:08x}-{}", crc32fast::hash(payload), payload.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UploadReport {
    pub session_id: String,
    pub version: u64,
    pub duplicate: bool,
}

pub fn cmd_upload(
    cfg: &PipelineConfig,
    map: &Path,
    server: &str,
    vehicle_id: &str,
    session_id: Option<&str>,
) -> Result<UploadReport, CliError> {
    let payload = read(map)?;
    // Validate locally so a bad file never reaches the server.
    decode_upload(&payload)?;
    let session_id = session_id.map_or_else(|| default_session_id(map, &payload), str::to_owned);
    let client = MapClient::new(server, Duration::from_secs_f64(cfg.server.timeout_s));
    let ack = client.upload(&SessionUpload {
        vehicle_id: vehicle_id.to_string(),
        session_id: session_id.clone(),
        payload,
    })?;
    Ok(UploadReport {
        session_id,
        version: ack.version,
        duplicate: ack.duplicate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FetchReport {
    pub version: u64,
    pub bytes: usize,
    pub tiles: usize,
    pub contours: usize,
}

pub fn cmd_fetch(cfg: &PipelineConfig, server: &str, region: &Region, out: &Path) -> Result<FetchReport, CliError> {
    let client = MapClient::new(server, Duration::from_secs_f64(cfg.server.timeout_s));
    let (bytes, version) = client.fetch(region)?;
    let cm = decode(&bytes)?;
    write(out, &bytes)?;
    Ok(FetchReport {
        version,
        bytes: bytes.len(),
        tiles: cm.tiles.len(),
        contours: cm.contour_count(),
    })
}

/// Load a map file in either the compressed (SMAP) or the upload (SGUP)
/// format.
pub fn load_map(path: &Path) -> Result<SemanticGridMap, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(MAP_MAGIC) {
        let cm = decode(&bytes)?;
        decompress_to_map(&cm).map_err(|e| CliError::Input(e.to_string()))
    } else if bytes.starts_with(UPLOAD_MAGIC) {
        Ok(SemanticGridMap::from_cells(&decode_upload(&bytes)?))
    } else {
        Err(CliError::Input(format!("{} is neither an SMAP nor an SGUP map", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizeReport {
    pub frames: usize,
    pub gated: usize,
    pub map_cells: usize,
}

pub fn localize(
    cfg: &PipelineConfig,
    log: &DriveLog,
    map: &SemanticGridMap,
    cam: CameraModel,
) -> Result<Vec<LocalizationRecord>, CliError> {
    check_calibration(&log.header, &cam)?;
    let obs: Vec<_> = log.observations().cloned().collect();
    Ok(localize_drive(&obs, &MapIndex::new(map), &cfg.localization(cam))?)
}

pub fn cmd_localize(
    cfg: &PipelineConfig,
    log: &Path,
    map: &Path,
    calibration: Option<&Path>,
    out: &Path,
) -> Result<LocalizeReport, CliError> {
    let log = load_log(log)?;
    let map = load_map(map)?;
    let cam = match calibration {
        Some(p) => camera_from(Some(p))?,
        None => cfg.camera()?,
    };
    let recs = localize(cfg, &log, &map, cam)?;
    let mut buf = Vec::new();
    write_localization_csv(&mut buf, &recs).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(out, &buf)?;
    Ok(LocalizeReport {
        frames: recs.len(),
        gated: recs.iter().filter(|r| r.gated).count(),
        map_cells: map.cell_count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorColumn {
    pub avg: f64,
    pub p90: f64,
    pub max: f64,
}

impl From<ErrorStats> for ErrorColumn {
    fn from(s: ErrorStats) -> Self {
        Self {
            avg: s.mean,
            p90: s.p90,
            max: s.max,
        }
    }
}

/// `summary.json`: absolute errors, x and y in meters, yaw in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub frames: usize,
    pub x_error: ErrorColumn,
    pub y_error: ErrorColumn,
    pub yaw_error_deg: ErrorColumn,
}

impl From<ErrorSummary> for EvaluationSummary {
    fn from(s: ErrorSummary) -> Self {
        Self {
            frames: s.frames,
            x_error: s.x.into(),
            y_error: s.y.into(),
            yaw_error_deg: s.yaw_deg.into(),
        }
    }
}

pub fn truth_of(log: &DriveLog) -> Vec<(f64, Pose)> {
    log.frames.iter().map(|f| (f.observation.t, f.truth)).collect()
}

/// Write `summary.json` and `errors.csv` into `out_dir`.
pub fn evaluate(records: &[LocalizationRecord], log: &DriveLog, out_dir: &Path) -> Result<EvaluationSummary, CliError> {
    let (errors, summary) = evaluate_errors(records, &truth_of(log));
    let summary = EvaluationSummary::from(summary);
    let mut csv = Vec::new();
    write_error_csv(&mut csv, &errors).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out_dir.join("errors.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out_dir.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}

pub fn cmd_evaluate(estimate: &Path, log: &Path, out_dir: &Path) -> Result<EvaluationSummary, CliError> {
    let text = fs::read_to_string(estimate).map_err(|e| CliError::Input(format!("{}: {e}", estimate.display())))?;
    let recs = read_localization_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", estimate.display())))?;
    evaluate(&recs, &load_log(log)?, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub sessions: usize,
    pub mapping_frames: usize,
    pub map_cells: usize,
    pub map_version: u64,
    pub sgup_bytes: usize,
    pub smap_bytes: usize,
    /// Merged-map cells whose label is absent from their world footprint.
    pub label_mismatches: usize,
    pub localization: EvaluationSummary,
    pub gated: usize,
}

/// Seed offset of the localization drive relative to the mapping drives.
pub const LOCALIZATION_SEED_OFFSET: u64 = 1000;
/// Process noise multiplier used by the noiseless demo.
pub const NOISELESS_PROCESS_SCALE: f64 = 0.25;

/// Whole pipeline on one generated world: `sessions` noisy mapping drives,
/// merged by an in-process server, fetched compressed, then a separate
/// drive localized against the fetched map. Artifacts go to `out_dir`.
/// With exact odometry the default process noise lets the filter chase the
/// map's quantization jitter. Tighten it unless the config set its own.
fn quiet_filter(cfg: &PipelineConfig) -> PipelineConfig {
    let mut cfg = cfg.clone();
    if cfg.filter.process == ProcessNoise::default() {
        let p = &mut cfg.filter.process;
        p.sigma_forward *= NOISELESS_PROCESS_SCALE;
        p.sigma_lateral *= NOISELESS_PROCESS_SCALE;
        p.sigma_yaw *= NOISELESS_PROCESS_SCALE;
    }
    cfg
}

pub fn run_demo(cfg: &PipelineConfig, sessions: usize, noiseless: bool, out_dir: &Path) -> Result<DemoReport, CliError> {
    let noise_for = |seed: u64| {
        if noiseless {
            NoiseSpec::none(seed)
        } else {
            NoiseSpec { seed, ..cfg.noise() }
        }
    };
    let world = cfg.world()?;
    write(&out_dir.join("world.json"), world.to_json().as_bytes())?;
    let cam = cfg.camera()?;
    let server = MapServer::in_memory();
    let mut mapping_frames = 0;
    let mut sgup_bytes = 0;
    for s in 0..sessions {
        let (header, frames) = simulate(cfg, &world, &noise_for(cfg.seed + s as u64))?;
        let log = DriveLog { header, frames };
        write(&out_dir.join(format!("session-{s}.slog")), &encode_log(&log.header, &log.frames))?;
        let (map, report) = map_build(cfg, &log, cam.clone())?;
        log::info!("session {s}: {} frames, {} cells, cost {:.3}", report.frames, report.cells, report.trajectory_cost);
        let payload = encode_upload(&map)?;
        sgup_bytes += payload.len();
        write(&out_dir.join(format!("session-{s}.sgup")), &payload)?;
        server
            .handle_upload(&SessionUpload {
                vehicle_id: format!("vehicle-{s}"),
                session_id: format!("session-{s}"),
                payload,
            })
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        mapping_frames += log.frames.len();
    }
    let merged = server.snapshot().to_map();
    let label_mismatches = label_mismatches(&merged, &world).len();
    let (smap, map_version) = server
        .handle_fetch_map(&Region::everything())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out_dir.join("map.smap"), &smap)?;
    let fetched = decompress_to_map(&decode(&smap)?).map_err(|e| CliError::Runtime(e.to_string()))?;

    let (header, frames) = simulate(cfg, &world, &noise_for(cfg.seed + LOCALIZATION_SEED_OFFSET))?;
    let log = DriveLog { header, frames };
    write(&out_dir.join("localize.slog"), &encode_log(&log.header, &log.frames))?;
    let recs = if noiseless {
        localize(&quiet_filter(cfg), &log, &fetched, cam)?
    } else {
        localize(cfg, &log, &fetched, cam)?
    };
    let mut csv = Vec::new();
    write_localization_csv(&mut csv, &recs).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out_dir.join("estimate.csv"), &csv)?;
    let localization = evaluate(&recs, &log, out_dir)?;
    Ok(DemoReport {
        sessions,
        mapping_frames,
        map_cells: merged.cell_count(),
        map_version,
        sgup_bytes,
        smap_bytes: smap.len(),
        label_mismatches,
        localization,
        gated: recs.iter().filter(|r| r.gated).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use semmap::sim::WorldTemplate;

    fn straight(noise: NoiseSpec) -> PipelineConfig {
        PipelineConfig {
            world: crate::config::WorldConfig {
                template: WorldTemplate::StraightRoad { lanes: 2, length: 100.0 },
                ..Default::default()
            },
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn simulate_counts_frames_and_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = straight(NoiseSpec {
            gnss_blocked: vec![[30.0, 60.0]],
            ..NoiseSpec::default()
        });
        let out = dir.path().join("a.slog");
        let r = cmd_simulate(&cfg, &out, None).unwrap();
        assert_eq!(r.frames, 200);
        // s_k = 0.5 k; blocked frames have 30 <= s_k <= 60.
        let blocked = (0..200).filter(|k| (30.0..=60.0).contains(&(*k as f64 * 0.5))).count();
        assert_eq!(r.gnss_frames, 200 - blocked);
        assert!((r.gnss_coverage - 0.70).abs() <= 1.0 / 200.0 + 1e-12);
        let again = dir.path().join("b.slog");
        cmd_simulate(&cfg, &again, None).unwrap();
        assert!(fs::read(&out).unwrap() == fs::read(&again).unwrap());
    }

    #[test]
    fn map_build_rejects_calibration_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = straight(NoiseSpec::none(1));
        let log = dir.path().join("a.slog");
        cmd_simulate(&cfg, &log, None).unwrap();
        let mut cam = CameraModel::simulator_default();
        cam.image_w = 800;
        cam.cx = 400.0;
        let cal = dir.path().join("cam.json");
        fs::write(&cal, cam.to_json()).unwrap();
        let out = dir.path().join("m.sgup");
        let err = cmd_map_build(&cfg, &log, Some(&cal), &out, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!out.exists());
    }

    #[test]
    fn blocked_drive_is_unobservable_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = straight(NoiseSpec {
            gnss_blocked: vec![[-1.0, 1000.0]],
            ..NoiseSpec::none(1)
        });
        let log = dir.path().join("a.slog");
        assert_eq!(cmd_simulate(&cfg, &log, None).unwrap().gnss_frames, 0);
        let out = dir.path().join("m.sgup");
        assert_eq!(cmd_map_build(&cfg, &log, None, &out, None).unwrap_err().exit_code(), 3);
        assert!(!out.exists());
    }

    #[test]
    fn empty_log_builds_an_empty_payload() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("empty.slog");
        let header = LogHeader {
            image_w: 640,
            image_h: 480,
            frame_rate: 10.0,
        };
        fs::write(&log, encode_log(&header, &[])).unwrap();
        let out = dir.path().join("m.sgup");
        let r = cmd_map_build(&PipelineConfig::default(), &log, None, &out, None).unwrap();
        assert_eq!(r.cells, 0);
        assert!(decode_upload(&fs::read(&out).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn unsupported_map_version_is_exit_five() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.smap");
        fs::write(&p, b"SMAP\x09\x00\x00\x00\x00\x00").unwrap();
        assert_eq!(load_map(&p).unwrap_err().exit_code(), 5);
        fs::write(&p, b"SGUP\x07\x00\x00\x00\x00\x00").unwrap();
        assert_eq!(load_map(&p).unwrap_err().exit_code(), 5);
        fs::write(&p, b"nope").unwrap();
        assert_eq!(load_map(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn truth_equal_estimates_evaluate_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = straight(NoiseSpec::default());
        let log_path = dir.path().join("a.slog");
        cmd_simulate(&cfg, &log_path, None).unwrap();
        let log = load_log(&log_path).unwrap();
        let recs: Vec<_> = log
            .frames
            .iter()
            .map(|f| LocalizationRecord {
                t: f.observation.t,
                x: f.truth.p.x,
                y: f.truth.p.y,
                yaw: f.truth.yaw(),
                icp_rms: 0.0,
                icp_inliers: 0,
                gated: false,
            })
            .collect();
        let est = dir.path().join("est.csv");
        let mut buf = Vec::new();
        write_localization_csv(&mut buf, &recs).unwrap();
        fs::write(&est, buf).unwrap();
        let s = cmd_evaluate(&est, &log_path, dir.path()).unwrap();
        assert_eq!(s.frames, 200);
        for c in [s.x_error, s.y_error, s.yaw_error_deg] {
            assert_eq!((c.avg, c.p90, c.max), (0.0, 0.0, 0.0));
        }
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        for k in ["x_error", "y_error", "yaw_error_deg"] {
            assert!(json[k]["avg"].is_number() && json[k]["p90"].is_number());
        }
        assert!(fs::read_to_string(dir.path().join("errors.csv")).unwrap().starts_with("t,x_error,y_error,yaw_error_deg\n"));
    }
}
