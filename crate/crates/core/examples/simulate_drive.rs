//! Generate an intersection, drive through it and summarize what the
//! sensors report.

use semmap::geometry::{CameraModel, RoiSpec};
use semmap::sim::{
    default_route, encode_log, generate_world, lane_waypoints, simulate_drive, DrivePath, DriveSpec, LogHeader, NoiseSpec,
    RoadStyle, WorldTemplate,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let template = WorldTemplate::Intersection { lanes: 2, arm_length: 60.0 };
    let style = RoadStyle::default();
    let world = generate_world(&template, &style, 1)?;
    let waypoints = lane_waypoints(&template.network()?, &style, &default_route(&template))?;
    let spec = DriveSpec {
        path: DrivePath::new(&waypoints, 8.0)?,
        speed: 6.0,
        frame_rate: 10.0,
        camera: CameraModel::simulator_default(),
        roi: RoiSpec::default(),
    };
    let noise = NoiseSpec {
        gnss_blocked: vec![[40.0, 70.0]],
        seed: 1,
        ..NoiseSpec::default()
    };
    let frames = simulate_drive(&world, &spec, &noise)?;

    let pixels: usize = frames.iter().map(|f| f.observation.pixels.len()).sum();
    let fixes = frames.iter().filter(|f| f.observation.gnss.is_some()).count();
    println!("{} features, path {:.1} m", world.features().len(), spec.path.length());
    println!("{} frames, {fixes} with GNSS, {:.0} labeled pixels per frame", frames.len(), pixels as f64 / frames.len() as f64);
    let header = LogHeader {
        image_w: spec.camera.image_w,
        image_h: spec.camera.image_h,
        frame_rate: spec.frame_rate,
    };
    let log = encode_log(&header, &frames);
    println!("drive log: {} bytes", log.len());
    Ok(())
}
