//! Map a road with one vehicle, then localize a second drive against the
//! compressed map with ICP and the EKF.

use semmap::codec::{compress, decode, decompress_to_map, encode, Region};
use semmap::geometry::{CameraModel, RoiSpec};
use semmap::localizer::{evaluate_errors, MapIndex};
use semmap::pipeline::{build_map, localize_drive, LocalizationSetup, MappingConfig};
use semmap::sim::{
    default_route, generate_world, lane_waypoints, simulate_drive, DrivePath, DriveSpec, NoiseSpec, RoadStyle,
    SimFrame, WorldModel, WorldTemplate,
};

fn drive(world: &WorldModel, template: &WorldTemplate, seed: u64) -> Result<Vec<SimFrame>, Box<dyn std::error::Error>> {
    let style = RoadStyle::default();
    let wp = lane_waypoints(&template.network()?, &style, &default_route(template))?;
    let spec = DriveSpec {
        path: DrivePath::new(&wp, 8.0)?,
        speed: 8.0,
        frame_rate: 10.0,
        camera: CameraModel::simulator_default(),
        roi: RoiSpec::default(),
    };
    Ok(simulate_drive(world, &spec, &NoiseSpec { seed, ..NoiseSpec::default() })?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let template = WorldTemplate::Intersection { lanes: 2, arm_length: 80.0 };
    let world = generate_world(&template, &RoadStyle::default(), 8)?;

    let mapping = drive(&world, &template, 8)?;
    let sensors: Vec<_> = mapping.iter().map(|f| f.observation.clone()).collect();
    let built = build_map(&sensors, &MappingConfig::default())?;
    let smap = encode(&compress(&built.map, &Region::everything()))?;
    let map = decompress_to_map(&decode(&smap)?)?;
    println!("map: {} cells, {} B compressed", map.cell_count(), smap.len());

    let run = drive(&world, &template, 9)?;
    let sensors: Vec<_> = run.iter().map(|f| f.observation.clone()).collect();
    let records = localize_drive(&sensors, &MapIndex::new(&map), &LocalizationSetup::default())?;
    let gated = records.iter().filter(|r| r.gated).count();
    let truth: Vec<_> = run.iter().map(|f| (f.observation.t, f.truth)).collect();
    let (_, s) = evaluate_errors(&records, &truth);
    println!("{} frames ({gated} ICP results rejected)", s.frames);
    println!("|x|   mean {:.3} m  p90 {:.3} m", s.x.mean, s.x.p90);
    println!("|y|   mean {:.3} m  p90 {:.3} m", s.y.mean, s.y.p90);
    println!("|yaw| mean {:.3} deg p90 {:.3} deg", s.yaw_deg.mean, s.yaw_deg.p90);
    Ok(())
}
