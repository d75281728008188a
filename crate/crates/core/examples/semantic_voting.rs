//! Build a local semantic map from one noisy drive and check the voted
//! labels against the world geometry.

use semmap::geometry::{CameraModel, RoiSpec};
use semmap::grid::SemanticLabel;
use semmap::pipeline::{build_map, label_mismatches, MappingConfig};
use semmap::sim::{
    default_route, generate_world, lane_waypoints, simulate_drive, DrivePath, DriveSpec, NoiseSpec, RoadStyle,
    WorldTemplate,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let template = WorldTemplate::Intersection { lanes: 2, arm_length: 50.0 };
    let style = RoadStyle::default();
    let world = generate_world(&template, &style, 3)?;
    let wp = lane_waypoints(&template.network()?, &style, &default_route(&template))?;
    let spec = DriveSpec {
        path: DrivePath::new(&wp, 8.0)?,
        speed: 5.0,
        frame_rate: 10.0,
        camera: CameraModel::simulator_default(),
        roi: RoiSpec::default(),
    };
    let frames = simulate_drive(&world, &spec, &NoiseSpec { seed: 3, ..NoiseSpec::default() })?;
    let sensors: Vec<_> = frames.iter().map(|f| f.observation.clone()).collect();
    let built = build_map(&sensors, &MappingConfig::default())?;

    let by_label = built.map.labeled_cells();
    for label in SemanticLabel::ALL {
        println!("{:>12}: {} cells", label.name(), by_label.get(&label).map_or(0, Vec::len));
    }
    let bad = label_mismatches(&built.map, &world);
    println!(
        "{} of {} cells carry a label absent from their footprint (5% of pixels are mislabeled)",
        bad.len(),
        built.map.cell_count()
    );
    Ok(())
}
