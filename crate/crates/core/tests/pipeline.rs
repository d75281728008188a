use semmap::codec::{compress, decode, decompress_to_map, encode, Region};
use semmap::geometry::{CameraModel, RoiSpec};
use semmap::grid::{decode_upload, encode_upload, SemanticLabel};
use semmap::localizer::{evaluate_errors, MapIndex};
use semmap::pipeline::{build_map, label_mismatches, localize_drive, LocalizationSetup, MappingConfig};
use semmap::sim::{
    default_route, generate_world, lane_waypoints, simulate_drive, DrivePath, DriveSpec, NoiseSpec, RoadStyle, SensorFrame,
    SimFrame, WorldModel, WorldTemplate,
};

fn drive(world: &WorldModel, template: &WorldTemplate, noise: &NoiseSpec) -> Vec<SimFrame> {
    let style = RoadStyle::default();
    let wp = lane_waypoints(&template.network().unwrap(), &style, &default_route(template)).unwrap();
    let spec = DriveSpec {
        path: DrivePath::new(&wp, 8.0).unwrap(),
        speed: 8.0,
        frame_rate: 10.0,
        camera: CameraModel::simulator_default(),
        roi: RoiSpec::default(),
    };
    simulate_drive(world, &spec, noise).unwrap()
}

fn sensors(frames: &[SimFrame]) -> Vec<SensorFrame> {
    frames.iter().map(|f| f.observation.clone()).collect()
}

#[test]
fn noiseless_map_compresses_and_localizes() {
    let template = WorldTemplate::StraightRoad { lanes: 2, length: 80.0 };
    let world = generate_world(&template, &RoadStyle::default(), 4).unwrap();
    let frames = drive(&world, &template, &NoiseSpec::none(4));

    let built = build_map(&sensors(&frames), &MappingConfig::default()).unwrap();
    assert!(built.map.cell_count() > 1000);
    assert!(label_mismatches(&built.map, &world).is_empty());
    assert_eq!(decode_upload(&encode_upload(&built.map).unwrap()).unwrap(), built.map.occupied_cells());

    let smap = encode(&compress(&built.map, &Region::everything())).unwrap();
    let received = decompress_to_map(&decode(&smap).unwrap()).unwrap();
    let lane_cells = received.iter().filter(|(_, s)| s.label() == Ok(SemanticLabel::LaneLine)).count();
    assert!(lane_cells > 500, "{lane_cells}");

    let second = drive(&world, &template, &NoiseSpec::none(5));
    let recs = localize_drive(&sensors(&second), &MapIndex::new(&received), &LocalizationSetup::default()).unwrap();
    let truth: Vec<_> = second.iter().map(|f| (f.observation.t, f.truth)).collect();
    let (errors, summary) = evaluate_errors(&recs, &truth);
    assert!(errors.len() + 5 >= second.len());
    let worst = errors.iter().map(|e| e.x.hypot(e.y)).fold(0.0, f64::max);
    assert!(worst < 0.1, "worst {worst}, {summary:?}");
}

#[test]
fn mapping_without_gnss_is_unobservable() {
    let template = WorldTemplate::StraightRoad { lanes: 1, length: 40.0 };
    let world = generate_world(&template, &RoadStyle::default(), 1).unwrap();
    let noise = NoiseSpec {
        gnss_blocked: vec![[-1.0, 1e6]],
        ..NoiseSpec::none(1)
    };
    let frames = drive(&world, &template, &noise);
    assert!(build_map(&sensors(&frames), &MappingConfig::default()).is_err());
}
