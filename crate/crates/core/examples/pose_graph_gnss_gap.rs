//! Bridge a 150 m GNSS outage with the pose graph and compare against plain
//! dead reckoning from the last fix.

use semmap::geometry::{CameraModel, RoiSpec};
use semmap::pipeline::{build_map, MappingConfig};
use semmap::posegraph::dead_reckon;
use semmap::sim::{simulate_drive, DrivePath, DriveSpec, NoiseSpec, WorldModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DriveSpec {
        path: DrivePath::new(&[[0.0, 0.0], [250.0, 0.0], [400.0, 120.0]], 20.0)?,
        speed: 5.0,
        frame_rate: 10.0,
        camera: CameraModel::simulator_default(),
        roi: RoiSpec::default(),
    };
    let noise = NoiseSpec {
        gnss_blocked: vec![[175.0, 325.0]],
        odom_scale_error: 0.01,
        seed: 11,
        ..NoiseSpec::default()
    };
    let frames = simulate_drive(&WorldModel::new(Vec::new())?, &spec, &noise)?;
    let sensors: Vec<_> = frames.iter().map(|f| f.observation.clone()).collect();
    let built = build_map(&sensors, &MappingConfig::default())?;
    let sol = built.solution.as_ref().expect("non-empty drive");
    println!(
        "{} poses, {} LM iterations, cost {:.1} -> {:.1}",
        built.poses.len(),
        sol.iterations,
        sol.initial_cost,
        sol.final_cost
    );

    let gap: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].observation.gnss.is_none()).collect();
    let (first, last) = (gap[0], *gap.last().unwrap());
    let odom: Vec<_> = frames[first..=last].iter().map(|f| f.observation.odom).collect();
    let dr = dead_reckon(&frames[first - 1].truth, &odom);
    let max_err = |est: &dyn Fn(usize) -> nalgebra::Vector3<f64>| {
        (first..=last).map(|i| (est(i) - frames[i].truth.p).norm()).fold(0.0, f64::max)
    };
    let dr_max = max_err(&|i| dr[i - first + 1].p);
    let opt_max = max_err(&|i| built.poses[i].p);
    println!("within the outage: dead reckoning max error {dr_max:.3} m, optimized {opt_max:.3} m");
    Ok(())
}
