//! Project ground points into the simulator camera and map the pixels back
//! onto the road plane.

use nalgebra::Vector3;
use semmap::geometry::{ipm_ground_point, CameraModel, RoiSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cam = CameraModel::simulator_default();
    let roi = RoiSpec::default();
    println!("camera {}x{}, ROI {:?}", cam.image_w, cam.image_h, roi);
    for (x, y) in [(2.0, 0.0), (5.0, -1.75), (8.0, 3.5), (11.5, -3.9)] {
        let px = cam.project(&cam.vehicle_to_camera(&Vector3::new(x, y, 0.0)))?.ok_or("point not visible")?;
        let back = ipm_ground_point(&cam, &roi, &px)?.ok_or("pixel outside the ROI")?;
        println!(
            "ground ({x:5.2}, {y:5.2}) -> pixel ({:7.2}, {:7.2}) -> ground ({:5.2}, {:5.2})",
            px.u, px.v, back.x, back.y
        );
    }
    Ok(())
}
