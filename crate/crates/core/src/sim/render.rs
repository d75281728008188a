use super::rng::{stream, substream};
use super::world::WorldModel;
use crate::geometry::{CameraModel, Pixel, Pose, RoiSpec};
use crate::grid::SemanticLabel;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ground sampling density of the renderer, points per square meter.
pub const RENDER_DENSITY: f64 = 50.0;

/// One segmentation-oracle output pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPixel {
    pub u: f32,
    pub v: f32,
    pub label: SemanticLabel,
}

/// Sample the ground inside `roi` around `truth`, keep points the camera
/// sees, and flip each label with probability `flip_prob`.
///
/// Sampling and flipping draw from separate per-frame streams, so frame
/// `frame` renders identically whatever else was rendered before it.
pub fn render_segmentation(
    world: &WorldModel,
    truth: &Pose,
    cam: &CameraModel,
    roi: &RoiSpec,
    flip_prob: f64,
    seed: u64,
    frame: u64,
) -> Vec<LabeledPixel> {
    let mut sample = substream(seed, stream::RENDER, frame);
    let mut flip = substream(seed, stream::LABEL_FLIP, frame);
    let area = (roi.forward_max - roi.forward_min) * 2.0 * roi.half_width;
    let n = (area * RENDER_DENSITY).round() as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample.random_range(roi.forward_min..roi.forward_max);
        let y = sample.random_range(-roi.half_width..roi.half_width);
        let pv = Vector3::new(x, y, 0.0);
        let pw = truth.transform_point(&pv);
        let Some(label) = world.label_at(pw.x, pw.y) else {
            continue;
        };
        let Ok(Some(px)) = cam.project(&cam.vehicle_to_camera(&pv)) else {
            continue;
        };
        let (u, v) = (px.u as f32, px.v as f32);
        // Rounding to f32 can push a pixel onto the far image edge.
        if !cam.in_bounds(&Pixel::new(u as f64, v as f64)) {
            continue;
        }
        out.push(LabeledPixel {
            u,
            v,
            label: flip_label(label, flip_prob, &mut flip),
        });
    }
    out
}

fn flip_label(label: SemanticLabel, p: f64, rng: &mut impl Rng) -> SemanticLabel {
    if p > 0.0 && rng.random_bool(p.min(1.0)) {
        // Uniform over the four other classes.
        let k = rng.random_range(1..SemanticLabel::ALL.len() as u8);
        SemanticLabel::from_code((label.code() + k) % SemanticLabel::ALL.len() as u8).unwrap()
    } else {
        label
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ipm_ground_point;
    use crate::sim::world::{generate_world, Feature, RoadStyle, WorldTemplate};
    use SemanticLabel::*;

    fn road() -> WorldModel {
        generate_world(&WorldTemplate::Intersection { lanes: 2, arm_length: 40.0 }, &RoadStyle::default(), 5).unwrap()
    }

    #[test]
    fn bare_road_only_yields_ground() {
        let w = WorldModel::new(vec![Feature::polygon(Ground, vec![[-50.0, -50.0], [50.0, -50.0], [50.0, 50.0], [-50.0, 50.0]])]).unwrap();
        let cam = CameraModel::simulator_default();
        let px = render_segmentation(&w, &Pose::planar(0.0, 0.0, 0.3), &cam, &RoiSpec::default(), 0.0, 1, 0);
        assert!(px.len() > 1000);
        assert!(px.iter().all(|p| p.label == Ground));
        let empty = WorldModel::new(vec![]).unwrap();
        assert!(render_segmentation(&empty, &Pose::identity(), &cam, &RoiSpec::default(), 0.0, 1, 0).is_empty());
    }

    #[test]
    fn noiseless_pixels_land_on_their_features() {
        let w = road();
        let cam = CameraModel::simulator_default();
        let roi = RoiSpec::default();
        // Spacing of a 50 pts/m² sample set.
        let reach = 0.05 + (1.0 / RENDER_DENSITY).sqrt();
        let mut markings = 0;
        for (k, pose) in [Pose::planar(-30.0, -1.75, 0.0), Pose::planar(-12.0, -1.75, 0.05), Pose::planar(1.75, -25.0, 1.5)]
            .iter()
            .enumerate()
        {
            for p in render_segmentation(&w, pose, &cam, &roi, 0.0, 2, k as u64) {
                let px = Pixel::new(p.u as f64, p.v as f64);
                let g = ipm_ground_point(&cam, &roi, &px).unwrap().expect("pixel back-projects into the ROI");
                let pw = pose.transform_point(&Vector3::new(g.x, g.y, 0.0));
                if p.label.is_marking() {
                    markings += 1;
                }
                let near = (0..16).any(|i| {
                    let a = i as f64 * std::f64::consts::TAU / 16.0;
                    let r = if i == 0 { 0.0 } else { reach };
                    w.label_at(pw.x + r * a.cos(), pw.y + r * a.sin()) == Some(p.label)
                });
                assert!(near, "{p:?} at {pw:?}");
            }
        }
        assert!(markings > 100);
    }

    #[test]
    fn full_flip_changes_every_label() {
        let w = road();
        let cam = CameraModel::simulator_default();
        let pose = Pose::planar(-12.0, -1.75, 0.0);
        let clean = render_segmentation(&w, &pose, &cam, &RoiSpec::default(), 0.0, 4, 7);
        let noisy = render_segmentation(&w, &pose, &cam, &RoiSpec::default(), 1.0, 4, 7);
        assert_eq!(clean.len(), noisy.len());
        for (a, b) in clean.iter().zip(&noisy) {
            assert_eq!((a.u, a.v), (b.u, b.v));
            assert_ne!(a.label, b.label);
        }
        let some = render_segmentation(&w, &pose, &cam, &RoiSpec::default(), 0.05, 4, 7);
        let flipped = clean.iter().zip(&some).filter(|(a, b)| a.label != b.label).count();
        let frac = flipped as f64 / clean.len() as f64;
        assert!((frac - 0.05).abs() < 0.015, "{frac}");
    }
}
