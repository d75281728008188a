use super::{LocalizerError, MapIndex};
use serde::{Deserialize, Serialize};
use crate::geometry::{wrap_angle, Pose};
use crate::grid::{axis_center, axis_index, FeatureScan, CELL_SIZE};
use nalgebra::{UnitQuaternion, Vector3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    /// Correspondence gate on the first iteration, meters.
    pub initial_radius: f64,
    /// Gate multiplier applied after every iteration.
    pub radius_decay: f64,
    pub min_radius: f64,
    pub max_iterations: usize,
    /// Stop once an update moves the pose less than this, meters.
    pub translation_tolerance: f64,
    /// Stop once an update turns the pose less than this, radians.
    pub rotation_tolerance: f64,
    /// Fraction of scan points that must find a correspondence.
    pub min_inlier_fraction: f64,
    /// Largest multiple of a closed-form step tried by the line search.
    pub max_extrapolation: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            initial_radius: 0.5,
            radius_decay: 0.7,
            min_radius: 0.15,
            max_iterations: 60,
            translation_tolerance: 1e-4,
            rotation_tolerance: 1e-5,
            min_inlier_fraction: 0.3,
            max_extrapolation: 16.0,
        }
    }
}

/// One alignment step. `cost_before` and `cost_after` are the squared
/// residual sums over the step's fixed correspondences; `objective` is the
/// gated sum over every scan point at the start of the step, charging
/// `radius²` for unmatched points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpIteration {
    pub radius: f64,
    pub correspondences: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    pub objective: f64,
    /// Step multiplier accepted after the closed-form update.
    pub extrapolation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    pub rms_residual: f64,
    pub inlier_count: usize,
    pub converged: bool,
    pub iterations: Vec<IcpIteration>,
}

#[derive(Clone, Copy)]
struct Planar {
    x: f64,
    y: f64,
    yaw: f64,
}

impl Planar {
    fn apply(&self, sx: f64, sy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * sx - s * sy + self.x, s * sx + c * sy + self.y)
    }
}

struct Pair {
    s: (f64, f64),
    m: (f64, f64),
}

fn cost(pose: &Planar, pairs: &[Pair]) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let (x, y) = pose.apply(p.s.0, p.s.1);
            (x - p.m.0).powi(2) + (y - p.m.1).powi(2)
        })
        .sum()
}

/// Least-squares rigid motion taking the scan points onto their matches.
fn align(pairs: &[Pair]) -> Planar {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        sx += p.s.0;
        sy += p.s.1;
        mx += p.m.0;
        my += p.m.1;
    }
    let (sx, sy, mx, my) = (sx / n, sy / n, mx / n, my / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for p in pairs {
        let (ax, ay) = (p.s.0 - sx, p.s.1 - sy);
        let (bx, by) = (p.m.0 - mx, p.m.1 - my);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let yaw = cross.atan2(dot);
    let (s, c) = yaw.sin_cos();
    Planar {
        x: mx - (c * sx - s * sy),
        y: my - (s * sx + c * sy),
        yaw,
    }
}

/// Register `scan` to `map` starting from `initial`, estimating x, y and
/// yaw. Ground points are ignored. The result keeps the initial height.
pub fn icp_localize(
    scan: &FeatureScan,
    map: &MapIndex,
    initial: &Pose,
    config: &IcpConfig,
) -> Result<IcpResult, LocalizerError> {
    let pts: Vec<_> = scan.points.iter().filter(|p| p.label.is_marking()).collect();
    if pts.is_empty() {
        return Err(LocalizerError::EmptyScan);
    }
    // Work relative to the cell holding the initial pose. Matches come back
    // as integer offsets from it, so a map shifted by whole cells yields the
    // same arithmetic.
    let (ax, ay) = (axis_index(initial.p.x), axis_index(initial.p.y));
    let (ox, oy) = (ax as f64 * CELL_SIZE, ay as f64 * CELL_SIZE);
    // The offset is rounded to a nanometer: extrapolated steps amplify
    // last-bit differences between such shifted starts.
    let snap = |v: f64| (v * 1e9).round() / 1e9;
    let mut pose = Planar {
        x: snap(initial.p.x - ox),
        y: snap(initial.p.y - oy),
        yaw: initial.yaw(),
    };
    let mut radius = config.initial_radius;
    let mut iterations = Vec::new();
    let mut tolerance_met = false;
    let mut pairs = Vec::with_capacity(pts.len());

    let associate = |pose: &Planar, radius: f64, pairs: &mut Vec<Pair>| {
        pairs.clear();
        let mut objective = 0.0;
        for p in &pts {
            let (lx, ly) = pose.apply(p.x, p.y);
            match map.nearest(lx + ox, ly + oy, p.label, radius) {
                Some(c) => {
                    let m = (axis_center(c.index.ix - ax), axis_center(c.index.iy - ay));
                    objective += (lx - m.0).powi(2) + (ly - m.1).powi(2);
                    pairs.push(Pair { s: (p.x, p.y), m });
                }
                None => objective += radius * radius,
            }
        }
        objective
    };
    let mut scratch = Vec::with_capacity(pts.len());

    for k in 0..config.max_iterations {
        let objective = associate(&pose, radius, &mut pairs);
        if pairs.is_empty() {
            if k == 0 {
                return Err(LocalizerError::NoOverlap);
            }
            break;
        }
        let mut next = align(&pairs);
        let cost_before = cost(&pose, &pairs);
        let cost_after = cost(&next, &pairs);

        // Point-to-point steps creep along weakly constrained directions;
        // stretch the step while the gated objective keeps falling.
        let step = (next.x - pose.x, next.y - pose.y, wrap_angle(next.yaw - pose.yaw));
        let mut accepted = 1.0;
        let mut best = associate(&next, radius, &mut scratch);
        let mut alpha = 2.0;
        while alpha <= config.max_extrapolation {
            let cand = Planar {
                x: pose.x + alpha * step.0,
                y: pose.y + alpha * step.1,
                yaw: pose.yaw + alpha * step.2,
            };
            let f = associate(&cand, radius, &mut scratch);
            if f >= best {
                break;
            }
            best = f;
            accepted = alpha;
            next = cand;
            alpha *= 2.0;
        }
        iterations.push(IcpIteration {
            radius,
            correspondences: pairs.len(),
            cost_before,
            cost_after,
            objective,
            extrapolation: accepted,
        });
        let dt = ((next.x - pose.x).powi(2) + (next.y - pose.y).powi(2)).sqrt();
        let dr = wrap_angle(next.yaw - pose.yaw).abs();
        pose = next;
        if dt < config.translation_tolerance && dr < config.rotation_tolerance && radius <= config.min_radius {
            tolerance_met = true;
            break;
        }
        radius = (radius * config.radius_decay).max(config.min_radius);
    }

    associate(&pose, radius, &mut pairs);
    let inliers = pairs.len();
    let rms = if inliers > 0 {
        (cost(&pose, &pairs) / inliers as f64).sqrt()
    } else {
        0.0
    };
    let fraction = inliers as f64 / pts.len() as f64;
    Ok(IcpResult {
        pose: Pose::new(
            Vector3::new(pose.x + ox, pose.y + oy, initial.p.z),
            UnitQuaternion::from_euler_angles(0.0, 0.0, wrap_angle(pose.yaw)),
        ),
        rms_residual: rms,
        inlier_count: inliers,
        converged: tolerance_met && fraction >= config.min_inlier_fraction,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridIndex, LabeledPoint, ScanPoint, SemanticGridMap, SemanticLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// An L-shaped pair of marking strips plus a block, so every planar
    /// direction is constrained.
    fn corner_map() -> SemanticGridMap {
        let mut m = SemanticGridMap::new();
        for i in 0..120 {
            for w in 0..2 {
                m.vote(GridIndex::new(i, 20 + w, 0), SemanticLabel::LaneLine);
                m.vote(GridIndex::new(i, -20 - w, 0), SemanticLabel::LaneLine);
            }
        }
        for j in -18..18 {
            for w in 0..4 {
                m.vote(GridIndex::new(80 + w, j, 0), SemanticLabel::StopLine);
            }
        }
        for i in 30..40 {
            for j in 5..12 {
                m.vote(GridIndex::new(i, j, 0), SemanticLabel::GroundSign);
            }
        }
        m
    }

    fn scan_from_cells(map: &SemanticGridMap, truth: &Pose) -> FeatureScan {
        let inv = truth.inverse();
        let points = map
            .iter()
            .map(|(idx, s)| {
                let v = inv.transform_point(&idx.center());
                ScanPoint {
                    x: v.x,
                    y: v.y,
                    label: s.label().unwrap(),
                }
            })
            .collect();
        FeatureScan { timestamp: 0.0, points }
    }

    #[test]
    fn fixed_point_at_truth() {
        let m = corner_map();
        let idx = MapIndex::new(&m);
        let truth = Pose::identity();
        let scan = scan_from_cells(&m, &truth);
        let r = icp_localize(&scan, &idx, &truth, &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.rms_residual < 1e-12);
        assert!(r.pose.p.norm() < 1e-12 && r.pose.yaw().abs() < 1e-12);
        assert_eq!(r.inlier_count, scan.points.len());
    }

    /// Rectangles (x0, y0, x1, y1, label) forming a small junction.
    const FEATURES: [(f64, f64, f64, f64, SemanticLabel); 6] = [
        (0.0, 1.9, 12.0, 2.05, SemanticLabel::LaneLine),
        (0.0, -2.05, 3.0, -1.9, SemanticLabel::LaneLine),
        (6.0, -2.05, 9.0, -1.9, SemanticLabel::LaneLine),
        (8.0, -1.8, 8.4, 1.8, SemanticLabel::StopLine),
        (3.0, 0.5, 4.0, 1.2, SemanticLabel::GroundSign),
        (9.0, -1.5, 11.5, -1.0, SemanticLabel::Crosswalk),
    ];

    fn sample_features(rng: &mut ChaCha8Rng, density: f64) -> Vec<(f64, f64, SemanticLabel)> {
        let mut out = Vec::new();
        for (x0, y0, x1, y1, l) in FEATURES {
            let n = ((x1 - x0) * (y1 - y0) * density).round() as usize;
            for _ in 0..n {
                out.push((rng.random_range(x0..x1), rng.random_range(y0..y1), l));
            }
        }
        out
    }

    fn sampled_scene(seed: u64, truth: &Pose) -> (SemanticGridMap, FeatureScan) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SemanticGridMap::new();
        for (x, y, l) in sample_features(&mut rng, 400.0) {
            m.insert_point(&LabeledPoint::new(x, y, 0.0, l));
        }
        let inv = truth.inverse();
        let points = sample_features(&mut rng, 50.0)
            .into_iter()
            .map(|(x, y, label)| {
                let v = inv.transform_point(&Vector3::new(x, y, 0.0));
                ScanPoint { x: v.x, y: v.y, label }
            })
            .collect();
        (m, FeatureScan { timestamp: 0.0, points })
    }

    #[test]
    fn recovers_offset() {
        let truth = Pose::planar(1.0, 0.05, 0.01);
        let (m, scan) = sampled_scene(1, &truth);
        let idx = MapIndex::new(&m);
        let init = Pose::planar(1.3, -0.15, 0.01 + 2f64.to_radians());
        let r = icp_localize(&scan, &idx, &init, &IcpConfig::default()).unwrap();
        assert!(r.converged, "{:?}", r.pose);
        assert!((r.pose.p - truth.p).norm() < 0.02, "{:?}", r.pose.p);
        assert!(wrap_angle(r.pose.yaw() - truth.yaw()).abs() < 0.1f64.to_radians());
        for it in &r.iterations {
            assert!(it.cost_after <= it.cost_before + 1e-9);
        }
        for w in r.iterations.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-9);
        }
    }

    #[test]
    fn errors_on_empty_and_disjoint() {
        let m = corner_map();
        let idx = MapIndex::new(&m);
        let empty = FeatureScan::default();
        assert_eq!(icp_localize(&empty, &idx, &Pose::identity(), &IcpConfig::default()), Err(LocalizerError::EmptyScan));
        let scan = scan_from_cells(&m, &Pose::identity());
        let far = Pose::planar(500.0, 0.0, 0.0);
        assert_eq!(icp_localize(&scan, &idx, &far, &IcpConfig::default()), Err(LocalizerError::NoOverlap));
    }

    #[test]
    fn translation_equivariance() {
        let m = corner_map();
        let truth = Pose::planar(0.5, 0.1, 0.01);
        let scan = scan_from_cells(&m, &truth);
        let init = Pose::planar(0.7, 0.0, 0.0);
        let a = icp_localize(&scan, &MapIndex::new(&m), &init, &IcpConfig::default()).unwrap();
        let (kx, ky) = (370i64, -1250i64);
        let mut shifted = SemanticGridMap::new();
        for (idx, s) in m.iter() {
            shifted.add_cell(GridIndex::new(idx.ix + kx, idx.iy + ky, idx.iz), s);
        }
        let (dx, dy) = (kx as f64 * 0.1, ky as f64 * 0.1);
        let init2 = Pose::planar(init.p.x + dx, init.p.y + dy, 0.0);
        let b = icp_localize(&scan, &MapIndex::new(&shifted), &init2, &IcpConfig::default()).unwrap();
        assert!((b.pose.p.x - a.pose.p.x - dx).abs() < 1e-9);
        assert!((b.pose.p.y - a.pose.p.y - dy).abs() < 1e-9);
        assert!((b.pose.yaw() - a.pose.yaw()).abs() < 1e-9);
        assert_eq!(a.inlier_count, b.inlier_count);
    }
}
