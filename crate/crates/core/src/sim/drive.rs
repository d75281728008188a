use super::render::{render_segmentation, LabeledPixel};
use super::rng::{stream, substream};
use super::world::{RoadNetwork, RoadStyle, WorldModel, WorldTemplate};
use super::SimError;
use crate::geometry::{CameraModel, Pose, RoiSpec};
use crate::posegraph::{GnssMeasurement, OdometryMeasurement};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Sensor corruption applied by [`simulate_drive`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub seg_flip_prob: f64,
    pub gnss_sigma: f64,
    /// Closed arclength intervals `[start, end]` without GNSS, in meters.
    pub gnss_blocked: Vec<[f64; 2]>,
    pub odom_p_sigma: f64,
    pub odom_yaw_sigma: f64,
    /// Multiplicative odometry distance bias (0.01 overestimates by 1%).
    pub odom_scale_error: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            seg_flip_prob: 0.05,
            gnss_sigma: 0.03,
            gnss_blocked: Vec::new(),
            odom_p_sigma: 0.02,
            odom_yaw_sigma: 0.001,
            odom_scale_error: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// Perfect sensors.
    pub fn none(seed: u64) -> Self {
        Self {
            seg_flip_prob: 0.0,
            gnss_sigma: 0.0,
            gnss_blocked: Vec::new(),
            odom_p_sigma: 0.0,
            odom_yaw_sigma: 0.0,
            odom_scale_error: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidNoise(m));
        if !(0.0..=1.0).contains(&self.seg_flip_prob) {
            return bad(format!("seg_flip_prob {} outside [0, 1]", self.seg_flip_prob));
        }
        for (name, v) in [
            ("gnss_sigma", self.gnss_sigma),
            ("odom_p_sigma", self.odom_p_sigma),
            ("odom_yaw_sigma", self.odom_yaw_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !self.odom_scale_error.is_finite() || self.odom_scale_error <= -1.0 {
            return bad(format!("odom_scale_error {} out of range", self.odom_scale_error));
        }
        if let Some(iv) = self.gnss_blocked.iter().find(|iv| !(iv[0] <= iv[1]) || !iv[0].is_finite() || !iv[1].is_finite()) {
            return bad(format!("bad blocked interval {iv:?}"));
        }
        Ok(())
    }

    pub fn is_blocked(&self, s: f64) -> bool {
        self.gnss_blocked.iter().any(|iv| s >= iv[0] && s <= iv[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Line { a: [f64; 2], u: [f64; 2], len: f64 },
    Arc { center: [f64; 2], radius: f64, start: f64, sweep: f64 },
}

impl Segment {
    fn len(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } => len,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and heading at arclength `s` into the segment.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            Segment::Line { a, u, .. } => (a[0] + s * u[0], a[1] + s * u[1], u[1].atan2(u[0])),
            Segment::Arc { center, radius, start, sweep } => {
                let dir = sweep.signum();
                let ang = start + dir * s / radius;
                (
                    center[0] + radius * ang.cos(),
                    center[1] + radius * ang.sin(),
                    ang + dir * PI / 2.0,
                )
            }
        }
    }
}

/// A planar drive path: straight legs joined by circular fillets.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivePath {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    length: f64,
    waypoints: Vec<[f64; 2]>,
}

impl DrivePath {
    /// Corners are rounded with `fillet_radius`, shrunk where a leg is too
    /// short for it. Reversals are rejected.
    pub fn new(waypoints: &[[f64; 2]], fillet_radius: f64) -> Result<Self, SimError> {
        let bad = |m: String| Err(SimError::InvalidPath(m));
        if waypoints.len() < 2 {
            return bad("a path needs at least two waypoints".into());
        }
        if waypoints.iter().flatten().any(|c| !c.is_finite()) || !(fillet_radius >= 0.0) {
            return bad("non-finite waypoint or negative fillet radius".into());
        }
        let legs: Vec<([f64; 2], f64)> = waypoints
            .windows(2)
            .map(|w| {
                let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                let l = d[0].hypot(d[1]);
                ([d[0] / l, d[1] / l], l)
            })
            .collect();
        if legs.iter().any(|(_, l)| !(*l > 1e-9)) {
            return bad("repeated waypoint".into());
        }
        // Tangent length cut from each side of every interior corner.
        let mut cut = vec![0.0; waypoints.len()];
        let mut turns = vec![0.0; waypoints.len()];
        for i in 1..waypoints.len() - 1 {
            let (u1, u2) = (legs[i - 1].0, legs[i].0);
            let turn = (u1[0] * u2[1] - u1[1] * u2[0]).atan2(u1[0] * u2[0] + u1[1] * u2[1]);
            if turn.abs() > PI - 1e-6 {
                return bad(format!("path reverses at waypoint {i}"));
            }
            turns[i] = turn;
            let half = (turn.abs() / 2.0).tan();
            let want = fillet_radius * half;
            let room = (legs[i - 1].1 / 2.0).min(legs[i].1 / 2.0);
            cut[i] = want.min(room);
        }
        let mut segments = Vec::new();
        for (i, &(u, l)) in legs.iter().enumerate() {
            let a = waypoints[i];
            let (c0, c1) = (cut[i], cut[i + 1]);
            if l - c0 - c1 > 1e-12 {
                segments.push(Segment::Line {
                    a: [a[0] + c0 * u[0], a[1] + c0 * u[1]],
                    u,
                    len: l - c0 - c1,
                });
            }
            let turn = turns[i + 1];
            if i + 1 < waypoints.len() - 1 && c1 > 0.0 && turn.abs() > 1e-12 {
                let r = c1 / (turn.abs() / 2.0).tan();
                let b = waypoints[i + 1];
                let p = [b[0] - c1 * u[0], b[1] - c1 * u[1]];
                // Center lies on the inside of the turn.
                let n = if turn > 0.0 { [-u[1], u[0]] } else { [u[1], -u[0]] };
                let center = [p[0] + r * n[0], p[1] + r * n[1]];
                let start = (p[1] - center[1]).atan2(p[0] - center[0]);
                segments.push(Segment::Arc { center, radius: r, start, sweep: turn });
            }
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut length = 0.0;
        for s in &segments {
            starts.push(length);
            length += s.len();
        }
        Ok(Self {
            segments,
            starts,
            length,
            waypoints: waypoints.to_vec(),
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    /// Planar pose at arclength `s`, clamped to the path.
    pub fn pose_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length);
        let i = self.starts.partition_point(|&x| x <= s).saturating_sub(1);
        let (x, y, h) = self.segments[i].at(s - self.starts[i]);
        Pose::planar(x, y, h)
    }
}

/// Waypoints following `route` (node ids) in the outermost right-hand lane.
pub fn lane_waypoints(net: &RoadNetwork, style: &RoadStyle, route: &[usize]) -> Result<Vec<[f64; 2]>, SimError> {
    if route.len() < 2 {
        return Err(SimError::InvalidPath("a route needs at least two nodes".into()));
    }
    for w in route.windows(2) {
        if !net.edges.iter().any(|&(a, b)| (a, b) == (w[0], w[1]) || (b, a) == (w[0], w[1])) {
            return Err(SimError::InvalidPath(format!("no road between nodes {} and {}", w[0], w[1])));
        }
    }
    let off = if net.lanes > 1 { (style.road_width(net.lanes) - style.lane_width) / 2.0 } else { 0.0 };
    let dir = |a: usize, b: usize| {
        let (p, q) = (net.nodes[a], net.nodes[b]);
        let l = (q[0] - p[0]).hypot(q[1] - p[1]);
        [(q[0] - p[0]) / l, (q[1] - p[1]) / l]
    };
    let right = |u: [f64; 2]| [u[1] * off, -u[0] * off];
    let mut out = Vec::with_capacity(route.len());
    let first = dir(route[0], route[1]);
    let p0 = net.nodes[route[0]];
    out.push([p0[0] + right(first)[0], p0[1] + right(first)[1]]);
    for k in 1..route.len() - 1 {
        let (u1, u2) = (dir(route[k - 1], route[k]), dir(route[k], route[k + 1]));
        let n = net.nodes[route[k]];
        let (r1, r2) = (right(u1), right(u2));
        let cross = u1[0] * u2[1] - u1[1] * u2[0];
        if cross.abs() < 1e-9 {
            out.push([n[0] + r1[0], n[1] + r1[1]]);
            continue;
        }
        // Intersect the two offset lines n + r1 + a·u1 and n + r2 + b·u2.
        let d = [r2[0] - r1[0], r2[1] - r1[1]];
        let a = (d[0] * u2[1] - d[1] * u2[0]) / cross;
        out.push([n[0] + r1[0] + a * u1[0], n[1] + r1[1] + a * u1[1]]);
    }
    let last = dir(route[route.len() - 2], route[route.len() - 1]);
    let pn = net.nodes[route[route.len() - 1]];
    out.push([pn[0] + right(last)[0], pn[1] + right(last)[1]]);
    Ok(out)
}

/// Node sequence covering every road of `template` at least once.
pub fn default_route(template: &WorldTemplate) -> Vec<usize> {
    match *template {
        WorldTemplate::StraightRoad { .. } => vec![0, 1],
        // West arm, through the junction, out the east arm.
        WorldTemplate::Intersection { .. } => vec![1, 0, 2],
        WorldTemplate::UrbanBlock { blocks_x, blocks_y, .. } => {
            let (nx, ny) = (blocks_x as usize + 1, blocks_y as usize + 1);
            let id = |i: usize, j: usize| j * nx + i;
            let mut r = Vec::new();
            // Serpentine along the rows, then back along the columns.
            for j in 0..ny {
                let cols: Vec<usize> = if j % 2 == 0 { (0..nx).collect() } else { (0..nx).rev().collect() };
                r.extend(cols.into_iter().map(|i| id(i, j)));
            }
            let top = ny - 1;
            let last_col = if top % 2 == 0 { nx - 1 } else { 0 };
            let order: Vec<usize> = if last_col == 0 { (0..nx).collect() } else { (0..nx).rev().collect() };
            for (k, &i) in order.iter().enumerate() {
                let down = k % 2 == 0;
                let rows: Vec<usize> = if down { (0..ny).rev().collect() } else { (0..ny).collect() };
                for j in rows {
                    let n = id(i, j);
                    if r.last() != Some(&n) {
                        r.push(n);
                    }
                }
                if let Some(&next) = order.get(k + 1) {
                    let j = if down { 0 } else { top };
                    r.push(id(next, j));
                }
            }
            r
        }
    }
}

/// Everything a vehicle's algorithms may see for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub index: u32,
    pub t: f64,
    pub pixels: Vec<LabeledPixel>,
    pub gnss: Option<GnssMeasurement>,
    /// Motion since the previous frame; identity for the first.
    pub odom: OdometryMeasurement,
}

/// A sensor frame plus its hidden ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub observation: SensorFrame,
    pub truth: Pose,
    /// Arclength along the path.
    pub s: f64,
}

/// Drive parameters besides the world and the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveSpec {
    pub path: DrivePath,
    pub speed: f64,
    pub frame_rate: f64,
    pub camera: CameraModel,
    pub roi: RoiSpec,
}

/// Drive `spec.path` at constant speed, emitting one frame every
/// `1 / frame_rate` seconds while the arclength stays below the path length.
pub fn simulate_drive(world: &WorldModel, spec: &DriveSpec, noise: &NoiseSpec) -> Result<Vec<SimFrame>, SimError> {
    noise.validate()?;
    if !(spec.speed > 0.0 && spec.speed.is_finite() && spec.frame_rate > 0.0 && spec.frame_rate.is_finite()) {
        return Err(SimError::InvalidPath("speed and frame rate must be positive".into()));
    }
    spec.camera.validate().map_err(|e| SimError::InvalidPath(e.to_string()))?;
    spec.roi.validate().map_err(|e| SimError::InvalidPath(e.to_string()))?;
    if let Some(b) = world.bounds() {
        let m = 1.0;
        if let Some(w) = spec
            .path
            .waypoints()
            .iter()
            .find(|w| w[0] < b[0] - m || w[0] > b[2] + m || w[1] < b[1] - m || w[1] > b[3] + m)
        {
            return Err(SimError::InvalidPath(format!("waypoint {w:?} outside the world")));
        }
    }
    let step = spec.speed / spec.frame_rate;
    let count = (spec.path.length() / step).ceil() as usize;
    let mut frames = Vec::with_capacity(count);
    let mut prev: Option<Pose> = None;
    for k in 0..count {
        let s = k as f64 * step;
        if s >= spec.path.length() {
            break;
        }
        let truth = spec.path.pose_at(s);
        let odom = match &prev {
            None => OdometryMeasurement::identity(),
            Some(p) => corrupt_odometry(&OdometryMeasurement::between(p, &truth), noise, k as u64),
        };
        let gnss = (!noise.is_blocked(s)).then(|| {
            let mut rng = substream(noise.seed, stream::GNSS, k as u64);
            let e = Vector3::from_fn(|_, _| noise.gnss_sigma * rng.sample::<f64, _>(StandardNormal));
            GnssMeasurement { p: truth.p + e }
        });
        let pixels = render_segmentation(world, &truth, &spec.camera, &spec.roi, noise.seg_flip_prob, noise.seed, k as u64);
        frames.push(SimFrame {
            observation: SensorFrame {
                index: k as u32,
                t: k as f64 / spec.frame_rate,
                pixels,
                gnss,
                odom,
            },
            truth,
            s,
        });
        prev = Some(truth);
    }
    Ok(frames)
}

fn corrupt_odometry(exact: &OdometryMeasurement, noise: &NoiseSpec, k: u64) -> OdometryMeasurement {
    let mut rng = substream(noise.seed, stream::ODOMETRY, k);
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let (ex, ey, eyaw) = (n(), n(), n());
    let dp = exact.dp * (1.0 + noise.odom_scale_error) + Vector3::new(ex, ey, 0.0) * noise.odom_p_sigma;
    let dq = exact.dq * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), eyaw * noise.odom_yaw_sigma);
    OdometryMeasurement { dp, dq }
}
