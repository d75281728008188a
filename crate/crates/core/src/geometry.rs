//! Camera model, inverse perspective mapping and rigid transforms.
//!
//! Frame conventions used throughout the crate:
//!
//! * vehicle frame: x forward, y left, z up, origin on the ground below the
//!   rear axle;
//! * camera frame: z along the optical axis, x to the right of the image,
//!   y down the image;
//! * world frame: a local east-north-up plane.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Tolerance on quaternion norms accepted at construction.
pub const UNIT_NORM_TOL: f64 = 1e-9;

const MIN_DEPTH: f64 = 1e-6;
const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("undistortion did not converge within {UNDISTORT_MAX_ITERS} iterations")]
    NotConverged,
    #[error("ground homography is singular (camera parallel to the ground plane)")]
    DegenerateGeometry,
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("camera file: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file: {0}")]
    Json(#[from] serde_json::Error),
}

/// A 6-DoF rigid pose, world <- vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    pub fn new(p: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self { p, q }
    }

    /// Pose on the ground plane with the given heading.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            p: Vector3::new(x, y, 0.0),
            q: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.q.euler_angles().2
    }

    /// `self ⊕ delta`: apply a motion expressed in this pose's frame.
    pub fn compose(&self, delta: &Pose) -> Pose {
        let mut q = self.q * delta.q;
        q.renormalize();
        Pose {
            p: self.p + self.q * delta.p,
            q,
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose {
            p: -(qi * self.p),
            q: qi,
        }
    }

    /// Relative motion `self⁻¹ ⊕ other`, expressed in this pose's frame.
    pub fn between(&self, other: &Pose) -> Pose {
        let qi = self.q.inverse();
        let mut q = qi * other.q;
        q.renormalize();
        Pose {
            p: qi * (other.p - self.p),
            q,
        }
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.q * point + self.p
    }
}

/// Map a vehicle-frame ground point into the world frame.
pub fn transform_to_world(pose: &Pose, point_v: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(point_v)
}

/// Rectangular region of interest on the ground, in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSpec {
    pub forward_min: f64,
    pub forward_max: f64,
    pub half_width: f64,
}

impl Default for RoiSpec {
    /// 12 m deep, 8 m wide, starting at the vehicle origin.
    fn default() -> Self {
        Self {
            forward_min: 0.0,
            forward_max: 12.0,
            half_width: 4.0,
        }
    }
}

impl RoiSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.forward_min && x <= self.forward_max && y.abs() <= self.half_width
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.forward_min >= 0.0 && self.forward_max > self.forward_min && self.half_width > 0.0)
        {
            return Err(GeometryError::InvalidCamera(format!("bad ROI {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole camera with 2 radial + 2 tangential distortion terms and a rigid
/// mounting on the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `[k1, k2, p1, p2]`
    pub dist: [f64; 4],
    /// Rotation taking vehicle-frame vectors into the camera frame.
    pub r_c: UnitQuaternion<f64>,
    /// Translation of the vehicle->camera transform: `x_c = r_c * x_v + t_c`.
    pub t_c: Vector3<f64>,
    pub image_w: u32,
    pub image_h: u32,
}

/// On-disk JSON layout of a camera calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    dist: [f64; 4],
    /// `[w, x, y, z]`
    r_c: [f64; 4],
    t_c: [f64; 3],
    image_w: u32,
    image_h: u32,
}

impl CameraModel {
    /// Forward-looking camera mounted at `mount` (vehicle frame) with the
    /// optical axis pitched down by `pitch` radians.
    pub fn forward_looking(
        fx: f64,
        fy: f64,
        image_w: u32,
        image_h: u32,
        mount: Vector3<f64>,
        pitch: f64,
    ) -> Self {
        // Camera axes expressed in the vehicle frame before pitching.
        let level = Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        // Pitch down about the vehicle y axis.
        let pitch_rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch);
        let r_vc = pitch_rot.to_rotation_matrix().into_inner() * level;
        let r_cv = UnitQuaternion::from_matrix(&r_vc.transpose());
        let t_c = -(r_cv * mount);
        Self {
            fx,
            fy,
            cx: image_w as f64 / 2.0,
            cy: image_h as f64 / 2.0,
            dist: [0.0; 4],
            r_c: r_cv,
            t_c,
            image_w,
            image_h,
        }
    }

    /// Default simulator camera: 640x480, f = 400 px, 1.5 m high, 15° down.
    pub fn simulator_default() -> Self {
        Self::forward_looking(
            400.0,
            400.0,
            640,
            480,
            Vector3::new(0.0, 0.0, 1.5),
            15f64.to_radians(),
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCamera(m.to_string()));
        if (self.r_c.as_ref().norm() - 1.0).abs() > UNIT_NORM_TOL {
            return bad("r_c is not a unit quaternion");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0
            && self.cx < self.image_w as f64
            && self.cy >= 0.0
            && self.cy < self.image_h as f64)
        {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let f: CameraFile = serde_json::from_str(text)?;
        let q = Quaternion::new(f.r_c[0], f.r_c[1], f.r_c[2], f.r_c[3]);
        if (q.norm() - 1.0).abs() > UNIT_NORM_TOL {
            return Err(GeometryError::InvalidCamera(
                "r_c is not a unit quaternion".into(),
            ));
        }
        let cam = Self {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            dist: f.dist,
            r_c: UnitQuaternion::new_unchecked(q),
            t_c: Vector3::from(f.t_c),
            image_w: f.image_w,
            image_h: f.image_h,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_json(&self) -> String {
        let q = self.r_c.quaternion();
        let f = CameraFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            dist: self.dist,
            r_c: [q.w, q.i, q.j, q.k],
            t_c: [self.t_c.x, self.t_c.y, self.t_c.z],
            image_w: self.image_w,
            image_h: self.image_h,
        };
        serde_json::to_string_pretty(&f).expect("camera serializes")
    }

    pub fn in_bounds(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.u < self.image_w as f64 && px.v >= 0.0 && px.v < self.image_h as f64
    }

    fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
        (
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    /// Pixel of a camera-frame point, whether or not it lands inside the image.
    pub fn project_unbounded(&self, point_c: &Vector3<f64>) -> Result<Pixel, GeometryError> {
        if point_c.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(point_c.z));
        }
        let (xd, yd) = self.distort(point_c.x / point_c.z, point_c.y / point_c.z);
        Ok(Pixel::new(self.fx * xd + self.cx, self.fy * yd + self.cy))
    }

    /// Project a camera-frame point; `None` when it falls outside the image.
    pub fn project(&self, point_c: &Vector3<f64>) -> Result<Option<Pixel>, GeometryError> {
        let px = self.project_unbounded(point_c)?;
        Ok(self.in_bounds(&px).then_some(px))
    }

    /// Undistorted normalized image coordinates of a pixel.
    pub fn undistort(&self, px: &Pixel) -> Result<(f64, f64), GeometryError> {
        let xd = (px.u - self.cx) / self.fx;
        let yd = (px.v - self.cy) / self.fy;
        if self.dist == [0.0; 4] {
            return Ok((xd, yd));
        }
        let [k1, k2, p1, p2] = self.dist;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let r2 = x * x + y * y;
            let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            let nx = (xd - dx) / radial;
            let ny = (yd - dy) / radial;
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if !step.is_finite() {
                break;
            }
            if step < UNDISTORT_TOL {
                return Ok((x, y));
            }
        }
        Err(GeometryError::NotConverged)
    }

    /// Unit viewing ray of a pixel in the camera frame.
    pub fn unproject(&self, px: &Pixel) -> Result<Vector3<f64>, GeometryError> {
        let (x, y) = self.undistort(px)?;
        Ok(Vector3::new(x, y, 1.0).normalize())
    }

    /// Vehicle-frame point expressed in the camera frame.
    pub fn vehicle_to_camera(&self, point_v: &Vector3<f64>) -> Vector3<f64> {
        self.r_c * point_v + self.t_c
    }

    /// Camera center in the vehicle frame.
    pub fn center_in_vehicle(&self) -> Vector3<f64> {
        -(self.r_c.inverse() * self.t_c)
    }

    /// Inverse of the plane-induced homography `[r1 r2 t]` that maps the
    /// vehicle ground plane into the camera.
    pub fn ground_projector(&self) -> Result<GroundProjector, GeometryError> {
        let r = self.r_c.to_rotation_matrix().into_inner();
        let h = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), self.t_c]);
        let det = h.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(GeometryError::DegenerateGeometry);
        }
        let h_inv = h.try_inverse().ok_or(GeometryError::DegenerateGeometry)?;
        Ok(GroundProjector {
            camera: self.clone(),
            h_inv,
        })
    }
}

/// Precomputed inverse perspective mapping for one camera.
#[derive(Debug, Clone)]
pub struct GroundProjector {
    camera: CameraModel,
    h_inv: Matrix3<f64>,
}

impl GroundProjector {
    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    /// Vehicle-frame ground point seen at `px`, or `None` when the viewing
    /// ray misses the ground in front of the camera.
    pub fn ground_point(&self, px: &Pixel) -> Result<Option<Vector2<f64>>, GeometryError> {
        let (x, y) = self.camera.undistort(px)?;
        let w = self.h_inv * Vector3::new(x, y, 1.0);
        // w = λ'·[x_v, y_v, 1]; the ground point lies in front of the camera
        // only for a positive scale.
        if w.z <= 1e-12 || !w.z.is_finite() {
            return Ok(None);
        }
        Ok(Some(Vector2::new(w.x / w.z, w.y / w.z)))
    }

    /// Ground point restricted to the region of interest.
    pub fn ground_point_in_roi(
        &self,
        px: &Pixel,
        roi: &RoiSpec,
    ) -> Result<Option<Vector2<f64>>, GeometryError> {
        Ok(self
            .ground_point(px)?
            .filter(|g| roi.contains(g.x, g.y)))
    }
}

/// One-shot inverse perspective mapping of a pixel onto the vehicle ground
/// plane, limited to `roi`.
pub fn ipm_ground_point(
    cam: &CameraModel,
    roi: &RoiSpec,
    px: &Pixel,
) -> Result<Option<Vector2<f64>>, GeometryError> {
    cam.ground_projector()?.ground_point_in_roi(px, roi)
}

/// Wrap an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn simple_cam() -> CameraModel {
        CameraModel {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            dist: [0.0; 4],
            r_c: UnitQuaternion::identity(),
            t_c: Vector3::zeros(),
            image_w: 640,
            image_h: 480,
        }
    }

    /// Nadir camera 1.5 m above vehicle point (2, 0).
    fn nadir_cam() -> CameraModel {
        let r_vc = Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
        ]);
        let r_cv = UnitQuaternion::from_matrix(&r_vc.transpose());
        let center = Vector3::new(2.0, 0.0, 1.5);
        CameraModel {
            r_c: r_cv,
            t_c: -(r_cv * center),
            ..simple_cam()
        }
    }

    #[test]
    fn principal_ray_projects_to_center() {
        let px = simple_cam().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap().unwrap();
        assert_eq!((px.u, px.v), (320.0, 240.0));
        let px = simple_cam().project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        // u = 820 is outside a 640 wide image.
        assert!(px.is_none());
        let px = simple_cam()
            .project_unbounded(&Vector3::new(1.0, 0.0, 1.0))
            .unwrap();
        assert_eq!((px.u, px.v), (820.0, 240.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        assert!(matches!(
            simple_cam().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn radial_distortion_matches_polynomial() {
        let mut cam = simple_cam();
        cam.dist = [0.1, 0.0, 0.0, 0.0];
        // normalized radius 0.5 along x: x_d = 0.5 * (1 + 0.1 * 0.25)
        let px = cam
            .project_unbounded(&Vector3::new(0.5, 0.0, 1.0))
            .unwrap();
        let expected_u = 320.0 + 500.0 * 0.5 * (1.0 + 0.1 * 0.25);
        assert!((px.u - expected_u).abs() < 1e-12);
        assert!((px.v - 240.0).abs() < 1e-12);
    }

    #[test]
    fn unproject_principal_and_offset_rays() {
        let cam = simple_cam();
        let r = cam.unproject(&Pixel::new(320.0, 240.0)).unwrap();
        assert!((r - Vector3::z()).norm() < 1e-15);
        let r = cam.unproject(&Pixel::new(820.0, 240.0)).unwrap();
        let e = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert!((r - e).norm() < 1e-15);
    }

    #[test]
    fn undistortion_round_trips() {
        let mut cam = simple_cam();
        cam.dist = [0.1, -0.02, 0.001, -0.0005];
        for iu in 0..16 {
            for iv in 0..12 {
                let px = Pixel::new(iu as f64 * 40.0 + 0.5, iv as f64 * 40.0 + 0.5);
                let ray = cam.unproject(&px).unwrap();
                let back = cam.project_unbounded(&ray).unwrap();
                assert!((back.u - px.u).abs() < 1e-6 && (back.v - px.v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nadir_ipm_hits_below_camera() {
        let cam = nadir_cam();
        let roi = RoiSpec::default();
        let g = ipm_ground_point(&cam, &roi, &Pixel::new(320.0, 240.0))
            .unwrap()
            .unwrap();
        assert!((g.x - 2.0).abs() < 1e-12 && g.y.abs() < 1e-12);
        // u = 820 lies outside the image, so use the unbounded projector.
        let g = cam
            .ground_projector()
            .unwrap()
            .ground_point(&Pixel::new(820.0, 240.0))
            .unwrap()
            .unwrap();
        assert!((g.x - 2.0).abs() < 1e-9 && (g.y + 1.5).abs() < 1e-9);
    }

    #[test]
    fn horizon_pixel_is_rejected() {
        let cam = CameraModel::forward_looking(
            500.0,
            500.0,
            640,
            480,
            Vector3::new(0.0, 0.0, 1.5),
            0.0,
        );
        // Level camera: the principal row is the horizon.
        let hit = cam
            .ground_projector()
            .unwrap()
            .ground_point(&Pixel::new(320.0, 240.0))
            .unwrap();
        assert!(hit.is_none());
        // Above the horizon never meets the ground in front.
        let hit = cam
            .ground_projector()
            .unwrap()
            .ground_point(&Pixel::new(320.0, 100.0))
            .unwrap();
        assert!(hit.is_none());
    }

    #[test]
    fn camera_on_the_ground_plane_is_degenerate() {
        let cam = CameraModel::forward_looking(
            500.0,
            500.0,
            640,
            480,
            Vector3::new(0.0, 0.0, 0.0),
            0.3,
        );
        assert!(matches!(
            cam.ground_projector(),
            Err(GeometryError::DegenerateGeometry)
        ));
    }

    #[test]
    fn quarter_turn_transform() {
        let pose = Pose::new(
            Vector3::new(10.0, 0.0, 0.0),
            UnitQuaternion::from_euler_angles(0.0, 0.0, FRAC_PI_2),
        );
        let w = transform_to_world(&pose, &Vector3::new(1.0, 0.0, 0.0));
        assert!((w - Vector3::new(10.0, 1.0, 0.0)).norm() < 1e-12);
        let w = transform_to_world(&Pose::identity(), &Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(w, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = CameraModel::simulator_default();
        let back = CameraModel::from_json(&cam.to_json()).unwrap();
        assert_eq!(back.image_w, 640);
        assert!((back.r_c.angle_to(&cam.r_c)).abs() < 1e-12);
        assert!((back.t_c - cam.t_c).norm() < 1e-12);
        assert!(CameraModel::from_json(r#"{"fx": 1}"#).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
