use super::{IcpResult, LocalizerError};
use serde::{Deserialize, Serialize};
use crate::geometry::{wrap_angle, Pose};
use crate::posegraph::OdometryMeasurement;
use nalgebra::{Matrix3, Vector3};

/// 99% quantile of the chi-square distribution with 3 degrees of freedom.
pub const CHI2_GATE_3DOF_99: f64 = 11.345;

/// Planar pose estimate with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub cov: Matrix3<f64>,
}

impl EkfState {
    pub fn new(x: f64, y: f64, yaw: f64, cov: Matrix3<f64>) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            cov,
        }
    }

    pub fn from_pose(pose: &Pose, cov: Matrix3<f64>) -> Self {
        Self::new(pose.p.x, pose.p.y, pose.yaw(), cov)
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.yaw)
    }

    pub fn pose(&self) -> Pose {
        Pose::planar(self.x, self.y, self.yaw)
    }

    pub fn is_valid(&self) -> bool {
        let c = &self.cov;
        (c - c.transpose()).abs().max() <= 1e-12 && c.cholesky().is_some()
    }
}

/// Per-step motion noise in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoise {
    pub sigma_forward: f64,
    pub sigma_lateral: f64,
    pub sigma_yaw: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            sigma_forward: 0.02,
            sigma_lateral: 0.02,
            sigma_yaw: 0.002,
        }
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Dead-reckon one odometry step and propagate the covariance.
pub fn ekf_predict(state: &EkfState, odom: &OdometryMeasurement, noise: &ProcessNoise) -> EkfState {
    let (dx, dy) = (odom.dp.x, odom.dp.y);
    let dyaw = odom.dq.euler_angles().2;
    let (s, c) = state.yaw.sin_cos();
    let f = Matrix3::new(1.0, 0.0, -s * dx - c * dy, 0.0, 1.0, c * dx - s * dy, 0.0, 0.0, 1.0);
    let g = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let q = Matrix3::from_diagonal(&Vector3::new(
        noise.sigma_forward.powi(2),
        noise.sigma_lateral.powi(2),
        noise.sigma_yaw.powi(2),
    ));
    let cov = symmetrize(&(f * state.cov * f.transpose() + g * q * g.transpose()));
    EkfState {
        x: state.x + c * dx - s * dy,
        y: state.y + s * dx + c * dy,
        yaw: wrap_angle(state.yaw + dyaw),
        cov,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub state: EkfState,
    /// Normalized innovation squared.
    pub nis: f64,
    pub gated: bool,
}

/// Fuse a direct pose measurement; innovations outside the 99% gate leave
/// the state untouched.
pub fn ekf_update(state: &EkfState, meas: &IcpResult, meas_noise: &Matrix3<f64>) -> Result<UpdateOutcome, LocalizerError> {
    if !meas.converged {
        return Err(LocalizerError::UnconvergedMeasurement);
    }
    if (meas_noise - meas_noise.transpose()).abs().max() > 1e-12 || meas_noise.cholesky().is_none() {
        return Err(LocalizerError::Config("measurement covariance is not positive definite".into()));
    }
    let z = Vector3::new(meas.pose.p.x, meas.pose.p.y, meas.pose.yaw());
    let mut nu = z - state.mean();
    nu.z = wrap_angle(nu.z);
    let s = state.cov + meas_noise;
    let s_inv = s
        .cholesky()
        .ok_or_else(|| LocalizerError::Config("innovation covariance is not positive definite".into()))?
        .inverse();
    let nis = (nu.transpose() * s_inv * nu)[0];
    if nis > CHI2_GATE_3DOF_99 {
        return Ok(UpdateOutcome {
            state: *state,
            nis,
            gated: true,
        });
    }
    let k = state.cov * s_inv;
    let dx = k * nu;
    let i_k = Matrix3::identity() - k;
    let cov = symmetrize(&(i_k * state.cov * i_k.transpose() + k * meas_noise * k.transpose()));
    Ok(UpdateOutcome {
        state: EkfState {
            x: state.x + dx.x,
            y: state.y + dx.y,
            yaw: wrap_angle(state.yaw + dx.z),
            cov,
        },
        nis,
        gated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meas(x: f64, y: f64, yaw: f64) -> IcpResult {
        IcpResult {
            pose: Pose::planar(x, y, yaw),
            rms_residual: 0.0,
            inlier_count: 10,
            converged: true,
            iterations: Vec::new(),
        }
    }

    fn odom(dx: f64, dy: f64, dyaw: f64) -> OdometryMeasurement {
        OdometryMeasurement::between(&Pose::identity(), &Pose::planar(dx, dy, dyaw))
    }

    const ZERO: ProcessNoise = ProcessNoise {
        sigma_forward: 0.0,
        sigma_lateral: 0.0,
        sigma_yaw: 0.0,
    };

    #[test]
    fn zero_motion_keeps_state() {
        let s = EkfState::new(1.0, 2.0, 0.3, Matrix3::identity() * 0.01);
        let p = ekf_predict(&s, &OdometryMeasurement::identity(), &ZERO);
        assert_eq!(p.mean(), s.mean());
        assert!((p.cov - s.cov).abs().max() < 1e-15);
    }

    #[test]
    fn forward_step() {
        let s = EkfState::new(0.0, 0.0, 0.0, Matrix3::identity());
        let p = ekf_predict(&s, &odom(1.0, 0.0, 0.0), &ZERO);
        assert!((p.x - 1.0).abs() < 1e-15 && p.y.abs() < 1e-15);
    }

    #[test]
    fn matching_measurement_shrinks_covariance() {
        let s = EkfState::new(3.0, -1.0, 0.2, Matrix3::identity() * 0.04);
        let out = ekf_update(&s, &meas(3.0, -1.0, 0.2), &(Matrix3::identity() * 0.01)).unwrap();
        assert!(!out.gated);
        assert!((out.state.mean() - s.mean()).norm() < 1e-12);
        assert!(out.state.cov.trace() < s.cov.trace());
    }

    #[test]
    fn outlier_is_gated() {
        let s = EkfState::new(0.0, 0.0, 0.0, Matrix3::identity() * 0.01);
        let out = ekf_update(&s, &meas(5.0, 0.0, 0.0), &(Matrix3::identity() * 0.01)).unwrap();
        assert!(out.gated);
        assert_eq!(out.state, s);
    }

    #[test]
    fn bad_noise_and_unconverged_measurements() {
        let s = EkfState::new(0.0, 0.0, 0.0, Matrix3::identity());
        let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(ekf_update(&s, &meas(0.0, 0.0, 0.0), &bad), Err(LocalizerError::Config(_))));
        let mut m = meas(0.0, 0.0, 0.0);
        m.converged = false;
        assert_eq!(ekf_update(&s, &m, &Matrix3::identity()), Err(LocalizerError::UnconvergedMeasurement));
    }

    #[test]
    fn two_step_hand_computed() {
        // P0 = I, step forward 1 m at yaw 0 with sigmas (0.1, 0.2, 0.05):
        // F = [1 0 0; 0 1 1; 0 0 1], P1 = F F^T + Q.
        let s0 = EkfState::new(0.0, 0.0, 0.0, Matrix3::identity());
        let noise = ProcessNoise {
            sigma_forward: 0.1,
            sigma_lateral: 0.2,
            sigma_yaw: 0.05,
        };
        let s1 = ekf_predict(&s0, &odom(1.0, 0.0, 0.0), &noise);
        let p1 = Matrix3::new(1.01, 0.0, 0.0, 0.0, 2.04, 1.0, 0.0, 1.0, 1.0025);
        assert!((s1.cov - p1).abs().max() < 1e-12);
        assert_eq!(s1.mean(), Vector3::new(1.0, 0.0, 0.0));

        // Update with z = (1.2, 0.1, 0.0), R = 0.5 I.
        let r = Matrix3::identity() * 0.5;
        let out = ekf_update(&s1, &meas(1.2, 0.1, 0.0), &r).unwrap();
        // Block (y, yaw): S = [2.54 1; 1 1.5025], det = 2.81635.
        let det = 2.54 * 1.5025 - 1.0;
        let s_inv_yy = 1.5025 / det;
        let s_inv_yt = -1.0 / det;
        let s_inv_tt = 2.54 / det;
        let kx = 1.01 / 1.51;
        let k_yy = 2.04 * s_inv_yy + 1.0 * s_inv_yt;
        let k_ty = 1.0 * s_inv_yy + 1.0025 * s_inv_yt;
        let k_yt = 2.04 * s_inv_yt + 1.0 * s_inv_tt;
        let k_tt = 1.0 * s_inv_yt + 1.0025 * s_inv_tt;
        let want = Vector3::new(1.0 + kx * 0.2, k_yy * 0.1, k_ty * 0.1);
        assert!((out.state.mean() - want).abs().max() < 1e-10);
        let px = 1.01 - kx * 1.01;
        let pyy = 2.04 - (k_yy * 2.04 + k_yt * 1.0);
        let pyt = 1.0 - (k_yy * 1.0 + k_yt * 1.0025);
        let ptt = 1.0025 - (k_ty * 1.0 + k_tt * 1.0025);
        let want_p = Matrix3::new(px, 0.0, 0.0, 0.0, pyy, pyt, 0.0, pyt, ptt);
        assert!((out.state.cov - want_p).abs().max() < 1e-10);
        let nis_want = 0.04 / 1.51 + 0.01 * s_inv_yy;
        assert!((out.nis - nis_want).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn predict_matches_composition(steps in prop::collection::vec((-1.0f64..2.0, -0.3f64..0.3, -0.2f64..0.2), 1..60)) {
            let mut s = EkfState::new(0.5, -0.5, 0.1, Matrix3::identity() * 1e-4);
            let mut truth = Pose::planar(0.5, -0.5, 0.1);
            let noise = ProcessNoise::default();
            for (dx, dy, dyaw) in steps {
                let o = odom(dx, dy, dyaw);
                s = ekf_predict(&s, &o, &noise);
                truth = truth.compose(&o.as_pose());
                prop_assert!(s.is_valid());
                prop_assert!(s.yaw > -std::f64::consts::PI && s.yaw <= std::f64::consts::PI);
            }
            prop_assert!((s.x - truth.p.x).abs() < 1e-9);
            prop_assert!((s.y - truth.p.y).abs() < 1e-9);
            prop_assert!(wrap_angle(s.yaw - truth.yaw()).abs() < 1e-9);
        }

        #[test]
        fn update_never_grows_trace(dz in prop::collection::vec(-0.1f64..0.1, 3), var in 0.001f64..1.0) {
            let s = EkfState::new(0.0, 0.0, 0.0, Matrix3::new(0.04, 0.01, 0.0, 0.01, 0.05, 0.002, 0.0, 0.002, 0.001));
            let out = ekf_update(&s, &meas(dz[0], dz[1], dz[2]), &(Matrix3::identity() * var)).unwrap();
            prop_assert!(out.state.cov.trace() <= s.cov.trace() + 1e-15);
            prop_assert!(out.gated || out.state.is_valid());
        }
    }
}
