//! GNSS + odometry pose-graph smoothing.
//!
//! The graph is a chain: one odometry factor between every pair of
//! consecutive states and a position-only GNSS factor on the states that
//! received a fix. A weak level factor per state holds roll and pitch near
//! zero, standing in for the gravity reference of fused odometry. Each pose is updated on the manifold with a 6-vector
//! `[δp, δθ]`: `p ← p + δp`, `q ← q ⊗ Exp(δθ)`. The normal equations of a
//! chain are block tridiagonal, so every Levenberg–Marquardt step is a block
//! Cholesky sweep that is linear in the number of states.

use serde::{Deserialize, Serialize};
use crate::geometry::Pose;
use nalgebra::{Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseGraphError {
    #[error("no GNSS factors: the trajectory's global position is unobservable")]
    UnobservableGauge,
    #[error("cost became non-finite at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Relative motion between two consecutive states, in the earlier state's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryMeasurement {
    pub dp: Vector3<f64>,
    pub dq: UnitQuaternion<f64>,
}

impl OdometryMeasurement {
    pub fn identity() -> Self {
        Self {
            dp: Vector3::zeros(),
            dq: UnitQuaternion::identity(),
        }
    }

    /// The exact motion taking `from` to `to`.
    pub fn between(from: &Pose, to: &Pose) -> Self {
        let d = from.between(to);
        Self { dp: d.p, dq: d.q }
    }

    pub fn as_pose(&self) -> Pose {
        Pose::new(self.dp, self.dq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssMeasurement {
    pub p: Vector3<f64>,
}

/// Standard deviations whitening the two factor types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorWeights {
    pub sigma_odom_p: f64,
    pub sigma_odom_q: f64,
    pub sigma_gnss: f64,
    /// Roll and pitch against gravity, radians per node. Straight drives
    /// leave roll unobservable from positions alone; `f64::INFINITY` drops
    /// the term.
    pub sigma_level: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self {
            sigma_odom_p: 0.02,
            sigma_odom_q: 0.001,
            sigma_gnss: 0.03,
            sigma_level: 0.01,
        }
    }
}

impl FactorWeights {
    pub fn unit() -> Self {
        Self {
            sigma_odom_p: 1.0,
            sigma_odom_q: 1.0,
            sigma_gnss: 1.0,
            sigma_level: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseGraphProblem {
    pub nodes: Vec<Pose>,
    pub odom_factors: Vec<OdometryMeasurement>,
    pub gnss_factors: BTreeMap<usize, GnssMeasurement>,
    pub weights: FactorWeights,
}

impl PoseGraphProblem {
    pub fn new(
        nodes: Vec<Pose>,
        odom_factors: Vec<OdometryMeasurement>,
        gnss_factors: BTreeMap<usize, GnssMeasurement>,
        weights: FactorWeights,
    ) -> Result<Self, PoseGraphError> {
        let p = Self {
            nodes,
            odom_factors,
            gnss_factors,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PoseGraphError> {
        let bad = |m: String| Err(PoseGraphError::InvalidProblem(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        if self.odom_factors.len() + 1 != self.nodes.len() {
            return bad(format!(
                "{} odometry factors for {} nodes",
                self.odom_factors.len(),
                self.nodes.len()
            ));
        }
        if let Some((&i, _)) = self.gnss_factors.iter().next_back() {
            if i >= self.nodes.len() {
                return bad(format!("GNSS factor on node {i} out of range"));
            }
        }
        let w = &self.weights;
        if !(w.sigma_odom_p > 0.0 && w.sigma_odom_q > 0.0 && w.sigma_gnss > 0.0 && w.sigma_level > 0.0) {
            return bad("factor sigmas must be positive".into());
        }
        Ok(())
    }

    /// Weighted squared residual sum at `states`.
    pub fn cost(&self, states: &[Pose]) -> f64 {
        let w = &self.weights;
        let mut c = 0.0;
        for (i, m) in self.odom_factors.iter().enumerate() {
            let r = odometry_residual(&states[i], &states[i + 1], m);
            c += (r.fixed_rows::<3>(0) / w.sigma_odom_p).norm_squared()
                + (r.fixed_rows::<3>(3) / w.sigma_odom_q).norm_squared();
        }
        for (&i, m) in &self.gnss_factors {
            c += (gnss_residual(&states[i], m) / w.sigma_gnss).norm_squared();
        }
        if w.sigma_level.is_finite() {
            c += states.iter().map(|s| level_residual(s).norm_squared()).sum::<f64>() / (w.sigma_level * w.sigma_level);
        }
        c
    }
}

/// `[R(q_prev)⁻¹(p_cur − p_prev) − δp̂ ; vec(q_cur⁻¹ ⊗ q_prev ⊗ δq̂)]`
pub fn odometry_residual(prev: &Pose, cur: &Pose, m: &OdometryMeasurement) -> Vector6<f64> {
    let t = prev.q.inverse() * (cur.p - prev.p) - m.dp;
    let e = cur.q.inverse() * prev.q * m.dq;
    let v = e.quaternion().imag();
    Vector6::new(t.x, t.y, t.z, v.x, v.y, v.z)
}

pub fn gnss_residual(s: &Pose, m: &GnssMeasurement) -> Vector3<f64> {
    s.p - m.p
}

/// Horizontal components of gravity's direction in the body frame: roughly
/// `(-pitch, roll)` for small angles, zero for a level vehicle.
pub fn level_residual(s: &Pose) -> Vector2<f64> {
    let g = s.q.inverse() * Vector3::z();
    Vector2::new(g.x, g.y)
}

/// Jacobian of [`level_residual`] with respect to the `[δp, δθ]` perturbation.
pub fn level_jacobian(s: &Pose) -> SMatrix<f64, 2, 6> {
    let g = s.q.inverse() * Vector3::z();
    let gx = g.cross_matrix();
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&gx.fixed_rows::<2>(0));
    j
}

/// Jacobians of [`odometry_residual`] with respect to the `[δp, δθ]`
/// perturbations of the previous and current state.
pub fn odometry_jacobians(
    prev: &Pose,
    cur: &Pose,
    m: &OdometryMeasurement,
) -> (Matrix6<f64>, Matrix6<f64>) {
    let rt = prev.q.inverse().to_rotation_matrix().into_inner();
    let v = rt * (cur.p - prev.p);
    let a = cur.q.inverse() * prev.q;
    let e = a * m.dq;
    let ew = e.quaternion().w;
    let ev = e.quaternion().imag();
    let left = (Matrix3::identity() * ew - ev.cross_matrix()) * 0.5;

    let mut j_prev = Matrix6::zeros();
    j_prev.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
    j_prev.fixed_view_mut::<3, 3>(0, 3).copy_from(&v.cross_matrix());
    j_prev
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(left * a.to_rotation_matrix().into_inner()));

    let mut j_cur = Matrix6::zeros();
    j_cur.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    j_cur.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-left));
    (j_prev, j_cur)
}

/// Apply a `[δp, δθ]` perturbation.
pub fn retract(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dp = Vector3::new(delta[0], delta[1], delta[2]);
    let dth = Vector3::new(delta[3], delta[4], delta[5]);
    let mut q = pose.q * UnitQuaternion::from_scaled_axis(dth);
    q.renormalize();
    Pose::new(pose.p + dp, q)
}

/// Chain odometry from `initial`; the result has one more pose than `odom`.
pub fn dead_reckon(initial: &Pose, odom: &[OdometryMeasurement]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(odom.len() + 1);
    out.push(*initial);
    for m in odom {
        let next = out.last().unwrap().compose(&m.as_pose());
        out.push(next);
    }
    out
}

/// Dead-reckon from the origin, then rigidly move the whole chain (yaw and
/// translation) onto the GNSS fixes. Used as the solver's starting point.
pub fn initial_guess(
    odom: &[OdometryMeasurement],
    gnss: &BTreeMap<usize, GnssMeasurement>,
) -> Vec<Pose> {
    let chain = dead_reckon(&Pose::identity(), odom);
    let Some(align) = align_to_fixes(&chain, gnss) else {
        return chain;
    };
    chain.iter().map(|p| align.compose(p)).collect()
}

/// Planar rigid transform that best maps the chain positions at the fixed
/// nodes onto the fixes (least squares). `None` without fixes.
pub fn align_to_fixes(chain: &[Pose], gnss: &BTreeMap<usize, GnssMeasurement>) -> Option<Pose> {
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = gnss
        .iter()
        .filter(|(i, _)| **i < chain.len())
        .map(|(&i, m)| (chain[i].p, m.p))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let ca = pairs.iter().map(|(a, _)| a).sum::<Vector3<f64>>() / n;
    let cb = pairs.iter().map(|(_, b)| b).sum::<Vector3<f64>>() / n;
    let (mut sin, mut cos) = (0.0, 0.0);
    for (a, b) in &pairs {
        let (a, b) = (a - ca, b - cb);
        sin += a.x * b.y - a.y * b.x;
        cos += a.x * b.x + a.y * b.y;
    }
    let yaw = if sin.abs() + cos.abs() > 1e-12 {
        sin.atan2(cos)
    } else {
        0.0
    };
    let q = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
    Some(Pose::new(cb - q * ca, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            relative_cost_tolerance: 1e-10,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub poses: Vec<Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// True when a tolerance was met rather than the iteration cap.
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Block-tridiagonal normal equations `H δ = −g`.
struct NormalEquations {
    diag: Vec<Matrix6<f64>>,
    upper: Vec<Matrix6<f64>>,
    rhs: Vec<Vector6<f64>>,
}

impl NormalEquations {
    fn build(problem: &PoseGraphProblem, states: &[Pose]) -> Self {
        let n = states.len();
        let w = &problem.weights;
        let mut diag = vec![Matrix6::zeros(); n];
        let mut upper = vec![Matrix6::zeros(); n.saturating_sub(1)];
        let mut rhs = vec![Vector6::zeros(); n];
        let whiten = Matrix6::from_diagonal(&Vector6::new(
            1.0 / w.sigma_odom_p,
            1.0 / w.sigma_odom_p,
            1.0 / w.sigma_odom_p,
            1.0 / w.sigma_odom_q,
            1.0 / w.sigma_odom_q,
            1.0 / w.sigma_odom_q,
        ));
        for (i, m) in problem.odom_factors.iter().enumerate() {
            let r = whiten * odometry_residual(&states[i], &states[i + 1], m);
            let (ja, jb) = odometry_jacobians(&states[i], &states[i + 1], m);
            let (ja, jb) = (whiten * ja, whiten * jb);
            diag[i] += ja.transpose() * ja;
            diag[i + 1] += jb.transpose() * jb;
            upper[i] += ja.transpose() * jb;
            rhs[i] -= ja.transpose() * r;
            rhs[i + 1] -= jb.transpose() * r;
        }
        let wg = 1.0 / (w.sigma_gnss * w.sigma_gnss);
        for (&i, m) in &problem.gnss_factors {
            let r = gnss_residual(&states[i], m);
            for k in 0..3 {
                diag[i][(k, k)] += wg;
                rhs[i][k] -= wg * r[k];
            }
        }
        if w.sigma_level.is_finite() {
            let wl = 1.0 / (w.sigma_level * w.sigma_level);
            for (i, s) in states.iter().enumerate() {
                let j = level_jacobian(s);
                diag[i] += j.transpose() * j * wl;
                rhs[i] -= j.transpose() * level_residual(s) * wl;
            }
        }
        Self { diag, upper, rhs }
    }

    fn gradient_norm(&self) -> f64 {
        self.rhs.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    /// Solve `(H + λ·diag(H)) δ = −g` by block Cholesky. `None` when the
    /// damped system is not positive definite.
    fn solve_damped(&self, lambda: f64) -> Option<Vec<Vector6<f64>>> {
        let n = self.diag.len();
        let mut chol = Vec::with_capacity(n);
        let mut y: Vec<Vector6<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = self.diag[i];
            for k in 0..6 {
                s[(k, k)] += lambda * self.diag[i][(k, k)].max(1e-9);
            }
            let mut b = self.rhs[i];
            if i > 0 {
                let c: &nalgebra::Cholesky<f64, nalgebra::Const<6>> = &chol[i - 1];
                let up = &self.upper[i - 1];
                // Schur complement S_i = D_i − Bᵀ S_{i−1}⁻¹ B.
                let sinv_b: SMatrix<f64, 6, 6> = c.solve(up);
                s -= up.transpose() * sinv_b;
                b -= up.transpose() * c.solve(&y[i - 1]);
            }
            let c = s.cholesky()?;
            chol.push(c);
            y.push(b);
        }
        let mut x = vec![Vector6::zeros(); n];
        for i in (0..n).rev() {
            let mut b = y[i];
            if i + 1 < n {
                b -= self.upper[i] * x[i + 1];
            }
            x[i] = chol[i].solve(&b);
        }
        Some(x)
    }
}

/// Levenberg–Marquardt over the whole chain.
pub fn optimize(
    problem: &PoseGraphProblem,
    config: &SolverConfig,
) -> Result<Solution, PoseGraphError> {
    problem.validate()?;
    if problem.gnss_factors.is_empty() {
        return Err(PoseGraphError::UnobservableGauge);
    }
    let mut states = problem.nodes.clone();
    let mut cost = problem.cost(&states);
    if !cost.is_finite() {
        return Err(PoseGraphError::Divergence { iteration: 0 });
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let mut normal = NormalEquations::build(problem, &states);
    let mut grad = normal.gradient_norm();

    while iterations < config.max_iterations {
        if grad < config.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(step) = normal.solve_damped(lambda) else {
            lambda *= 10.0;
            continue;
        };
        let candidate: Vec<Pose> = states
            .iter()
            .zip(&step)
            .map(|(s, d)| retract(s, d))
            .collect();
        let new_cost = problem.cost(&candidate);
        if !new_cost.is_finite() {
            return Err(PoseGraphError::Divergence { iteration: iterations });
        }
        if new_cost <= cost {
            let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            states = candidate;
            cost = new_cost;
            history.push(cost);
            lambda = (lambda * 0.1).max(1e-12);
            normal = NormalEquations::build(problem, &states);
            grad = normal.gradient_norm();
            if rel < config.relative_cost_tolerance || grad < config.gradient_tolerance {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // No descent direction left at machine precision.
                converged = true;
                break;
            }
        }
    }

    Ok(Solution {
        poses: states,
        initial_cost,
        final_cost: cost,
        iterations,
        gradient_norm: grad,
        converged,
        cost_history: history,
    })
}

/// Origin of one trajectory CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectorySource {
    Raw,
    Optimized,
    Truth,
}

impl TrajectorySource {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectorySource::Raw => "raw",
            TrajectorySource::Optimized => "optimized",
            TrajectorySource::Truth => "truth",
        }
    }
}

/// Write `t,px,py,pz,qw,qx,qy,qz,source` rows.
pub fn write_trajectory_csv<W: Write>(
    mut out: W,
    rows: impl IntoIterator<Item = (f64, Pose, TrajectorySource)>,
) -> std::io::Result<()> {
    writeln!(out, "t,px,py,pz,qw,qx,qy,qz,source")?;
    for (t, p, src) in rows {
        let q = p.q.quaternion();
        writeln!(
            out,
            "{t:.3},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{}",
            p.p.x,
            p.p.y,
            p.p.z,
            q.w,
            q.i,
            q.j,
            q.k,
            src.as_str()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let p = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0));
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-3.1..3.1),
        );
        Pose::new(p, q)
    }

    fn random_odom(rng: &mut impl Rng) -> OdometryMeasurement {
        let p = random_pose(rng);
        OdometryMeasurement { dp: p.p, dq: p.q }
    }

    #[test]
    fn exact_measurement_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let m = random_odom(&mut rng);
            let b = a.compose(&m.as_pose());
            assert!(odometry_residual(&a, &b, &m).norm() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_error() {
        let r = odometry_residual(
            &Pose::identity(),
            &Pose::new(Vector3::new(1.0, 0.0, 0.0), UnitQuaternion::identity()),
            &OdometryMeasurement::identity(),
        );
        assert_eq!(r, Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn residual_matches_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let m = random_odom(&mut rng);
            let r = odometry_residual(&a, &b, &m);
            // Independent route: rotation matrices for translation, and the
            // error rotation's axis-angle for the vector part.
            let ra = a.q.to_rotation_matrix().into_inner();
            let t = ra.transpose() * (b.p - a.p) - m.dp;
            let e_mat = b.q.to_rotation_matrix().into_inner().transpose()
                * ra
                * m.dq.to_rotation_matrix().into_inner();
            let e_rot = nalgebra::Rotation3::from_matrix_unchecked(e_mat);
            let (axis, angle) = e_rot
                .axis_angle()
                .map(|(ax, an)| (ax.into_inner(), an))
                .unwrap_or((Vector3::x(), 0.0));
            // vec part of a unit quaternion = axis·sin(θ/2), up to sign of q.
            let v = axis * (angle / 2.0).sin();
            let q_e = b.q.inverse() * a.q * m.dq;
            let sign = if q_e.quaternion().w < 0.0 { -1.0 } else { 1.0 };
            for k in 0..3 {
                assert!((r[k] - t[k]).abs() < 1e-9);
                assert!((r[3 + k] - sign * v[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gnss_residual_subtracts() {
        let s = Pose::new(Vector3::new(1.0, 2.0, 3.0), UnitQuaternion::identity());
        let m = GnssMeasurement { p: Vector3::new(0.0, 2.0, 3.0) };
        assert_eq!(gnss_residual(&s, &m), Vector3::new(1.0, 0.0, 0.0));
        let m = GnssMeasurement { p: s.p };
        assert_eq!(gnss_residual(&s, &m), Vector3::zeros());
    }

    #[test]
    fn dead_reckon_chains_steps() {
        assert_eq!(dead_reckon(&Pose::identity(), &[]), vec![Pose::identity()]);
        let step = OdometryMeasurement {
            dp: Vector3::new(1.0, 0.0, 0.0),
            dq: UnitQuaternion::identity(),
        };
        let poses = dead_reckon(&Pose::identity(), &[step; 3]);
        for (i, p) in poses.iter().enumerate() {
            assert!((p.p - Vector3::new(i as f64, 0.0, 0.0)).norm() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let odom: Vec<_> = (0..30).map(|_| random_odom(&mut rng)).collect();
        let chain = dead_reckon(&random_pose(&mut rng), &odom);
        for (i, m) in odom.iter().enumerate() {
            assert!(odometry_residual(&chain[i], &chain[i + 1], m).norm() < 1e-9);
        }
    }

    fn one_d_problem() -> PoseGraphProblem {
        let step = OdometryMeasurement {
            dp: Vector3::new(1.0, 0.0, 0.0),
            dq: UnitQuaternion::identity(),
        };
        let mut gnss = BTreeMap::new();
        gnss.insert(0, GnssMeasurement { p: Vector3::zeros() });
        gnss.insert(2, GnssMeasurement { p: Vector3::new(2.2, 0.0, 0.0) });
        PoseGraphProblem::new(
            dead_reckon(&Pose::identity(), &[step; 2]),
            vec![step; 2],
            gnss,
            FactorWeights::unit(),
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_chain_closed_form() {
        // Stationarity of (x1−x0−1)² + (x2−x1−1)² + x0² + (x2−2.2)²:
        //   x1 = (x0+x2)/2, 2·x0 = x1 − 1, 2·x2 = x1 + 3.2
        // gives x1 = 1.1, x0 = 0.05, x2 = 2.15 and a cost of 4 · 0.05².
        let sol = optimize(&one_d_problem(), &SolverConfig::default()).unwrap();
        let xs: Vec<f64> = sol.poses.iter().map(|p| p.p.x).collect();
        for (x, e) in xs.iter().zip([0.05, 1.10, 2.15]) {
            assert!((x - e).abs() < 1e-6, "{xs:?}");
        }
        assert!((sol.final_cost - 0.01).abs() < 1e-10);
        assert!(sol.final_cost <= sol.initial_cost);
    }

    #[test]
    fn optimum_input_is_returned_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let odom: Vec<_> = (0..10).map(|_| random_odom(&mut rng)).collect();
        let nodes = dead_reckon(&random_pose(&mut rng), &odom);
        let gnss: BTreeMap<_, _> = [(0, GnssMeasurement { p: nodes[0].p }), (7, GnssMeasurement { p: nodes[7].p })].into();
        // Tilted random poses, so leave the level term out.
        let weights = FactorWeights {
            sigma_level: f64::INFINITY,
            ..FactorWeights::default()
        };
        let problem = PoseGraphProblem::new(nodes.clone(), odom, gnss, weights).unwrap();
        let sol = optimize(&problem, &SolverConfig::default()).unwrap();
        assert!(sol.iterations <= 1);
        assert!(sol.final_cost < 1e-16);
        for (a, b) in sol.poses.iter().zip(&nodes) {
            assert!((a.p - b.p).norm() < 1e-12);
        }
    }

    #[test]
    fn missing_gnss_is_unobservable() {
        let mut p = one_d_problem();
        p.gnss_factors.clear();
        assert_eq!(
            optimize(&p, &SolverConfig::default()).unwrap_err(),
            PoseGraphError::UnobservableGauge
        );
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let r = PoseGraphProblem::new(vec![Pose::identity(); 3], vec![], BTreeMap::new(), FactorWeights::default());
        assert!(matches!(r, Err(PoseGraphError::InvalidProblem(_))));
        let gnss: BTreeMap<_, _> = [(5, GnssMeasurement { p: Vector3::zeros() })].into();
        let r = PoseGraphProblem::new(vec![Pose::identity()], vec![], gnss, FactorWeights::default());
        assert!(matches!(r, Err(PoseGraphError::InvalidProblem(_))));
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let m = random_odom(&mut rng);
            // Near, but not at, the measurement.
            let b = retract(
                &a.compose(&m.as_pose()),
                &Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3)),
            );
            let (ja, jb) = odometry_jacobians(&a, &b, &m);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let fd_a = (odometry_residual(&retract(&a, &d), &b, &m)
                    - odometry_residual(&retract(&a, &(-d)), &b, &m))
                    / (2.0 * h);
                let fd_b = (odometry_residual(&a, &retract(&b, &d), &m)
                    - odometry_residual(&a, &retract(&b, &(-d)), &m))
                    / (2.0 * h);
                let rel = |an: Vector6<f64>, fd: Vector6<f64>| (an - fd).norm() / fd.norm().max(1.0);
                assert!(rel(ja.column(k).into(), fd_a) < 1e-5);
                assert!(rel(jb.column(k).into(), fd_b) < 1e-5);
            }
        }
    }

    #[test]
    fn level_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = random_pose(&mut rng);
            let j = level_jacobian(&s);
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = 1e-6;
                let num = (level_residual(&retract(&s, &d)) - level_residual(&retract(&s, &-d))) / 2e-6;
                assert!((num - j.column(k)).norm() < 1e-8, "column {k}");
            }
        }
        assert!(level_residual(&Pose::planar(3.0, -2.0, 1.2)).norm() < 1e-15);
    }

    #[test]
    fn straight_drive_stays_level() {
        // Lateral odometry noise alone lets roll wander without the level term.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 300;
        let odom: Vec<OdometryMeasurement> = (0..n - 1)
            .map(|_| OdometryMeasurement {
                dp: Vector3::new(0.5, rng.random_range(-0.03..0.03), 0.0),
                dq: UnitQuaternion::identity(),
            })
            .collect();
        let gnss: BTreeMap<usize, GnssMeasurement> = (0..n)
            .map(|i| {
                let z = rng.random_range(-0.05..0.05);
                (i, GnssMeasurement { p: Vector3::new(0.5 * i as f64, 0.0, z) })
            })
            .collect();
        let problem = PoseGraphProblem::new(initial_guess(&odom, &gnss), odom, gnss, FactorWeights::default()).unwrap();
        let sol = optimize(&problem, &SolverConfig::default()).unwrap();
        for p in &sol.poses {
            let (roll, pitch, _) = p.q.euler_angles();
            assert!(roll.abs() < 0.02 && pitch.abs() < 0.02, "roll {roll} pitch {pitch}");
        }
    }

    #[test]
    fn gnss_insertion_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = dead_reckon(&Pose::identity(), &vec![OdometryMeasurement { dp: Vector3::new(0.5, 0.0, 0.0), dq: UnitQuaternion::from_euler_angles(0.0, 0.0, 0.01) }; 40]);
        let odom: Vec<_> = truth
            .windows(2)
            .map(|w| {
                let mut m = OdometryMeasurement::between(&w[0], &w[1]);
                m.dp.x += rng.random_range(-0.02..0.02);
                m
            })
            .collect();
        let fixes: Vec<(usize, GnssMeasurement)> = (0..41).step_by(4).map(|i| (i, GnssMeasurement { p: truth[i].p })).collect();
        let forward: BTreeMap<_, _> = fixes.iter().cloned().collect();
        let mut backward = BTreeMap::new();
        for (i, g) in fixes.iter().rev() {
            backward.insert(*i, *g);
        }
        let solve = |g: BTreeMap<usize, GnssMeasurement>| {
            let nodes = initial_guess(&odom, &g);
            optimize(&PoseGraphProblem::new(nodes, odom.clone(), g, FactorWeights::default()).unwrap(), &SolverConfig::default()).unwrap()
        };
        let a = solve(forward);
        let b = solve(backward);
        for (x, y) in a.poses.iter().zip(&b.poses) {
            assert!((x.p - y.p).norm() < 1e-9);
        }
    }

    #[test]
    fn cost_never_increases_across_accepted_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let odom: Vec<_> = (0..60)
            .map(|_| OdometryMeasurement {
                dp: Vector3::new(0.5 + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
                dq: UnitQuaternion::from_euler_angles(0.0, 0.0, rng.random_range(-0.05..0.05)),
            })
            .collect();
        let truth = dead_reckon(&Pose::identity(), &odom);
        let gnss: BTreeMap<_, _> = (0..61)
            .step_by(3)
            .map(|i| (i, GnssMeasurement { p: truth[i].p + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0) }))
            .collect();
        let problem = PoseGraphProblem::new(initial_guess(&odom, &gnss), odom, gnss, FactorWeights::default()).unwrap();
        let sol = optimize(&problem, &SolverConfig::default()).unwrap();
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(sol.final_cost < sol.initial_cost);
    }

    #[test]
    fn trajectory_csv_header() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, [(0.0, Pose::identity(), TrajectorySource::Truth)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,px,py,pz,qw,qx,qy,qz,source\n"));
        assert!(s.trim_end().ends_with(",truth"));
    }
}
