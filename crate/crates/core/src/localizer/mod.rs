//! Map-relative localization: label-aware ICP of a feature scan against a
//! semantic map, fused with odometry in a planar EKF.

mod ekf;
mod icp;
mod report;

pub use ekf::{ekf_predict, ekf_update, EkfState, ProcessNoise, UpdateOutcome, CHI2_GATE_3DOF_99};
pub use icp::{icp_localize, IcpConfig, IcpIteration, IcpResult};
pub use report::{
    evaluate_errors, read_localization_csv, write_error_csv, write_localization_csv, ErrorStats, ErrorSummary,
    FrameError, LocalizationRecord, LOCALIZATION_CSV_HEADER,
};

use crate::grid::{axis_index, GridIndex, LabeledPoint, SemanticGridMap, SemanticLabel};
use crate::posegraph::OdometryMeasurement;
use nalgebra::Matrix3;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizerError {
    #[error("scan has no usable points")]
    EmptyScan,
    #[error("no scan point has a same-label map cell within the gate")]
    NoOverlap,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("measurement did not converge")]
    UnconvergedMeasurement,
}

/// Cells per hash bucket side.
const BUCKET_CELLS: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    x: f64,
    y: f64,
    z: f64,
    idx: GridIndex,
}

/// Per-label spatial hash over occupied cell centers.
#[derive(Debug, Clone, Default)]
pub struct MapIndex {
    buckets: HashMap<(SemanticLabel, i64, i64), Vec<Entry>>,
    len: usize,
}

/// A matched map point and its planar distance from the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: LabeledPoint,
    pub index: GridIndex,
    pub distance: f64,
}

fn bucket(c: f64) -> i64 {
    axis_index(c).div_euclid(BUCKET_CELLS)
}

impl MapIndex {
    /// Index every occupied cell under its majority label.
    pub fn new(map: &SemanticGridMap) -> Self {
        let mut buckets: HashMap<(SemanticLabel, i64, i64), Vec<Entry>> = HashMap::new();
        let mut len = 0;
        for (idx, s) in map.iter() {
            let Ok(label) = s.label() else { continue };
            let c = idx.center();
            buckets
                .entry((label, idx.ix.div_euclid(BUCKET_CELLS), idx.iy.div_euclid(BUCKET_CELLS)))
                .or_default()
                .push(Entry {
                    x: c.x,
                    y: c.y,
                    z: c.z,
                    idx: *idx,
                });
            len += 1;
        }
        Self { buckets, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Nearest same-label cell center within `radius` (planar distance).
    /// Ties go to the smaller grid index.
    pub fn nearest(&self, x: f64, y: f64, label: SemanticLabel, radius: f64) -> Option<Correspondence> {
        let r2 = radius * radius;
        let mut best: Option<(f64, Entry)> = None;
        for bx in bucket(x - radius)..=bucket(x + radius) {
            for by in bucket(y - radius)..=bucket(y + radius) {
                let Some(entries) = self.buckets.get(&(label, bx, by)) else {
                    continue;
                };
                for e in entries {
                    let d2 = (e.x - x).powi(2) + (e.y - y).powi(2);
                    if d2 > r2 {
                        continue;
                    }
                    let better = match &best {
                        None => true,
                        Some((bd, be)) => d2 < *bd || (d2 == *bd && e.idx < be.idx),
                    };
                    if better {
                        best = Some((d2, *e));
                    }
                }
            }
        }
        best.map(|(d2, e)| Correspondence {
            point: LabeledPoint::new(e.x, e.y, e.z, label),
            index: e.idx,
            distance: d2.sqrt(),
        })
    }
}

/// Nearest same-label occupied cell center to `pt` within `radius`.
pub fn nearest_correspondence(pt: &LabeledPoint, map: &MapIndex, radius: f64) -> Option<Correspondence> {
    map.nearest(pt.x, pt.y, pt.label, radius)
}

/// Filter parameters for [`Localizer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    pub icp: IcpConfig,
    pub process: ProcessNoise,
    /// Measurement covariance of an ICP pose (x, y, yaw).
    pub measurement: Matrix3<f64>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            icp: IcpConfig::default(),
            process: ProcessNoise::default(),
            measurement: Matrix3::from_diagonal(&nalgebra::Vector3::new(0.03f64.powi(2), 0.03f64.powi(2), 0.003f64.powi(2))),
        }
    }
}

/// One vehicle's filter: predicts at odometry rate and corrects with ICP.
#[derive(Debug, Clone)]
pub struct Localizer<'m> {
    map: &'m MapIndex,
    config: LocalizerConfig,
    state: EkfState,
    last_time: f64,
}

impl<'m> Localizer<'m> {
    pub fn new(map: &'m MapIndex, initial: EkfState, t0: f64, config: LocalizerConfig) -> Result<Self, LocalizerError> {
        if config.measurement.cholesky().is_none() {
            return Err(LocalizerError::Config("measurement covariance is not positive definite".into()));
        }
        Ok(Self {
            map,
            config,
            state: initial,
            last_time: t0,
        })
    }

    pub fn state(&self) -> &EkfState {
        &self.state
    }

    pub fn predict(&mut self, odom: &OdometryMeasurement) {
        self.state = ekf_predict(&self.state, odom, &self.config.process);
    }

    /// Apply a pose measurement taken at `t`. Measurements older than the
    /// last applied one are dropped and reported as gated.
    pub fn correct(&mut self, t: f64, meas: &IcpResult) -> Result<bool, LocalizerError> {
        if t < self.last_time || !meas.converged {
            return Ok(true);
        }
        let out = ekf_update(&self.state, meas, &self.config.measurement)?;
        self.state = out.state;
        self.last_time = t;
        Ok(out.gated)
    }

    /// Predict with `odom`, run ICP from the prediction and fuse the result.
    pub fn step(
        &mut self,
        t: f64,
        odom: &OdometryMeasurement,
        scan: &crate::grid::FeatureScan,
    ) -> LocalizationRecord {
        self.predict(odom);
        self.observe(t, scan)
    }

    /// Run ICP from the current estimate and fuse the result.
    pub fn observe(&mut self, t: f64, scan: &crate::grid::FeatureScan) -> LocalizationRecord {
        let initial = self.state.pose();
        let (rms, inliers, gated) = match icp_localize(scan, self.map, &initial, &self.config.icp) {
            Ok(r) => {
                let gated = self.correct(t, &r).unwrap_or(true);
                (r.rms_residual, r.inlier_count, gated)
            }
            Err(_) => (f64::NAN, 0, true),
        };
        LocalizationRecord {
            t,
            x: self.state.x,
            y: self.state.y,
            yaw: self.state.yaw,
            icp_rms: rms,
            icp_inliers: inliers,
            gated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellScores;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(pt: &LabeledPoint, map: &SemanticGridMap, radius: f64) -> Option<(GridIndex, f64)> {
        let mut best: Option<(f64, GridIndex)> = None;
        for (idx, s) in map.iter() {
            if s.label().ok() != Some(pt.label) {
                continue;
            }
            let c = idx.center();
            let d2 = (c.x - pt.x).powi(2) + (c.y - pt.y).powi(2);
            if d2 <= radius * radius && best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && *idx < bi)) {
                best = Some((d2, *idx));
            }
        }
        best.map(|(d2, i)| (i, d2.sqrt()))
    }

    #[test]
    fn exact_center_and_miss() {
        let mut m = SemanticGridMap::new();
        m.vote(GridIndex::new(3, 4, 0), SemanticLabel::LaneLine);
        let idx = MapIndex::new(&m);
        let c = GridIndex::new(3, 4, 0).center();
        let hit = nearest_correspondence(&LabeledPoint::new(c.x, c.y, 0.0, SemanticLabel::LaneLine), &idx, 0.5).unwrap();
        assert_eq!(hit.distance, 0.0);
        assert_eq!(hit.index, GridIndex::new(3, 4, 0));
        assert!(nearest_correspondence(&LabeledPoint::new(c.x, c.y, 0.0, SemanticLabel::StopLine), &idx, 0.5).is_none());
        assert!(nearest_correspondence(&LabeledPoint::new(c.x + 0.6, c.y, 0.0, SemanticLabel::LaneLine), &idx, 0.5).is_none());
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = SemanticGridMap::new();
        for _ in 0..4000 {
            let idx = GridIndex::new(rng.random_range(-80..80), rng.random_range(-80..80), rng.random_range(-1..2));
            let l = SemanticLabel::from_code(rng.random_range(0..5)).unwrap();
            m.add_cell(idx, &CellScores::single(l));
        }
        let index = MapIndex::new(&m);
        for _ in 0..1000 {
            let pt = LabeledPoint::new(
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
                0.0,
                SemanticLabel::from_code(rng.random_range(0..5)).unwrap(),
            );
            let r = rng.random_range(0.05..1.5);
            let got = nearest_correspondence(&pt, &index, r).map(|c| (c.index, c.distance));
            assert_eq!(got, brute_force(&pt, &m, r));
        }
    }
}
