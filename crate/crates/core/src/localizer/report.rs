use crate::geometry::{wrap_angle, Pose};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

/// One filtered pose per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub icp_rms: f64,
    pub icp_inliers: usize,
    pub gated: bool,
}

pub const LOCALIZATION_CSV_HEADER: &str = "t,x,y,yaw,icp_rms,icp_inliers,gated";

pub fn write_localization_csv<W: Write>(mut w: W, records: &[LocalizationRecord]) -> io::Result<()> {
    writeln!(w, "{LOCALIZATION_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t, r.x, r.y, r.yaw, r.icp_rms, r.icp_inliers, r.gated as u8
        )?;
    }
    Ok(())
}

/// Parse rows written by [`write_localization_csv`]. Values round-trip
/// exactly.
pub fn read_localization_csv(text: &str) -> Result<Vec<LocalizationRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LOCALIZATION_CSV_HEADER => {}
        _ => return Err("missing localization CSV header".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || format!("line {}: malformed row", i + 2);
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(LocalizationRecord {
                t: num(f[0])?,
                x: num(f[1])?,
                y: num(f[2])?,
                yaw: num(f[3])?,
                icp_rms: num(f[4])?,
                icp_inliers: f[5].trim().parse().map_err(|_| bad())?,
                gated: f[6].trim() == "1",
            })
        })
        .collect()
}

/// Absolute world-frame error of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameError {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub p90: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                p90: 0.0,
                max: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let rank = ((0.9 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p90: v[rank - 1],
            max: v[v.len() - 1],
        }
    }
}

/// Error table over a run: x and y in meters, yaw in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub frames: usize,
    pub x: ErrorStats,
    pub y: ErrorStats,
    pub yaw_deg: ErrorStats,
}

/// Per-frame and summary errors of `records` against timestamped `truth`.
/// Records without a truth sample at the same time (to 1 µs) are skipped.
pub fn evaluate_errors(records: &[LocalizationRecord], truth: &[(f64, Pose)]) -> (Vec<FrameError>, ErrorSummary) {
    let mut sorted: Vec<&(f64, Pose)> = truth.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let find = |t: f64| {
        let i = sorted.partition_point(|s| s.0 < t - 1e-6);
        sorted.get(i).filter(|s| (s.0 - t).abs() <= 1e-6).map(|s| &s.1)
    };
    let errors: Vec<FrameError> = records
        .iter()
        .filter_map(|r| find(r.t).map(|t| (r, t)))
        .map(|(r, t)| FrameError {
            t: r.t,
            x: (r.x - t.p.x).abs(),
            y: (r.y - t.p.y).abs(),
            yaw_deg: wrap_angle(r.yaw - t.yaw()).abs().to_degrees(),
        })
        .collect();
    let col = |f: fn(&FrameError) -> f64| errors.iter().map(f).collect::<Vec<_>>();
    let summary = ErrorSummary {
        frames: errors.len(),
        x: ErrorStats::of(&col(|e| e.x)),
        y: ErrorStats::of(&col(|e| e.y)),
        yaw_deg: ErrorStats::of(&col(|e| e.yaw_deg)),
    };
    (errors, summary)
}

pub fn write_error_csv<W: Write>(mut w: W, errors: &[FrameError]) -> io::Result<()> {
    writeln!(w, "t,x_error,y_error,yaw_error_deg")?;
    for e in errors {
        writeln!(w, "{:.6},{:.6},{:.6},{:.6}", e.t, e.x, e.y, e.yaw_deg)?;
    }
    Ok(())
}
