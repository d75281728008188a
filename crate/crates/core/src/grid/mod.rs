//! Voted semantic grid at 0.1 m resolution.
//!
//! Every labeled ground point increments one vote counter of the cell that
//! contains it; a cell's class is the label with the most votes. The same
//! structure is used for on-vehicle local maps and the merged global map, so
//! merging is per-cell counter addition.

mod upload;

pub use upload::{decode_upload, encode_upload, UploadError, UPLOAD_MAGIC, UPLOAD_VERSION};

use crate::geometry::{transform_to_world, Pose};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use thiserror::Error;

/// Edge length of one grid cell, meters.
pub const CELL_SIZE: f64 = 0.1;
/// Horizontal cells per merge tile (40.96 m).
pub const TILE_CELLS: i64 = 4096;

/// Classes inserted into the map. Codes are stable and used on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLabel {
    Ground = 0,
    LaneLine = 1,
    StopLine = 2,
    GroundSign = 3,
    Crosswalk = 4,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 5] = [
        SemanticLabel::Ground,
        SemanticLabel::LaneLine,
        SemanticLabel::StopLine,
        SemanticLabel::GroundSign,
        SemanticLabel::Crosswalk,
    ];

    /// Road-marking classes, i.e. everything except bare ground.
    pub const MARKINGS: [SemanticLabel; 4] = [
        SemanticLabel::LaneLine,
        SemanticLabel::StopLine,
        SemanticLabel::GroundSign,
        SemanticLabel::Crosswalk,
    ];

    /// Tie-break order, highest priority first.
    pub const PRIORITY: [SemanticLabel; 5] = [
        SemanticLabel::LaneLine,
        SemanticLabel::StopLine,
        SemanticLabel::GroundSign,
        SemanticLabel::Crosswalk,
        SemanticLabel::Ground,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Position in [`Self::PRIORITY`]; lower wins ties.
    pub fn priority_rank(self) -> usize {
        Self::PRIORITY.iter().position(|&l| l == self).unwrap()
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_marking(self) -> bool {
        self != SemanticLabel::Ground
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLabel::Ground => "ground",
            SemanticLabel::LaneLine => "lane_line",
            SemanticLabel::StopLine => "stop_line",
            SemanticLabel::GroundSign => "ground_sign",
            SemanticLabel::Crosswalk => "crosswalk",
        }
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("cell has no votes")]
    EmptyCell,
}

/// Saturating per-label vote counters of one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CellScores {
    pub counts: [u16; 5],
}

impl CellScores {
    pub fn single(label: SemanticLabel) -> Self {
        let mut s = Self::default();
        s.vote(label);
        s
    }

    pub fn get(&self, label: SemanticLabel) -> u16 {
        self.counts[label as usize]
    }

    pub fn vote(&mut self, label: SemanticLabel) {
        let c = &mut self.counts[label as usize];
        *c = c.saturating_add(1);
    }

    pub fn add(&mut self, other: &CellScores) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a = a.saturating_add(b);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().map(|&c| c as u32).sum()
    }

    /// Majority label; ties go to the rarer marking class.
    pub fn label(&self) -> Result<SemanticLabel, GridError> {
        majority_label(&self.counts.map(u32::from)).ok_or(GridError::EmptyCell)
    }
}

/// Argmax over per-label counts (indexed by label code) with the marking
/// priority tie-break; `None` when every count is zero.
pub fn majority_label(counts: &[u32; 5]) -> Option<SemanticLabel> {
    let mut best: Option<(SemanticLabel, u32)> = None;
    for l in SemanticLabel::PRIORITY {
        let c = counts[l as usize];
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}

/// Free-function form of [`CellScores::label`].
pub fn cell_label(scores: &CellScores) -> Result<SemanticLabel, GridError> {
    scores.label()
}

/// Integer cell coordinates; cell `i` spans `[i·0.1, (i+1)·0.1)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl GridIndex {
    pub fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    pub fn of_point(x: f64, y: f64, z: f64) -> Self {
        Self {
            ix: axis_index(x),
            iy: axis_index(y),
            iz: axis_index(z),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            axis_center(self.ix),
            axis_center(self.iy),
            axis_center(self.iz),
        )
    }

    pub fn tile(&self) -> TileId {
        TileId {
            tx: self.ix.div_euclid(TILE_CELLS) as i32,
            ty: self.iy.div_euclid(TILE_CELLS) as i32,
        }
    }
}

pub fn axis_index(c: f64) -> i64 {
    (c / CELL_SIZE).floor() as i64
}

pub fn axis_center(i: i64) -> f64 {
    (i as f64 + 0.5) * CELL_SIZE
}

/// Merge tile: a 4096 x 4096 cell column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileId {
    pub tx: i32,
    pub ty: i32,
}

impl TileId {
    /// World-frame xy bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let s = TILE_CELLS as f64 * CELL_SIZE;
        let x0 = self.tx as f64 * s;
        let y0 = self.ty as f64 * s;
        (x0, y0, x0 + s, y0 + s)
    }
}

/// A labeled point in whatever frame the context implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub label: SemanticLabel,
}

impl LabeledPoint {
    pub fn new(x: f64, y: f64, z: f64, label: SemanticLabel) -> Self {
        Self { x, y, z, label }
    }
}

pub type TileCells = BTreeMap<GridIndex, CellScores>;

/// Sparse tiled voting grid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemanticGridMap {
    tiles: BTreeMap<TileId, TileCells>,
}

impl SemanticGridMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.tiles.values().map(|t| t.len()).sum()
    }

    pub fn tiles(&self) -> &BTreeMap<TileId, TileCells> {
        &self.tiles
    }

    pub fn tile(&self, id: &TileId) -> Option<&TileCells> {
        self.tiles.get(id)
    }

    pub fn get(&self, idx: &GridIndex) -> Option<&CellScores> {
        self.tiles.get(&idx.tile())?.get(idx)
    }

    /// Vote for the cell containing `pt`. Non-finite points are ignored.
    pub fn insert_point(&mut self, pt: &LabeledPoint) {
        if !(pt.x.is_finite() && pt.y.is_finite() && pt.z.is_finite()) {
            return;
        }
        self.vote(GridIndex::of_point(pt.x, pt.y, pt.z), pt.label);
    }

    pub fn vote(&mut self, idx: GridIndex, label: SemanticLabel) {
        self.tiles
            .entry(idx.tile())
            .or_default()
            .entry(idx)
            .or_default()
            .vote(label);
    }

    /// Add `scores` onto the cell at `idx`. Empty scores are ignored so no
    /// empty cell is ever stored.
    pub fn add_cell(&mut self, idx: GridIndex, scores: &CellScores) {
        if scores.is_empty() {
            return;
        }
        self.tiles
            .entry(idx.tile())
            .or_default()
            .entry(idx)
            .or_default()
            .add(scores);
    }

    /// All stored cells in (tile, ix, iy, iz) order.
    pub fn occupied_cells(&self) -> Vec<(GridIndex, CellScores)> {
        self.iter().map(|(i, s)| (*i, *s)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GridIndex, &CellScores)> {
        self.tiles.values().flat_map(|t| t.iter())
    }

    pub fn from_cells<'a>(cells: impl IntoIterator<Item = &'a (GridIndex, CellScores)>) -> Self {
        let mut m = Self::new();
        m.merge(cells);
        m
    }

    /// Saturating per-label addition of uploaded cells.
    pub fn merge<'a>(&mut self, cells: impl IntoIterator<Item = &'a (GridIndex, CellScores)>) {
        for (idx, s) in cells {
            self.add_cell(*idx, s);
        }
    }

    pub fn merge_map(&mut self, other: &SemanticGridMap) {
        for (idx, s) in other.iter() {
            self.add_cell(*idx, s);
        }
    }

    /// Replace one tile wholesale (used by stores that hold tiles apart).
    pub fn set_tile(&mut self, id: TileId, cells: TileCells) {
        if cells.is_empty() {
            self.tiles.remove(&id);
        } else {
            self.tiles.insert(id, cells);
        }
    }

    /// Cells grouped by majority label.
    pub fn labeled_cells(&self) -> HashMap<SemanticLabel, Vec<GridIndex>> {
        let mut out: HashMap<SemanticLabel, Vec<GridIndex>> = HashMap::new();
        for (idx, s) in self.iter() {
            if let Ok(l) = s.label() {
                out.entry(l).or_default().push(*idx);
            }
        }
        out
    }
}

/// One frame of labeled vehicle-frame ground points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureScan {
    pub timestamp: f64,
    pub points: Vec<ScanPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
    pub label: SemanticLabel,
}

/// Register every scan with its pose and vote it into a fresh map.
pub fn build_local_map<'a>(
    frames: impl IntoIterator<Item = (&'a FeatureScan, &'a Pose)>,
) -> SemanticGridMap {
    let mut map = SemanticGridMap::new();
    for (scan, pose) in frames {
        insert_scan(&mut map, scan, pose);
    }
    map
}

pub fn insert_scan(map: &mut SemanticGridMap, scan: &FeatureScan, pose: &Pose) {
    for sp in &scan.points {
        let w = transform_to_world(pose, &Vector3::new(sp.x, sp.y, 0.0));
        map.insert_point(&LabeledPoint::new(w.x, w.y, w.z, sp.label));
    }
}
