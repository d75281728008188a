use crate::grid::{axis_center, majority_label, SemanticGridMap, SemanticLabel, CELL_SIZE};
use std::collections::BTreeMap;

/// Pixels per side of a codec raster tile (51.2 m).
pub const RASTER_SIZE: usize = 512;

/// Index of a codec raster tile; independent of the grid's merge tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RasterTileId {
    pub tx: i64,
    pub ty: i64,
}

impl RasterTileId {
    pub fn of_cell(ix: i64, iy: i64) -> Self {
        Self {
            tx: ix.div_euclid(RASTER_SIZE as i64),
            ty: iy.div_euclid(RASTER_SIZE as i64),
        }
    }

    /// Grid index of pixel (0, 0).
    pub fn first_cell(&self) -> (i64, i64) {
        (self.tx * RASTER_SIZE as i64, self.ty * RASTER_SIZE as i64)
    }

    /// World xy of the outer corner of pixel (0, 0).
    pub fn origin(&self) -> (f64, f64) {
        let (ix, iy) = self.first_cell();
        (ix as f64 * CELL_SIZE, iy as f64 * CELL_SIZE)
    }

    /// Tile whose pixel (0, 0) corner sits at `origin`.
    pub fn from_origin(x: f64, y: f64) -> Self {
        let ix = (x / CELL_SIZE).round() as i64;
        let iy = (y / CELL_SIZE).round() as i64;
        Self::of_cell(ix, iy)
    }

    /// World bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x0, y0) = self.origin();
        let s = RASTER_SIZE as f64 * CELL_SIZE;
        (x0, y0, x0 + s, y0 + s)
    }

    pub fn intersects(&self, region: &Region) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 < region.max_x && x1 > region.min_x && y0 < region.max_y && y1 > region.min_y
    }
}

/// World-frame axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Region {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn everything() -> Self {
        Self::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY)
    }

    pub fn is_empty(&self) -> bool {
        !(self.max_x > self.min_x && self.max_y > self.min_y)
    }
}

/// Width x height grid of optional labels; row `y` is stored at
/// `y * width`, and `y` grows with world y.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Option<SemanticLabel>>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![None; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<SemanticLabel> {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, l: Option<SemanticLabel>) {
        self.labels[y * self.width + x] = l;
    }

    /// Label at signed coordinates; outside the image reads as empty.
    #[inline]
    pub fn at(&self, x: i64, y: i64) -> Option<SemanticLabel> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            self.get(x as usize, y as usize)
        }
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Top view of one codec tile: one pixel per 0.1 m cell column.
#[derive(Debug, Clone, PartialEq)]
pub struct TopViewRaster {
    pub tile: RasterTileId,
    pub image: LabelImage,
    /// Vote-weighted mean cell-center z of each occupied column.
    pub elevations: Vec<f64>,
}

impl TopViewRaster {
    pub fn empty(tile: RasterTileId) -> Self {
        Self {
            tile,
            image: LabelImage::new(RASTER_SIZE, RASTER_SIZE),
            elevations: vec![0.0; RASTER_SIZE * RASTER_SIZE],
        }
    }

    pub fn origin(&self) -> (f64, f64) {
        self.tile.origin()
    }

    pub fn label(&self, x: usize, y: usize) -> Option<SemanticLabel> {
        self.image.get(x, y)
    }

    pub fn elevation(&self, x: usize, y: usize) -> f64 {
        self.elevations[y * self.image.width + x]
    }
}

#[derive(Default)]
struct Column {
    scores: [u32; 5],
    z_weighted: f64,
    weight: f64,
}

impl Column {
    fn label(&self) -> Option<SemanticLabel> {
        majority_label(&self.scores)
    }
}

/// Top views of every codec tile holding occupied cells inside `region`.
pub fn rasterize(map: &SemanticGridMap, region: &Region) -> Vec<TopViewRaster> {
    let mut columns: BTreeMap<RasterTileId, BTreeMap<(usize, usize), Column>> = BTreeMap::new();
    for (idx, s) in map.iter() {
        let cx = axis_center(idx.ix);
        let cy = axis_center(idx.iy);
        if cx < region.min_x || cx >= region.max_x || cy < region.min_y || cy >= region.max_y {
            continue;
        }
        let tile = RasterTileId::of_cell(idx.ix, idx.iy);
        let (x0, y0) = tile.first_cell();
        let px = (idx.ix - x0) as usize;
        let py = (idx.iy - y0) as usize;
        let col = columns.entry(tile).or_default().entry((px, py)).or_default();
        for (a, &b) in col.scores.iter_mut().zip(&s.counts) {
            *a += b as u32;
        }
        let w = s.total() as f64;
        col.z_weighted += w * axis_center(idx.iz);
        col.weight += w;
    }
    columns
        .into_iter()
        .map(|(tile, cols)| {
            let mut r = TopViewRaster::empty(tile);
            for ((px, py), col) in cols {
                if let Some(l) = col.label() {
                    r.image.set(px, py, Some(l));
                    r.elevations[py * RASTER_SIZE + px] = col.z_weighted / col.weight;
                }
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellScores, GridIndex, LabeledPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell_raster() {
        let mut m = SemanticGridMap::new();
        m.insert_point(&LabeledPoint::new(0.05, 0.05, 0.05, SemanticLabel::LaneLine));
        let rs = rasterize(&m, &Region::everything());
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].image.occupied(), 1);
        assert_eq!(rs[0].label(0, 0), Some(SemanticLabel::LaneLine));
        assert!((rs[0].elevation(0, 0) - 0.05).abs() < 1e-12);
        assert!(rasterize(&SemanticGridMap::new(), &Region::everything()).is_empty());
    }

    #[test]
    fn negative_cells_land_in_negative_tiles() {
        let mut m = SemanticGridMap::new();
        m.vote(GridIndex::new(-1, -513, 0), SemanticLabel::Crosswalk);
        let rs = rasterize(&m, &Region::everything());
        assert_eq!(rs[0].tile, RasterTileId { tx: -1, ty: -2 });
        assert_eq!(rs[0].label(511, 511), Some(SemanticLabel::Crosswalk));
    }

    #[test]
    fn columns_match_brute_force_vote_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = SemanticGridMap::new();
        for _ in 0..3000 {
            let idx = GridIndex::new(rng.random_range(-30..30), rng.random_range(-30..30), rng.random_range(-2..3));
            m.vote(idx, SemanticLabel::from_code(rng.random_range(0..5)).unwrap());
        }
        let rs = rasterize(&m, &Region::everything());
        let cells = m.occupied_cells();
        for r in &rs {
            let (x0, y0) = r.tile.first_cell();
            for py in 0..RASTER_SIZE {
                for px in 0..RASTER_SIZE {
                    let (ix, iy) = (x0 + px as i64, y0 + py as i64);
                    let mut sum = CellScores::default();
                    let mut zw = 0.0;
                    let mut w = 0.0;
                    for (idx, s) in cells.iter().filter(|(i, _)| i.ix == ix && i.iy == iy) {
                        sum.add(s);
                        zw += s.total() as f64 * idx.center().z;
                        w += s.total() as f64;
                    }
                    assert_eq!(r.label(px, py), sum.label().ok());
                    if w > 0.0 {
                        assert!((r.elevation(px, py) - zw / w).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn region_filters_tiles() {
        let mut m = SemanticGridMap::new();
        m.vote(GridIndex::new(0, 0, 0), SemanticLabel::LaneLine);
        m.vote(GridIndex::new(2000, 0, 0), SemanticLabel::LaneLine);
        let rs = rasterize(&m, &Region::new(-1.0, -1.0, 10.0, 10.0));
        assert_eq!(rs.len(), 1);
    }
}
