//! Contour compression of semantic maps.
//!
//! A map is flattened to per-tile top views, each marking region is reduced
//! to its border polygons, and the polygons are packed into a compact
//! binary container. Decompression fills the borders back into cells.

pub mod contour;
pub mod format;
pub mod raster;

pub use contour::{
    extract_contours, extract_image_contours, fill, fill_with_source, signed_area, ContourError, ContourPoint,
    FilledImage, LabeledContour, MIN_HOLE_PIXELS,
};
pub use format::{assemble, decode, encode, encode_tile, CompressedMap, CompressedTile, DecodeError, EncodeError};
pub use raster::{rasterize, LabelImage, RasterTileId, Region, TopViewRaster, RASTER_SIZE};

use crate::grid::{axis_index, CellScores, GridIndex, SemanticGridMap};

/// Rasterize `map` inside `region` and extract the contours of every tile.
/// Tiles without marking contours are omitted.
pub fn compress(map: &SemanticGridMap, region: &Region) -> CompressedMap {
    let tiles = rasterize(map, region)
        .iter()
        .filter_map(|r| {
            let contours = extract_contours(r);
            if contours.is_empty() {
                return None;
            }
            let (ox, oy) = r.origin();
            Some(CompressedTile::new(ox, oy, contours))
        })
        .collect();
    CompressedMap { tiles }
}

/// Fill every tile and emit one single-vote cell per labeled pixel, at the
/// stored elevation of the region it belongs to.
pub fn decompress_to_map(cm: &CompressedMap) -> Result<SemanticGridMap, ContourError> {
    let mut map = SemanticGridMap::new();
    for t in &cm.tiles {
        let filled = fill_with_source(&t.contours, RASTER_SIZE, RASTER_SIZE)?;
        let (ix0, iy0) = RasterTileId::from_origin(t.origin_x, t.origin_y).first_cell();
        for py in 0..RASTER_SIZE {
            for px in 0..RASTER_SIZE {
                let k = py * RASTER_SIZE + px;
                let Some(label) = filled.image.labels[k] else {
                    continue;
                };
                let z = t.contours[filled.source[k] as usize].mean_z;
                let idx = GridIndex::new(ix0 + px as i64, iy0 + py as i64, axis_index(z));
                map.add_cell(idx, &CellScores::single(label));
            }
        }
    }
    Ok(map)
}
