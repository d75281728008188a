//! Occupied-cell upload payload ("SGUP").
//!
//! ```text
//! header   magic "SGUP" | u16 version = 1 | u32 tile_count
//! tile     i32 tile_x | i32 tile_y | u32 cell_count
//! cell     u24 (ix_local | iy_local << 12) | i16 iz | 5 x u16 counts
//! ```
//!
//! All integers little-endian. Local indices are the cell position inside
//! its 4096-cell merge tile.

use super::{CellScores, GridIndex, SemanticGridMap, TileId, TILE_CELLS};
use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

pub const UPLOAD_MAGIC: &[u8; 4] = b"SGUP";
pub const UPLOAD_VERSION: u16 = 1;

const HEADER_LEN: usize = 10;
#[cfg(test)]
const TILE_LEN: usize = 12;
const CELL_LEN: usize = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UploadError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported upload version {version} at offset {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("payload truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("cell with no votes at offset {offset}")]
    EmptyCell { offset: usize },
    #[error("{count} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("cell z index {iz} does not fit the upload format")]
    ZOutOfRange { iz: i64 },
    #[error("tile count exceeds the upload format")]
    TooLarge,
}

impl UploadError {
    /// Byte offset the parser stopped at, when known.
    pub fn offset(&self) -> Option<usize> {
        match self {
            UploadError::BadMagic { offset }
            | UploadError::UnsupportedVersion { offset, .. }
            | UploadError::Truncated { offset }
            | UploadError::EmptyCell { offset }
            | UploadError::TrailingBytes { offset, .. } => Some(*offset),
            UploadError::ZOutOfRange { .. } | UploadError::TooLarge => None,
        }
    }
}

/// Serialize every occupied cell of `map`.
pub fn encode_upload(map: &SemanticGridMap) -> Result<Vec<u8>, UploadError> {
    let tiles = map.tiles();
    let mut out = Vec::with_capacity(HEADER_LEN + map.cell_count() * CELL_LEN);
    out.extend_from_slice(UPLOAD_MAGIC);
    out.write_u16::<LittleEndian>(UPLOAD_VERSION).unwrap();
    let tile_count = u32::try_from(tiles.len()).map_err(|_| UploadError::TooLarge)?;
    out.write_u32::<LittleEndian>(tile_count).unwrap();
    for (id, cells) in tiles {
        out.write_i32::<LittleEndian>(id.tx).unwrap();
        out.write_i32::<LittleEndian>(id.ty).unwrap();
        let n = u32::try_from(cells.len()).map_err(|_| UploadError::TooLarge)?;
        out.write_u32::<LittleEndian>(n).unwrap();
        for (idx, s) in cells {
            let lx = idx.ix.rem_euclid(TILE_CELLS) as u32;
            let ly = idx.iy.rem_euclid(TILE_CELLS) as u32;
            let packed = lx | (ly << 12);
            out.extend_from_slice(&packed.to_le_bytes()[..3]);
            let iz = i16::try_from(idx.iz).map_err(|_| UploadError::ZOutOfRange { iz: idx.iz })?;
            out.write_i16::<LittleEndian>(iz).unwrap();
            for c in s.counts {
                out.write_u16::<LittleEndian>(c).unwrap();
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], UploadError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(UploadError::Truncated { offset: self.pos })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, UploadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16, UploadError> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, UploadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, UploadError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse an upload payload into its cell list, in payload order.
pub fn decode_upload(bytes: &[u8]) -> Result<Vec<(GridIndex, CellScores)>, UploadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| UploadError::BadMagic { offset: 0 })? != UPLOAD_MAGIC {
        return Err(UploadError::BadMagic { offset: 0 });
    }
    let version = r.u16()?;
    if version != UPLOAD_VERSION {
        return Err(UploadError::UnsupportedVersion { version, offset: 4 });
    }
    let tile_count = r.u32()?;
    let mut cells = Vec::new();
    for _ in 0..tile_count {
        let tile = TileId {
            tx: r.i32()?,
            ty: r.i32()?,
        };
        let cell_count = r.u32()? as usize;
        // Reject impossible counts before allocating anything.
        if cell_count > (bytes.len() - r.pos) / CELL_LEN {
            return Err(UploadError::Truncated { offset: r.pos });
        }
        cells.reserve(cell_count);
        for _ in 0..cell_count {
            let at = r.pos;
            let p = r.take(3)?;
            let packed = u32::from_le_bytes([p[0], p[1], p[2], 0]);
            let lx = (packed & 0xfff) as i64;
            let ly = (packed >> 12) as i64;
            let iz = r.i16()? as i64;
            let mut s = CellScores::default();
            for c in s.counts.iter_mut() {
                *c = r.u16()?;
            }
            if s.is_empty() {
                return Err(UploadError::EmptyCell { offset: at });
            }
            let idx = GridIndex::new(
                tile.tx as i64 * TILE_CELLS + lx,
                tile.ty as i64 * TILE_CELLS + ly,
                iz,
            );
            cells.push((idx, s));
        }
    }
    if r.pos != bytes.len() {
        return Err(UploadError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(cells)
}
