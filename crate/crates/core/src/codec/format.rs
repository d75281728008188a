//! Compressed map container ("SMAP").
//!
//! ```text
//! header   magic "SMAP" | u16 version = 1 | u32 tile_count
//! tile     f64 origin_x | f64 origin_y | f32 base_z | u16 contour_count
//! contour  u8 label | u8 flags (bit0 = hole) | i16 z_offset_cm | u16 point_count
//!          u16 x | u16 y | deltas...
//! delta    i8 dx | i8 dy          when dx in [-127, 127] and dy in [-128, 127]
//!          0x80 | i16 dx | i16 dy otherwise
//! ```
//!
//! Little-endian throughout. A leading 0x80 byte always introduces the wide
//! form, so `dx = -128` is written wide.

use super::contour::{ContourPoint, LabeledContour};
use crate::grid::SemanticLabel;
use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

pub const MAP_MAGIC: &[u8; 4] = b"SMAP";
pub const MAP_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;
pub const TILE_HEADER_LEN: usize = 22;
pub const CONTOUR_HEADER_LEN: usize = 6;

const ESCAPE: u8 = 0x80;
const FLAG_HOLE: u8 = 1;

/// One codec tile: contours in pixel coordinates relative to `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTile {
    pub origin_x: f64,
    pub origin_y: f64,
    pub base_z: f32,
    pub contours: Vec<LabeledContour>,
}

impl CompressedTile {
    /// Build a tile, choosing `base_z` from the contours and snapping each
    /// `mean_z` to the value the format can store.
    pub fn new(origin_x: f64, origin_y: f64, mut contours: Vec<LabeledContour>) -> Self {
        let base_z = if contours.is_empty() {
            0.0
        } else {
            let s: f64 = contours.iter().map(|c| c.mean_z).sum();
            ((s / contours.len() as f64) * 100.0).round() as f32 / 100.0
        };
        for c in contours.iter_mut() {
            c.mean_z = dequantize(base_z, quantize(base_z, c.mean_z));
        }
        Self {
            origin_x,
            origin_y,
            base_z,
            contours,
        }
    }
}

fn quantize(base_z: f32, z: f64) -> i16 {
    ((z - base_z as f64) * 100.0)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn dequantize(base_z: f32, off: i16) -> f64 {
    base_z as f64 + off as f64 / 100.0
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressedMap {
    pub tiles: Vec<CompressedTile>,
}

impl CompressedMap {
    pub fn contour_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contours.len()).sum()
    }

    pub fn point_count(&self) -> usize {
        self.tiles
            .iter()
            .flat_map(|t| &t.contours)
            .map(|c| c.points.len())
            .sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("tile {tile} has {count} contours, the format allows 65535")]
    TooManyContours { tile: usize, count: usize },
    #[error("contour {contour} of tile {tile} has {count} points, the format allows 1 to 65535")]
    PointCount {
        tile: usize,
        contour: usize,
        count: usize,
    },
    #[error("contour {contour} of tile {tile} has a step too large to encode")]
    StepTooLarge { tile: usize, contour: usize },
    #[error("contour {contour} of tile {tile} stores z {z} m outside the offset range")]
    ZOutOfRange { tile: usize, contour: usize, z: f64 },
    #[error("map has more tiles than the format allows")]
    TooManyTiles,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("truncated input at offset {offset}")]
    Truncated { offset: usize },
    #[error("invalid label code {code} at offset {offset}")]
    InvalidLabel { code: u8, offset: usize },
    #[error("invalid contour flags {flags:#04x} at offset {offset}")]
    InvalidFlags { flags: u8, offset: usize },
    #[error("contour with no points at offset {offset}")]
    EmptyContour { offset: usize },
    #[error("point leaves the u16 coordinate range at offset {offset}")]
    PointOutOfRange { offset: usize },
    #[error("wide delta that fits the short form at offset {offset}")]
    NonCanonicalDelta { offset: usize },
    #[error("z offset does not survive the tile base precision at offset {offset}")]
    ZPrecision { offset: usize },
    #[error("non-finite tile field at offset {offset}")]
    NonFinite { offset: usize },
    #[error("{count} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::BadMagic { offset }
            | DecodeError::UnsupportedVersion { offset, .. }
            | DecodeError::Truncated { offset }
            | DecodeError::InvalidLabel { offset, .. }
            | DecodeError::InvalidFlags { offset, .. }
            | DecodeError::EmptyContour { offset }
            | DecodeError::PointOutOfRange { offset }
            | DecodeError::NonCanonicalDelta { offset }
            | DecodeError::ZPrecision { offset }
            | DecodeError::NonFinite { offset }
            | DecodeError::TrailingBytes { offset, .. } => offset,
        }
    }
}

fn short_form(dx: i32, dy: i32) -> bool {
    (-127..=127).contains(&dx) && (-128..=127).contains(&dy)
}

pub fn encode(cm: &CompressedMap) -> Result<Vec<u8>, EncodeError> {
    let blocks = cm
        .tiles
        .iter()
        .enumerate()
        .map(|(ti, t)| encode_tile(t, ti))
        .collect::<Result<Vec<_>, _>>()?;
    assemble(blocks.iter().map(Vec::as_slice))
}

/// Header followed by already-encoded tile records, in order.
pub fn assemble<'a>(blocks: impl IntoIterator<Item = &'a [u8]>) -> Result<Vec<u8>, EncodeError> {
    let blocks: Vec<&[u8]> = blocks.into_iter().collect();
    let n = u32::try_from(blocks.len()).map_err(|_| EncodeError::TooManyTiles)?;
    let mut out = Vec::with_capacity(HEADER_LEN + blocks.iter().map(|b| b.len()).sum::<usize>());
    out.extend_from_slice(MAP_MAGIC);
    out.write_u16::<LittleEndian>(MAP_VERSION).unwrap();
    out.write_u32::<LittleEndian>(n).unwrap();
    for b in blocks {
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// One tile record. `ti` only labels errors.
pub fn encode_tile(t: &CompressedTile, ti: usize) -> Result<Vec<u8>, EncodeError> {
    let count = u16::try_from(t.contours.len()).map_err(|_| EncodeError::TooManyContours {
        tile: ti,
        count: t.contours.len(),
    })?;
    let points: usize = t.contours.iter().map(|c| c.points.len()).sum();
    let mut out = Vec::with_capacity(TILE_HEADER_LEN + t.contours.len() * CONTOUR_HEADER_LEN + points * 2);
    out.write_f64::<LittleEndian>(t.origin_x).unwrap();
    out.write_f64::<LittleEndian>(t.origin_y).unwrap();
    out.write_f32::<LittleEndian>(t.base_z).unwrap();
    out.write_u16::<LittleEndian>(count).unwrap();
    for (ci, c) in t.contours.iter().enumerate() {
        let np = c.points.len();
        if np == 0 || np > u16::MAX as usize {
            return Err(EncodeError::PointCount {
                tile: ti,
                contour: ci,
                count: np,
            });
        }
        let off = ((c.mean_z - t.base_z as f64) * 100.0).round();
        if !(i16::MIN as f64..=i16::MAX as f64).contains(&off) {
            return Err(EncodeError::ZOutOfRange {
                tile: ti,
                contour: ci,
                z: c.mean_z,
            });
        }
        out.push(c.label.code());
        out.push(if c.is_hole { FLAG_HOLE } else { 0 });
        out.write_i16::<LittleEndian>(off as i16).unwrap();
        out.write_u16::<LittleEndian>(np as u16).unwrap();
        out.write_u16::<LittleEndian>(c.points[0].x).unwrap();
        out.write_u16::<LittleEndian>(c.points[0].y).unwrap();
        for w in c.points.windows(2) {
            let dx = w[1].x as i32 - w[0].x as i32;
            let dy = w[1].y as i32 - w[0].y as i32;
            if short_form(dx, dy) {
                out.push(dx as i8 as u8);
                out.push(dy as i8 as u8);
            } else {
                let (Ok(dx), Ok(dy)) = (i16::try_from(dx), i16::try_from(dy)) else {
                    return Err(EncodeError::StepTooLarge {
                        tile: ti,
                        contour: ci,
                    });
                };
                out.push(ESCAPE);
                out.write_i16::<LittleEndian>(dx).unwrap();
                out.write_i16::<LittleEndian>(dy).unwrap();
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
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let s = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or(DecodeError::Truncated { offset: self.pos })?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.take().map(u16::from_le_bytes)
    }

    fn i16(&mut self) -> Result<i16, DecodeError> {
        self.take().map(i16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32, DecodeError> {
        self.take().map(f32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        self.take().map(f64::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<CompressedMap, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take::<4>().map_err(|_| DecodeError::BadMagic { offset: 0 })? != *MAP_MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    let version = r.u16()?;
    if version != MAP_VERSION {
        return Err(DecodeError::UnsupportedVersion { version, offset: 4 });
    }
    let tile_count = r.u32()? as usize;
    if tile_count > r.remaining() / TILE_HEADER_LEN {
        return Err(DecodeError::Truncated { offset: r.pos });
    }
    let mut tiles = Vec::with_capacity(tile_count);
    for _ in 0..tile_count {
        let at = r.pos;
        let origin_x = r.f64()?;
        let origin_y = r.f64()?;
        let base_z = r.f32()?;
        if !(origin_x.is_finite() && origin_y.is_finite() && base_z.is_finite()) {
            return Err(DecodeError::NonFinite { offset: at });
        }
        let contour_count = r.u16()? as usize;
        let mut contours = Vec::with_capacity(contour_count.min(r.remaining() / CONTOUR_HEADER_LEN));
        for _ in 0..contour_count {
            let at = r.pos;
            let code = r.u8()?;
            let label = SemanticLabel::from_code(code).ok_or(DecodeError::InvalidLabel { code, offset: at })?;
            let flags = r.u8()?;
            if flags & !FLAG_HOLE != 0 {
                return Err(DecodeError::InvalidFlags {
                    flags,
                    offset: at + 1,
                });
            }
            let off = r.i16()?;
            let mean_z = dequantize(base_z, off);
            if quantize(base_z, mean_z) != off {
                return Err(DecodeError::ZPrecision { offset: at + 2 });
            }
            let np = r.u16()? as usize;
            if np == 0 {
                return Err(DecodeError::EmptyContour { offset: at });
            }
            // Every delta takes at least two bytes.
            if 4 + (np - 1) * 2 > r.remaining() {
                return Err(DecodeError::Truncated { offset: r.pos });
            }
            let mut points = Vec::with_capacity(np);
            let mut p = ContourPoint::new(r.u16()?, r.u16()?);
            points.push(p);
            for _ in 1..np {
                let at = r.pos;
                let b = r.u8()?;
                let (dx, dy) = if b == ESCAPE {
                    let dx = r.i16()? as i32;
                    let dy = r.i16()? as i32;
                    if short_form(dx, dy) {
                        return Err(DecodeError::NonCanonicalDelta { offset: at });
                    }
                    (dx, dy)
                } else {
                    (b as i8 as i32, r.u8()? as i8 as i32)
                };
                let x = u16::try_from(p.x as i32 + dx).map_err(|_| DecodeError::PointOutOfRange { offset: at })?;
                let y = u16::try_from(p.y as i32 + dy).map_err(|_| DecodeError::PointOutOfRange { offset: at })?;
                p = ContourPoint::new(x, y);
                points.push(p);
            }
            contours.push(LabeledContour {
                label,
                is_hole: flags & FLAG_HOLE != 0,
                points,
                mean_z,
            });
        }
        tiles.push(CompressedTile {
            origin_x,
            origin_y,
            base_z,
            contours,
        });
    }
    if r.remaining() != 0 {
        return Err(DecodeError::TrailingBytes {
            offset: r.pos,
            count: r.remaining(),
        });
    }
    Ok(CompressedMap { tiles })
}
