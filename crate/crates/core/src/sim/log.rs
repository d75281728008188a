//! SLOG drive logs.
//!
//! ```text
//! header  "SLOG" | u16 version | u32 image_w | u32 image_h | f64 frame_rate
//! record  u32 body_len | body
//! body    u32 index | f64 t | f64 s
//!         | f64×3 truth.p | f64×4 truth.q (w, x, y, z)
//!         | f64×3 odom.dp | f64×4 odom.dq (w, x, y, z)
//!         | u8 has_gnss | f64×3 gnss (present only when has_gnss = 1)
//!         | u32 pixel_count | pixel_count × (f32 u | f32 v | u8 label)
//! ```
//!
//! All integers and floats are little-endian.

use super::drive::{SensorFrame, SimFrame};
use super::render::LabeledPixel;
use crate::geometry::Pose;
use crate::grid::SemanticLabel;
use crate::posegraph::{GnssMeasurement, OdometryMeasurement};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::io::{self, Cursor, Read, Write};
use thiserror::Error;

pub const LOG_MAGIC: &[u8; 4] = b"SLOG";
pub const LOG_VERSION: u16 = 1;
pub const LOG_HEADER_LEN: usize = 22;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("not a drive log (bad magic)")]
    BadMagic,
    #[error("unsupported drive log version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated drive log at byte {offset}")]
    Truncated { offset: usize },
    #[error("corrupt record at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogHeader {
    pub image_w: u32,
    pub image_h: u32,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveLog {
    pub header: LogHeader,
    pub frames: Vec<SimFrame>,
}

impl DriveLog {
    /// Sensor channel only, as consumed by the mapping and localization stages.
    pub fn observations(&self) -> impl Iterator<Item = &SensorFrame> {
        self.frames.iter().map(|f| &f.observation)
    }

    /// Evaluation channel.
    pub fn truth(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.truth).collect()
    }
}

fn put_vec3<W: Write>(w: &mut W, v: &Vector3<f64>) -> io::Result<()> {
    for c in v.iter() {
        w.write_f64::<LE>(*c)?;
    }
    Ok(())
}

fn put_quat<W: Write>(w: &mut W, q: &UnitQuaternion<f64>) -> io::Result<()> {
    for c in [q.w, q.i, q.j, q.k] {
        w.write_f64::<LE>(c)?;
    }
    Ok(())
}

fn encode_frame(f: &SimFrame) -> Vec<u8> {
    let o = &f.observation;
    let mut b = Vec::with_capacity(128 + o.pixels.len() * 9);
    // Writes into a Vec cannot fail.
    b.write_u32::<LE>(o.index).unwrap();
    b.write_f64::<LE>(o.t).unwrap();
    b.write_f64::<LE>(f.s).unwrap();
    put_vec3(&mut b, &f.truth.p).unwrap();
    put_quat(&mut b, &f.truth.q).unwrap();
    put_vec3(&mut b, &o.odom.dp).unwrap();
    put_quat(&mut b, &o.odom.dq).unwrap();
    match &o.gnss {
        Some(g) => {
            b.push(1);
            put_vec3(&mut b, &g.p).unwrap();
        }
        None => b.push(0),
    }
    b.write_u32::<LE>(o.pixels.len() as u32).unwrap();
    for p in &o.pixels {
        b.write_f32::<LE>(p.u).unwrap();
        b.write_f32::<LE>(p.v).unwrap();
        b.push(p.label.code());
    }
    b
}

pub fn write_log<W: Write>(mut w: W, header: &LogHeader, frames: &[SimFrame]) -> io::Result<()> {
    w.write_all(LOG_MAGIC)?;
    w.write_u16::<LE>(LOG_VERSION)?;
    w.write_u32::<LE>(header.image_w)?;
    w.write_u32::<LE>(header.image_h)?;
    w.write_f64::<LE>(header.frame_rate)?;
    for f in frames {
        let body = encode_frame(f);
        w.write_u32::<LE>(body.len() as u32)?;
        w.write_all(&body)?;
    }
    Ok(())
}

pub fn encode_log(header: &LogHeader, frames: &[SimFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    write_log(&mut out, header, frames).expect("in-memory write");
    out
}

struct Body<'a> {
    c: Cursor<&'a [u8]>,
    base: usize,
}

impl Body<'_> {
    fn at(&self) -> usize {
        self.base + self.c.position() as usize
    }

    fn trunc<T>(&self, r: io::Result<T>) -> Result<T, LogError> {
        r.map_err(|_| LogError::Truncated { offset: self.at() })
    }

    fn f64(&mut self) -> Result<f64, LogError> {
        let at = self.at();
        let v = self.c.read_f64::<LE>();
        let v = self.trunc(v)?;
        if !v.is_finite() {
            return Err(LogError::Corrupt {
                offset: at,
                reason: "non-finite value".into(),
            });
        }
        Ok(v)
    }

    fn vec3(&mut self) -> Result<Vector3<f64>, LogError> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn quat(&mut self) -> Result<UnitQuaternion<f64>, LogError> {
        let at = self.at();
        let (w, x, y, z) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(LogError::Corrupt {
                offset: at,
                reason: "rotation is not a unit quaternion".into(),
            });
        }
        Ok(UnitQuaternion::new_unchecked(q))
    }
}

fn decode_frame(body: &[u8], base: usize) -> Result<SimFrame, LogError> {
    let mut r = Body {
        c: Cursor::new(body),
        base,
    };
    let index = r.c.read_u32::<LE>();
    let index = r.trunc(index)?;
    let t = r.f64()?;
    let s = r.f64()?;
    let truth = Pose::new(r.vec3()?, r.quat()?);
    let odom = OdometryMeasurement {
        dp: r.vec3()?,
        dq: r.quat()?,
    };
    let flag_at = r.at();
    let flag = r.c.read_u8();
    let gnss = match r.trunc(flag)? {
        0 => None,
        1 => Some(GnssMeasurement { p: r.vec3()? }),
        v => {
            return Err(LogError::Corrupt {
                offset: flag_at,
                reason: format!("GNSS flag {v}"),
            })
        }
    };
    let n = r.c.read_u32::<LE>();
    let n = r.trunc(n)? as usize;
    let remaining = body.len() - r.c.position() as usize;
    if n.checked_mul(9) != Some(remaining) {
        return Err(LogError::Corrupt {
            offset: r.at(),
            reason: format!("{n} pixels do not fit a {remaining}-byte remainder"),
        });
    }
    let mut pixels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.at();
        let (u, v) = (r.c.read_f32::<LE>().unwrap(), r.c.read_f32::<LE>().unwrap());
        let code = r.c.read_u8().unwrap();
        let label = SemanticLabel::from_code(code).ok_or_else(|| LogError::Corrupt {
            offset: at + 8,
            reason: format!("label code {code}"),
        })?;
        if !(u.is_finite() && v.is_finite()) {
            return Err(LogError::Corrupt {
                offset: at,
                reason: "non-finite pixel".into(),
            });
        }
        pixels.push(LabeledPixel { u, v, label });
    }
    Ok(SimFrame {
        observation: SensorFrame {
            index,
            t,
            pixels,
            gnss,
            odom,
        },
        truth,
        s,
    })
}

pub fn decode_log(bytes: &[u8]) -> Result<DriveLog, LogError> {
    if bytes.len() < 4 || &bytes[..4] != LOG_MAGIC {
        return Err(LogError::BadMagic);
    }
    if bytes.len() < LOG_HEADER_LEN {
        return Err(LogError::Truncated { offset: bytes.len() });
    }
    let mut c = Cursor::new(&bytes[4..LOG_HEADER_LEN]);
    let version = c.read_u16::<LE>()?;
    if version != LOG_VERSION {
        return Err(LogError::UnsupportedVersion(version));
    }
    let header = LogHeader {
        image_w: c.read_u32::<LE>()?,
        image_h: c.read_u32::<LE>()?,
        frame_rate: c.read_f64::<LE>()?,
    };
    if !(header.frame_rate > 0.0 && header.frame_rate.is_finite()) {
        return Err(LogError::Corrupt {
            offset: 14,
            reason: "frame rate must be positive".into(),
        });
    }
    let mut frames = Vec::new();
    let mut at = LOG_HEADER_LEN;
    while at < bytes.len() {
        let mut len = [0u8; 4];
        (&bytes[at..]).read_exact(&mut len).map_err(|_| LogError::Truncated { offset: at })?;
        let len = u32::from_le_bytes(len) as usize;
        let start = at + 4;
        let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(LogError::Truncated { offset: at })?;
        frames.push(decode_frame(&bytes[start..end], start)?);
        at = end;
    }
    Ok(DriveLog { header, frames })
}
