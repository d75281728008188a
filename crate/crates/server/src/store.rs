//! Durable state: an append-only journal of acknowledged sessions plus a
//! periodic checkpoint of every tile.
//!
//! ```text
//! journal     record*
//! record      u32 body_len | u32 crc32(body) | body
//! body        u64 version | u64 updated_at_ms | str vehicle_id | str session_id
//!             | u32 payload_len | payload (SGUP)
//! str         u16 len | utf-8 bytes
//!
//! checkpoint  "SCKP" | u16 1 | u32 crc32(rest) | rest
//! rest        u64 version | u64 merged_sessions | u64 updated_at_ms
//!             | u32 n_sessions | n × (str session_id | u64 version)
//!             | u32 n_tiles | n × (i32 tx | i32 ty | u32 len | SGUP block)
//! ```
//!
//! A session is acknowledged only after its journal record is synced, so
//! replaying the checkpoint and then every intact journal record restores
//! exactly the acknowledged merge set. A torn tail record from a crash is
//! cut off on open.

use crate::{MapVersion, ServerError};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use semmap::grid::{decode_upload, encode_upload, CellScores, GridIndex, SemanticGridMap, TileCells, TileId};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const JOURNAL: &str = "journal.bin";
const CHECKPOINT: &str = "checkpoint.bin";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
const CHECKPOINT_VERSION: u16 = 1;

/// One acknowledged session as written to the journal.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalRecord {
    pub version: u64,
    pub updated_at_ms: u64,
    pub vehicle_id: String,
    pub session_id: String,
    pub payload: Vec<u8>,
}

/// Everything recovered on open.
#[derive(Debug, Clone, Default)]
pub struct Recovered {
    pub tiles: BTreeMap<TileId, TileCells>,
    pub sessions: HashMap<String, u64>,
    pub version: u64,
    pub merged_sessions: u64,
    pub updated_at_ms: u64,
}

impl Recovered {
    pub fn meta(&self) -> MapVersion {
        MapVersion {
            version: self.version,
            merged_sessions: self.merged_sessions,
            updated_at_ms: self.updated_at_ms,
        }
    }

    fn apply(&mut self, rec: &JournalRecord) -> Result<(), ServerError> {
        let cells = decode_upload(&rec.payload)
            .map_err(|e| ServerError::Corrupt(format!("journal record v{}: {e}", rec.version)))?;
        merge_cells(&mut self.tiles, &cells);
        self.sessions.insert(rec.session_id.clone(), rec.version);
        self.version = rec.version;
        self.merged_sessions += 1;
        self.updated_at_ms = rec.updated_at_ms;
        Ok(())
    }
}

/// Add `cells` into per-tile maps.
pub fn merge_cells(tiles: &mut BTreeMap<TileId, TileCells>, cells: &[(GridIndex, CellScores)]) {
    for (idx, s) in cells {
        tiles.entry(idx.tile()).or_default().entry(*idx).or_default().add(s);
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) -> Result<(), ServerError> {
    let n = u16::try_from(s.len()).map_err(|_| ServerError::BadRequest(format!("identifier longer than {} bytes", u16::MAX)))?;
    b.write_u16::<LE>(n).unwrap();
    b.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(c: &mut Cursor<&[u8]>) -> io::Result<String> {
    let n = c.read_u16::<LE>()? as usize;
    let mut v = vec![0; n];
    c.read_exact(&mut v)?;
    String::from_utf8(v).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn encode_record(rec: &JournalRecord) -> Result<Vec<u8>, ServerError> {
    let mut body = Vec::with_capacity(32 + rec.payload.len());
    body.write_u64::<LE>(rec.version).unwrap();
    body.write_u64::<LE>(rec.updated_at_ms).unwrap();
    put_str(&mut body, &rec.vehicle_id)?;
    put_str(&mut body, &rec.session_id)?;
    body.write_u32::<LE>(rec.payload.len() as u32).unwrap();
    body.extend_from_slice(&rec.payload);
    let mut out = Vec::with_capacity(body.len() + 8);
    out.write_u32::<LE>(body.len() as u32).unwrap();
    out.write_u32::<LE>(crc32fast::hash(&body)).unwrap();
    out.extend_from_slice(&body);
    Ok(out)
}

fn decode_body(body: &[u8]) -> io::Result<JournalRecord> {
    let mut c = Cursor::new(body);
    let version = c.read_u64::<LE>()?;
    let updated_at_ms = c.read_u64::<LE>()?;
    let vehicle_id = get_str(&mut c)?;
    let session_id = get_str(&mut c)?;
    let n = c.read_u32::<LE>()? as usize;
    let mut payload = vec![0; n];
    c.read_exact(&mut payload)?;
    if c.position() as usize != body.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes in journal record"));
    }
    Ok(JournalRecord {
        version,
        updated_at_ms,
        vehicle_id,
        session_id,
        payload,
    })
}

/// Intact records from the start of `bytes` and the length they span.
pub fn scan_journal(bytes: &[u8]) -> (Vec<JournalRecord>, usize) {
    let mut recs = Vec::new();
    let mut at = 0;
    while bytes.len() - at >= 8 {
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
        let Some(body) = bytes.get(at + 8..at + 8 + len) else { break };
        if crc32fast::hash(body) != crc {
            break;
        }
        let Ok(rec) = decode_body(body) else { break };
        recs.push(rec);
        at += 8 + len;
    }
    (recs, at)
}

fn encode_checkpoint<'a>(
    meta: &MapVersion,
    sessions: &HashMap<String, u64>,
    tiles: impl ExactSizeIterator<Item = (&'a TileId, &'a TileCells)>,
) -> Result<Vec<u8>, ServerError> {
    let mut rest = Vec::new();
    rest.write_u64::<LE>(meta.version).unwrap();
    rest.write_u64::<LE>(meta.merged_sessions).unwrap();
    rest.write_u64::<LE>(meta.updated_at_ms).unwrap();
    let mut sessions: Vec<(&String, &u64)> = sessions.iter().collect();
    sessions.sort();
    rest.write_u32::<LE>(sessions.len() as u32).unwrap();
    for (id, v) in sessions {
        put_str(&mut rest, id)?;
        rest.write_u64::<LE>(*v).unwrap();
    }
    rest.write_u32::<LE>(tiles.len() as u32).unwrap();
    for (id, cells) in tiles {
        let mut m = SemanticGridMap::new();
        m.set_tile(*id, cells.clone());
        let block = encode_upload(&m).map_err(|e| ServerError::Store(e.to_string()))?;
        rest.write_i32::<LE>(id.tx).unwrap();
        rest.write_i32::<LE>(id.ty).unwrap();
        rest.write_u32::<LE>(block.len() as u32).unwrap();
        rest.extend_from_slice(&block);
    }
    let mut out = Vec::with_capacity(rest.len() + 10);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u16::<LE>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LE>(crc32fast::hash(&rest)).unwrap();
    out.extend_from_slice(&rest);
    Ok(out)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Recovered, ServerError> {
    let bad = |m: &str| ServerError::Corrupt(format!("checkpoint: {m}"));
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let crc = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let rest = &bytes[10..];
    if crc32fast::hash(rest) != crc {
        return Err(bad("checksum mismatch"));
    }
    let read = || -> io::Result<Recovered> {
        let mut c = Cursor::new(rest);
        let mut r = Recovered {
            version: c.read_u64::<LE>()?,
            merged_sessions: c.read_u64::<LE>()?,
            updated_at_ms: c.read_u64::<LE>()?,
            ..Recovered::default()
        };
        for _ in 0..c.read_u32::<LE>()? {
            let id = get_str(&mut c)?;
            r.sessions.insert(id, c.read_u64::<LE>()?);
        }
        for _ in 0..c.read_u32::<LE>()? {
            let id = TileId {
                tx: c.read_i32::<LE>()?,
                ty: c.read_i32::<LE>()?,
            };
            let mut block = vec![0; c.read_u32::<LE>()? as usize];
            c.read_exact(&mut block)?;
            let cells = decode_upload(&block).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            r.tiles.insert(id, cells.into_iter().collect());
        }
        Ok(r)
    };
    read().map_err(|e| bad(&e.to_string()))
}

/// Journal and checkpoint files in one directory.
#[derive(Debug)]
pub struct DiskStore {
    dir: PathBuf,
    journal: File,
    since_checkpoint: u64,
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl DiskStore {
    /// Open (creating if needed) and recover the acknowledged state.
    pub fn open(dir: &Path) -> Result<(Self, Recovered), ServerError> {
        fs::create_dir_all(dir)?;
        let mut state = match fs::read(dir.join(CHECKPOINT)) {
            Ok(b) => decode_checkpoint(&b)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Recovered::default(),
            Err(e) => return Err(e.into()),
        };
        let path = dir.join(JOURNAL);
        let mut journal = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        journal.read_to_end(&mut bytes)?;
        let (recs, good) = scan_journal(&bytes);
        let mut since_checkpoint = 0;
        for rec in &recs {
            if rec.version <= state.version {
                continue;
            }
            if rec.version != state.version + 1 {
                return Err(ServerError::Corrupt(format!(
                    "journal jumps from version {} to {}",
                    state.version, rec.version
                )));
            }
            state.apply(rec)?;
            since_checkpoint += 1;
        }
        if good < bytes.len() {
            log::warn!("dropping {} bytes of torn journal tail", bytes.len() - good);
            journal.set_len(good as u64)?;
            journal.sync_all()?;
        }
        journal.seek(SeekFrom::End(0))?;
        Ok((
            Self {
                dir: dir.to_path_buf(),
                journal,
                since_checkpoint,
            },
            state,
        ))
    }

    /// Append and sync one record. On failure the journal is cut back so a
    /// later append never follows a torn record.
    pub fn append(&mut self, rec: &JournalRecord) -> Result<(), ServerError> {
        let bytes = encode_record(rec)?;
        let before = self.journal.metadata()?.len();
        let res = self.journal.write_all(&bytes).and_then(|_| self.journal.sync_data());
        if let Err(e) = res {
            let _ = self.journal.set_len(before);
            return Err(ServerError::Store(e.to_string()));
        }
        self.since_checkpoint += 1;
        Ok(())
    }

    pub fn since_checkpoint(&self) -> u64 {
        self.since_checkpoint
    }

    /// Replace the checkpoint with the given state and empty the journal.
    /// The caller must hold off appends until this returns.
    pub fn checkpoint<'a>(
        &mut self,
        meta: &MapVersion,
        sessions: &HashMap<String, u64>,
        tiles: impl ExactSizeIterator<Item = (&'a TileId, &'a TileCells)>,
    ) -> Result<(), ServerError> {
        let bytes = encode_checkpoint(meta, sessions, tiles)?;
        let tmp = self.dir.join("checkpoint.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(CHECKPOINT))?;
        sync_dir(&self.dir)?;
        // Every journal record is now covered by the checkpoint; a crash before the
        // truncation only leaves records that replay skips.
        self.journal.set_len(0)?;
        self.journal.sync_all()?;
        self.since_checkpoint = 0;
        Ok(())
    }
}
