use crate::store::{DiskStore, JournalRecord};
use crate::{MapVersion, ServerError};
use semmap::codec::{assemble, compress, encode_tile, RasterTileId, Region};
use semmap::grid::{decode_upload, encode_upload, CellScores, GridIndex, SemanticGridMap, TileCells, TileId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

/// One vehicle session as received from the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionUpload {
    pub vehicle_id: String,
    pub session_id: String,
    /// SGUP occupied-cell payload.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadAck {
    pub version: u64,
    /// The session had already been merged; nothing changed.
    pub duplicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub version: u64,
    pub tile_count: usize,
    pub merged_sessions: u64,
    pub updated_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompactStats {
    pub tiles: usize,
    pub raster_tiles: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    /// Write a checkpoint once this many sessions sit in the journal.
    pub checkpoint_every: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { checkpoint_every: 256 }
    }
}

#[derive(Debug, Clone)]
struct TileEntry {
    cells: Arc<TileCells>,
    /// Version that last changed this tile.
    generation: u64,
}

/// Immutable view of the map at one version.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    meta: MapVersion,
    tiles: BTreeMap<TileId, TileEntry>,
}

impl Snapshot {
    pub fn meta(&self) -> MapVersion {
        self.meta
    }

    pub fn version(&self) -> u64 {
        self.meta.version
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn tile_ids(&self) -> impl Iterator<Item = TileId> + '_ {
        self.tiles.keys().copied()
    }

    pub fn tile(&self, id: &TileId) -> Option<&TileCells> {
        self.tiles.get(id).map(|e| e.cells.as_ref())
    }

    pub fn to_map(&self) -> SemanticGridMap {
        let mut m = SemanticGridMap::new();
        for (id, e) in &self.tiles {
            m.set_tile(*id, e.cells.as_ref().clone());
        }
        m
    }
}

type Blocks = Arc<BTreeMap<RasterTileId, Vec<u8>>>;

#[derive(Debug)]
struct Commit {
    store: Option<DiskStore>,
    config: ServerConfig,
}

/// The aggregation service.
///
/// Writers lock only the merge tiles their payload touches, in sorted
/// order, and build replacement tiles off to the side. The short commit
/// step assigns the version, journals the session and publishes a new
/// snapshot. Readers clone the current snapshot and never block writers.
#[derive(Debug)]
pub struct MapServer {
    snapshot: RwLock<Arc<Snapshot>>,
    sessions: RwLock<HashMap<String, u64>>,
    tile_locks: Mutex<HashMap<TileId, Arc<Mutex<()>>>>,
    commit: Mutex<Commit>,
    cache: Mutex<HashMap<TileId, (u64, Blocks)>>,
    dirty: Mutex<BTreeSet<TileId>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Encoded SMAP tile records of one merge tile, keyed by codec tile.
fn encode_blocks(id: TileId, cells: &TileCells) -> Result<BTreeMap<RasterTileId, Vec<u8>>, ServerError> {
    let mut m = SemanticGridMap::new();
    m.set_tile(id, cells.clone());
    compress(&m, &Region::everything())
        .tiles
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((RasterTileId::from_origin(t.origin_x, t.origin_y), encode_tile(t, i)?)))
        .collect()
}

fn tile_region(id: TileId) -> Region {
    let (x0, y0, x1, y1) = id.bounds();
    Region::new(x0, y0, x1, y1)
}

fn overlaps(a: &Region, b: &Region) -> bool {
    a.min_x < b.max_x && a.max_x > b.min_x && a.min_y < b.max_y && a.max_y > b.min_y
}

impl MapServer {
    /// A server without persistence.
    pub fn in_memory() -> Self {
        Self::from_parts(None, Snapshot::default(), HashMap::new(), ServerConfig::default())
    }

    /// Open or create a durable server in `dir`.
    pub fn open(dir: &Path, config: ServerConfig) -> Result<Self, ServerError> {
        let (store, rec) = DiskStore::open(dir)?;
        let meta = rec.meta();
        let tiles = rec
            .tiles
            .into_iter()
            .map(|(id, cells)| {
                (
                    id,
                    TileEntry {
                        cells: Arc::new(cells),
                        generation: meta.version,
                    },
                )
            })
            .collect();
        let server = Self::from_parts(Some(store), Snapshot { meta, tiles }, rec.sessions, config);
        let all: Vec<TileId> = server.snapshot().tile_ids().collect();
        lock(&server.dirty).extend(all);
        Ok(server)
    }

    fn from_parts(store: Option<DiskStore>, snap: Snapshot, sessions: HashMap<String, u64>, config: ServerConfig) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(snap)),
            sessions: RwLock::new(sessions),
            tile_locks: Mutex::new(HashMap::new()),
            commit: Mutex::new(Commit { store, config }),
            cache: Mutex::new(HashMap::new()),
            dirty: Mutex::new(BTreeSet::new()),
        }
    }

    /// The current snapshot. Later merges do not affect it.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn status(&self) -> Status {
        let s = self.snapshot();
        Status {
            version: s.meta.version,
            tile_count: s.tiles.len(),
            merged_sessions: s.meta.merged_sessions,
            updated_at_ms: s.meta.updated_at_ms,
        }
    }

    fn session_version(&self, id: &str) -> Option<u64> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).copied()
    }

    /// Validate and merge one session. A session id that was already merged
    /// is acknowledged with its original version and changes nothing.
    pub fn handle_upload(&self, up: &SessionUpload) -> Result<UploadAck, ServerError> {
        if up.session_id.is_empty() {
            return Err(ServerError::BadRequest("empty session id".into()));
        }
        if up.session_id.len() > u16::MAX as usize || up.vehicle_id.len() > u16::MAX as usize {
            return Err(ServerError::BadRequest("identifier too long".into()));
        }
        let cells = decode_upload(&up.payload)?;
        if let Some(version) = self.session_version(&up.session_id) {
            return Ok(UploadAck { version, duplicate: true });
        }

        let mut by_tile: BTreeMap<TileId, Vec<(GridIndex, CellScores)>> = BTreeMap::new();
        for (idx, s) in cells {
            by_tile.entry(idx.tile()).or_default().push((idx, s));
        }
        let locks: Vec<Arc<Mutex<()>>> = {
            let mut table = lock(&self.tile_locks);
            by_tile.keys().map(|id| table.entry(*id).or_default().clone()).collect()
        };
        // Sorted acquisition order rules out deadlock between writers.
        let _held: Vec<MutexGuard<'_, ()>> = locks.iter().map(|l| lock(l)).collect();

        // No other writer can touch these tiles now, so the current snapshot
        // holds their latest contents.
        let base = self.snapshot();
        let merged: Vec<(TileId, TileCells)> = by_tile
            .into_iter()
            .map(|(id, cells)| {
                let mut t = base.tiles.get(&id).map(|e| e.cells.as_ref().clone()).unwrap_or_default();
                for (idx, s) in &cells {
                    t.entry(*idx).or_default().add(s);
                }
                (id, t)
            })
            .collect();

        let mut commit = lock(&self.commit);
        if let Some(version) = self.session_version(&up.session_id) {
            return Ok(UploadAck { version, duplicate: true });
        }
        let cur = self.snapshot();
        let meta = MapVersion {
            version: cur.meta.version + 1,
            merged_sessions: cur.meta.merged_sessions + 1,
            updated_at_ms: now_ms(),
        };
        if let Some(store) = commit.store.as_mut() {
            store.append(&JournalRecord {
                version: meta.version,
                updated_at_ms: meta.updated_at_ms,
                vehicle_id: up.vehicle_id.clone(),
                session_id: up.session_id.clone(),
                payload: up.payload.clone(),
            })?;
        }
        let mut tiles = cur.tiles.clone();
        let mut touched = Vec::with_capacity(merged.len());
        for (id, cells) in merged {
            touched.push(id);
            tiles.insert(
                id,
                TileEntry {
                    cells: Arc::new(cells),
                    generation: meta.version,
                },
            );
        }
        // Session entry first so a concurrent duplicate that sees the new
        // snapshot also sees the session.
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(up.session_id.clone(), meta.version);
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(Snapshot { meta, tiles });
        lock(&self.dirty).extend(touched);

        let due = commit.store.as_ref().is_some_and(|s| s.since_checkpoint() >= commit.config.checkpoint_every);
        if due {
            if let Err(e) = self.checkpoint_locked(&mut commit) {
                // The session is already durable in the journal.
                log::warn!("checkpoint after v{} failed: {e}", meta.version);
            }
        }
        Ok(UploadAck {
            version: meta.version,
            duplicate: false,
        })
    }

    /// Persist the full state and empty the journal. No-op in memory.
    pub fn checkpoint(&self) -> Result<(), ServerError> {
        let mut commit = lock(&self.commit);
        self.checkpoint_locked(&mut commit)
    }

    fn checkpoint_locked(&self, commit: &mut Commit) -> Result<(), ServerError> {
        let Some(store) = commit.store.as_mut() else {
            return Ok(());
        };
        let snap = self.snapshot();
        let sessions = self.sessions.read().unwrap_or_else(|e| e.into_inner()).clone();
        store.checkpoint(&snap.meta, &sessions, snap.tiles.iter().map(|(id, e)| (id, e.cells.as_ref())))
    }

    fn blocks(&self, id: TileId, entry: &TileEntry) -> Result<Blocks, ServerError> {
        if let Some((g, b)) = lock(&self.cache).get(&id) {
            if *g == entry.generation {
                return Ok(b.clone());
            }
        }
        let b = Arc::new(encode_blocks(id, &entry.cells)?);
        self.store_blocks(id, entry.generation, b.clone());
        Ok(b)
    }

    fn store_blocks(&self, id: TileId, generation: u64, b: Blocks) {
        let mut cache = lock(&self.cache);
        // A racing compaction of an older snapshot must not win.
        if cache.get(&id).is_none_or(|(g, _)| *g <= generation) {
            cache.insert(id, (generation, b));
        }
    }

    /// SMAP bytes of every codec tile intersecting `region`, from one
    /// snapshot, plus that snapshot's version.
    pub fn handle_fetch_map(&self, region: &Region) -> Result<(Vec<u8>, u64), ServerError> {
        let snap = self.snapshot();
        let mut out: BTreeMap<RasterTileId, Blocks> = BTreeMap::new();
        if !region.is_empty() {
            for (id, e) in &snap.tiles {
                if !overlaps(&tile_region(*id), region) {
                    continue;
                }
                let b = self.blocks(*id, e)?;
                for rt in b.keys().filter(|rt| rt.intersects(region)) {
                    out.insert(*rt, b.clone());
                }
            }
        }
        let bytes = assemble(out.iter().map(|(rt, b)| b[rt].as_slice()))?;
        Ok((bytes, snap.meta.version))
    }

    /// Regenerate the cached SMAP blocks of `ids` from the current scores.
    pub fn compact(&self, ids: &[TileId]) -> Result<CompactStats, ServerError> {
        let snap = self.snapshot();
        let mut stats = CompactStats::default();
        for id in ids {
            let Some(e) = snap.tiles.get(id) else {
                lock(&self.cache).remove(id);
                continue;
            };
            let b = Arc::new(encode_blocks(*id, &e.cells)?);
            stats.tiles += 1;
            stats.raster_tiles += b.len();
            stats.bytes += b.values().map(Vec::len).sum::<usize>();
            self.store_blocks(*id, e.generation, b);
            let mut dirty = lock(&self.dirty);
            if self.snapshot().tiles.get(id).is_some_and(|cur| cur.generation == e.generation) {
                dirty.remove(id);
            }
        }
        Ok(stats)
    }

    /// Compact every tile changed since its last compaction.
    pub fn compact_dirty(&self) -> Result<CompactStats, ServerError> {
        let ids: Vec<TileId> = lock(&self.dirty).iter().copied().collect();
        self.compact(&ids)
    }

    pub fn dirty_tiles(&self) -> Vec<TileId> {
        lock(&self.dirty).iter().copied().collect()
    }

    /// Cached SMAP block of one codec tile, if present and current.
    pub fn cached_block(&self, raster: RasterTileId) -> Option<Vec<u8>> {
        let (x0, y0) = raster.first_cell();
        let id = GridIndex::new(x0, y0, 0).tile();
        let generation = self.snapshot().tiles.get(&id)?.generation;
        let cache = lock(&self.cache);
        let (g, b) = cache.get(&id)?;
        (*g == generation).then(|| b.get(&raster).cloned()).flatten()
    }

    /// The merged map in SGUP form. Equal stores give equal bytes.
    pub fn tile_store_bytes(&self) -> Result<Vec<u8>, ServerError> {
        Ok(encode_upload(&self.snapshot().to_map())?)
    }
}
