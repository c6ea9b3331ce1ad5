//! Descriptor database over reference tiles and exact top-K retrieval.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{load_features, synth_features, ImageStyle, LocalFeatureSet, SyntheticWorld};
use crate::geo::GeoPoint;
use crate::tiles::{TileGrid, TileRecord};
use crate::vlad::{encode, similarity, VladDescriptor, Vocabulary};

pub const DEFAULT_TOP_K: usize = 5;

const DB_MAGIC: &[u8; 4] = b"FLDB";

/// Source of satellite-domain features for a reference tile.
pub trait FeatureSource: Sync {
    fn tile_features(&self, tile: &TileRecord) -> Result<LocalFeatureSet>;
}

/// Renders tile features from a synthetic world.
pub struct SyntheticSatellite<'a> {
    pub world: &'a SyntheticWorld,
}

impl FeatureSource for SyntheticSatellite<'_> {
    fn tile_features(&self, tile: &TileRecord) -> Result<LocalFeatureSet> {
        // noise-free: the rng is never consulted
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        synth_features(self.world, &tile.center, tile.fov, ImageStyle::Satellite, 0.0, &mut rng)
    }
}

/// Reads `<dir>/<tile_id>.flf` for every tile.
pub struct FeatureDirectory {
    pub dir: PathBuf,
}

impl FeatureSource for FeatureDirectory {
    fn tile_features(&self, tile: &TileRecord) -> Result<LocalFeatureSet> {
        load_features(self.dir.join(format!("{}.flf", tile.tile_id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub tile_id: u32,
    pub position: GeoPoint,
    pub descriptor: VladDescriptor,
}

/// Tile descriptors in manifest order, tied to one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    entries: Vec<DbEntry>,
    n_c: usize,
    d: usize,
    vocab_fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub tile_id: u32,
    pub similarity: f64,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub matches: Vec<Match>,
}

impl RetrievalResult {
    pub fn tile_ids(&self) -> Vec<u32> {
        self.matches.iter().map(|m| m.tile_id).collect()
    }

    pub fn positions(&self) -> Vec<GeoPoint> {
        self.matches.iter().map(|m| m.position).collect()
    }
}

/// One satellite-style descriptor per tile, stored at `f32` precision.
pub fn db_build(grid: &TileGrid, vocab: &Vocabulary, provider: &dyn FeatureSource) -> Result<DescriptorDb> {
    if grid.is_empty() {
        return Err(Error::Empty("tile grid"));
    }
    let entries = grid
        .tiles()
        .par_iter()
        .map(|tile| {
            let wrap = |e: Error| Error::Tile {
                tile_id: tile.tile_id,
                source: Box::new(e),
            };
            let feats = provider.tile_features(tile).map_err(wrap)?;
            let descriptor = encode(&feats, vocab).map_err(wrap)?.to_f32_precision();
            Ok(DbEntry {
                tile_id: tile.tile_id,
                position: tile.center,
                descriptor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DescriptorDb::new(entries, vocab.n_c(), vocab.d(), vocab.fingerprint())
}

impl DescriptorDb {
    pub fn new(entries: Vec<DbEntry>, n_c: usize, d: usize, vocab_fingerprint: u64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("descriptor database"));
        }
        let mut ids: Vec<u32> = entries.iter().map(|e| e.tile_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("duplicate tile_id in descriptor database"));
        }
        for e in &entries {
            if e.descriptor.n_c() != n_c || e.descriptor.d() != d {
                return Err(Error::DimensionMismatch {
                    expected: n_c * d,
                    actual: e.descriptor.values().len(),
                });
            }
        }
        Ok(Self {
            entries,
            n_c,
            d,
            vocab_fingerprint,
        })
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    pub fn position(&self, tile_id: u32) -> Option<GeoPoint> {
        self.entries
            .iter()
            .find(|e| e.tile_id == tile_id)
            .map(|e| e.position)
    }

    pub fn descriptor(&self, tile_id: u32) -> Option<&VladDescriptor> {
        self.entries
            .iter()
            .find(|e| e.tile_id == tile_id)
            .map(|e| &e.descriptor)
    }

    /// Tile grid implied by the entry positions.
    pub fn tile_grid(&self, fov: f64) -> Result<TileGrid> {
        TileGrid::from_records(
            self.entries
                .iter()
                .map(|e| TileRecord {
                    tile_id: e.tile_id,
                    center: e.position,
                    fov,
                })
                .collect(),
        )
    }
}

/// Exact top-`k` by cosine similarity; ties by ascending tile id.
pub fn query_topk(db: &DescriptorDb, q: &VladDescriptor, k: usize) -> Result<RetrievalResult> {
    query_topk_named(db, q, k, "")
}

pub fn query_topk_named(
    db: &DescriptorDb,
    q: &VladDescriptor,
    k: usize,
    query_id: impl Into<String>,
) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::Empty("descriptor database"));
    }
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if q.vocab_fingerprint() != db.vocab_fingerprint {
        return Err(Error::FingerprintMismatch {
            database: db.vocab_fingerprint,
            query: q.vocab_fingerprint(),
        });
    }
    let mut scored = db
        .entries
        .iter()
        .map(|e| {
            Ok(Match {
                tile_id: e.tile_id,
                similarity: similarity(q, &e.descriptor)?.value,
                position: e.position,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.tile_id.cmp(&b.tile_id))
    });
    scored.truncate(k);
    Ok(RetrievalResult {
        query_id: query_id.into(),
        matches: scored,
    })
}

pub fn write_db(mut w: impl Write, db: &DescriptorDb) -> Result<()> {
    let per = 20 + db.n_c * db.d * 4;
    let mut buf = Vec::with_capacity(24 + db.len() * per);
    buf.extend_from_slice(DB_MAGIC);
    buf.extend_from_slice(&(db.n_c as u32).to_le_bytes());
    buf.extend_from_slice(&(db.d as u32).to_le_bytes());
    buf.extend_from_slice(&db.vocab_fingerprint.to_le_bytes());
    buf.extend_from_slice(&(db.len() as u32).to_le_bytes());
    for e in &db.entries {
        buf.extend_from_slice(&e.tile_id.to_le_bytes());
        buf.extend_from_slice(&e.position.easting.to_le_bytes());
        buf.extend_from_slice(&e.position.northing.to_le_bytes());
        for v in e.descriptor.values() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_db(mut r: impl Read) -> Result<DescriptorDb> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != DB_MAGIC {
        return Err(Error::format("malformed database header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n_c = u32_at(4) as usize;
    let d = u32_at(8) as usize;
    let fp = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let count = u32_at(20) as usize;
    let per = 20 + n_c * d * 4;
    if bytes.len() != 24 + count * per {
        return Err(Error::format("database payload length does not match header"));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let o = 24 + i * per;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let values = bytes[o + 20..o + per]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push(DbEntry {
            tile_id: u32_at(o),
            position: GeoPoint::new(f64_at(o + 4), f64_at(o + 12)),
            descriptor: VladDescriptor::from_values(values, n_c, d, fp)?,
        });
    }
    DescriptorDb::new(entries, n_c, d, fp)
}
