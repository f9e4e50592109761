//! Attention caches (`FAT1`) and trained-parameter artifacts (JSON).
//!
//! ```text
//! magic "FAT1" | version u32 | w u32 | h u32 | count u32
//! count x ( class u32 | example u32 | w*h f64 raw weights )
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{put_u32, read_file, to_u32, write_file, Reader};
use crate::attention::{normalize_map, AttentionMap};
use crate::classify::CosineHead;
use crate::episodes::BaseShots;
use crate::error::{Error, Result};
use crate::train::{Adapter, TrainConfig};

pub const CACHE_MAGIC: &[u8; 4] = b"FAT1";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedMap {
    pub class: usize,
    pub example: usize,
    pub map: AttentionMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub w: usize,
    pub h: usize,
    pub maps: Vec<CachedMap>,
}

pub fn write_attention_cache(path: &Path, cache: &AttentionCache) -> Result<()> {
    let r = cache.w * cache.h;
    let mut out = Vec::with_capacity(20 + cache.maps.len() * (8 + 8 * r));
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION);
    put_u32(&mut out, to_u32(cache.w, "width")?);
    put_u32(&mut out, to_u32(cache.h, "height")?);
    put_u32(&mut out, to_u32(cache.maps.len(), "count")?);
    for m in &cache.maps {
        if m.map.raw().len() != r {
            return Err(Error::Shape(format!(
                "map with {} weights in a {}x{} cache",
                m.map.raw().len(),
                cache.w,
                cache.h
            )));
        }
        put_u32(&mut out, to_u32(m.class, "class index")?);
        put_u32(&mut out, to_u32(m.example, "example index")?);
        for &v in m.map.raw() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_attention_cache(path: &Path) -> Result<AttentionCache> {
    let bytes = read_file(path)?;
    let mut rd = Reader::new(&bytes, path);
    rd.magic(CACHE_MAGIC)?;
    let version = rd.u32("version")?;
    if version != CACHE_VERSION {
        return Err(rd.error(format!("unsupported version {version}")));
    }
    let w = rd.u32("width")? as usize;
    let h = rd.u32("height")? as usize;
    let count = rd.u32("count")? as usize;
    if rd.remaining() != count * (8 + 8 * w * h) {
        return Err(rd.error(format!("declared {count} maps, payload is {} bytes", rd.remaining())));
    }
    let mut maps = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rd.u32("class index")? as usize;
        let example = rd.u32("example index")? as usize;
        let raw = rd.f64s(w * h, "weights")?;
        let map = AttentionMap::from_raw(w, h, raw)
            .and_then(normalize_map)
            .map_err(|e| rd.error(e.to_string()))?;
        maps.push(CachedMap { class, example, map });
    }
    rd.finish()?;
    Ok(AttentionCache { w, h, maps })
}

/// Output of base-class training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifacts {
    pub k: BaseShots,
    pub adapter: Adapter,
    pub head: CosineHead,
    pub config: TrainConfig,
    pub losses: Vec<f64>,
}

pub fn write_artifacts(path: &Path, artifacts: &TrainedArtifacts) -> Result<()> {
    let text = serde_json::to_string_pretty(artifacts)
        .map_err(|e| Error::InvalidInput(format!("serializing artifacts: {e}")))?;
    write_file(path, text.as_bytes())
}

pub fn read_artifacts(path: &Path) -> Result<TrainedArtifacts> {
    let bytes = read_file(path)?;
    let artifacts: TrainedArtifacts = serde_json::from_slice(&bytes).map_err(|e| {
        Error::parse(path, e.column() as u64, format!("line {}: {e}", e.line()))
    })?;
    artifacts.head.validate()?;
    Adapter::from_matrix(artifacts.adapter.channels(), artifacts.adapter.matrix().to_vec())?;
    if artifacts.head.channels() != artifacts.adapter.channels() {
        return Err(Error::Shape("artifact head and adapter dimensions differ".into()));
    }
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::init_head;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fat");
        let cache = AttentionCache {
            w: 2,
            h: 1,
            maps: vec![
                CachedMap {
                    class: 0,
                    example: 3,
                    map: normalize_map(AttentionMap::from_raw(2, 1, vec![0.1, 0.7]).unwrap()).unwrap(),
                },
                CachedMap {
                    class: 4,
                    example: 0,
                    map: normalize_map(AttentionMap::from_raw(2, 1, vec![0.0, 0.0]).unwrap()).unwrap(),
                },
            ],
        };
        write_attention_cache(&path, &cache).unwrap();
        assert_eq!(read_attention_cache(&path).unwrap(), cache);

        let empty = AttentionCache { w: 7, h: 7, maps: vec![] };
        write_attention_cache(&path, &empty).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20);
        assert_eq!(read_attention_cache(&path).unwrap(), empty);
    }

    #[test]
    fn artifacts_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut adapter = Adapter::identity(3);
        adapter.matrix_mut()[1] = 0.1 + 0.2;
        let art = TrainedArtifacts {
            k: BaseShots::Count(5),
            adapter,
            head: init_head(3, 4, 9).unwrap(),
            config: TrainConfig::base(),
            losses: vec![1.0 / 3.0],
        };
        write_artifacts(&path, &art).unwrap();
        assert_eq!(read_artifacts(&path).unwrap(), art);
    }

    #[test]
    fn malformed_artifacts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        std::fs::write(&path, "{\"k\": 1").unwrap();
        assert!(matches!(read_artifacts(&path), Err(Error::Parse { .. })));
    }
}
