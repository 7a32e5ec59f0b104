//! On-disk cache: one `AREC` file per record plus a JSON manifest.
//!
//! `AREC` layout (little-endian): magic `"AREC"`, `u16` version (1), `u32`
//! device id, `u32` batch id, `u32` round, `u8` dtype (0 = f32), `u8` ndims,
//! `ndims × u32` dims, `f32` payload row-major, `u32` label count, `u16`
//! labels. The manifest maps `"device:batch"` to the record file and the
//! controller state of that key.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cache::TierCache;
use super::controller::{ControllerState, KeyState};
use super::{ActivationRecord, CacheKey};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const AREC_MAGIC: &[u8; 4] = b"AREC";
const AREC_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub round: u32,
    pub score: f64,
    pub interval: u32,
    pub counter: u32,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn record_to_bytes(rec: &ActivationRecord) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(AREC_MAGIC);
    w.u16(AREC_VERSION);
    w.u32(rec.key.device_id);
    w.u32(rec.key.batch_id);
    w.u32(rec.round_received);
    w.u8(DTYPE_F32);
    let shape = rec.activation.shape();
    w.u8(u8::try_from(shape.len()).map_err(|_| Error::InvalidInput("too many dims".into()))?);
    for &d in shape {
        w.u32(binio::to_u32(d, "dimension")?);
    }
    w.f32s(rec.activation.data());
    w.u32(binio::to_u32(rec.labels.len(), "label count")?);
    let labels = rec
        .labels
        .iter()
        .map(|&y| u16::try_from(y).map_err(|_| Error::InvalidInput(format!("label {y} exceeds u16"))))
        .collect::<Result<Vec<_>>>()?;
    w.u16s(&labels);
    Ok(w.buf)
}

pub fn record_from_bytes(buf: &[u8], path: &Path) -> Result<ActivationRecord> {
    let mut r = Reader::new(buf, path);
    r.magic(AREC_MAGIC)?;
    let version = r.u16("version")?;
    if version != AREC_VERSION {
        return Err(r.corrupt_at(4, format!("unsupported version {version}")));
    }
    let device_id = r.u32("device id")?;
    let batch_id = r.u32("batch id")?;
    let round = r.u32("round")?;
    let dtype_pos = r.position();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(r.corrupt_at(dtype_pos, format!("unknown dtype {dtype}")));
    }
    let ndims_pos = r.position();
    let ndims = r.u8("ndims")?;
    if ndims != 2 {
        return Err(r.corrupt_at(ndims_pos, format!("expected 2 dims, got {ndims}")));
    }
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.corrupt_at(ndims_pos + 1, format!("empty shape {rows}x{cols}")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| r.corrupt("payload size overflows"))?;
    let data = r.f32s(n, "payload")?;
    let count_pos = r.position();
    let count = r.u32("label count")? as usize;
    if count != rows {
        return Err(r.corrupt_at(count_pos, format!("{count} labels for {rows} rows")));
    }
    let labels = r.u16s(count, "labels")?;
    r.finish()?;
    ActivationRecord::new(
        CacheKey::new(device_id, batch_id),
        Tensor::matrix(rows, cols, data)?,
        labels.into_iter().map(usize::from).collect(),
        round,
    )
}

fn file_name(key: &CacheKey) -> String {
    format!("{}_{}.arec", key.device_id, key.batch_id)
}

/// Writes every disk-tier record and the manifest into `dir`, removing
/// record files of keys no longer present.
pub fn persist_cache(dir: &Path, cache: &TierCache, controller: Option<&ControllerState>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    for rec in cache.records() {
        let file = file_name(&rec.key);
        binio::write_file(&dir.join(&file), &record_to_bytes(rec)?)?;
        let st = controller
            .and_then(|c| c.get(&rec.key).copied())
            .unwrap_or(KeyState {
                interval: 1,
                counter: 0,
                score: 0.0,
            });
        manifest.insert(
            rec.key.to_string(),
            ManifestEntry {
                file,
                round: rec.round_received,
                score: st.score,
                interval: st.interval,
                counter: st.counter,
            },
        );
    }
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".arec") && !manifest.values().any(|m| m.file == name) {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    binio::write_file(&path, &json)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let buf = binio::read_file(&path)?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Reads the records listed in the manifest. The memory tier and fresh
/// queue start empty.
pub fn load_cache(dir: &Path, capacity: usize) -> Result<TierCache> {
    let manifest = load_manifest(dir)?;
    let mut cache = TierCache::new(capacity)?;
    for (key, entry) in &manifest {
        let key: CacheKey = key.parse()?;
        let path = dir.join(&entry.file);
        let rec = record_from_bytes(&binio::read_file(&path)?, &path)?;
        if rec.key != key || rec.round_received != entry.round {
            return Err(Error::Corrupt {
                path,
                offset: 6,
                reason: format!(
                    "record {} round {} does not match manifest entry {key} round {}",
                    rec.key, rec.round_received, entry.round
                ),
            });
        }
        cache.restore(rec);
    }
    Ok(cache)
}

/// Controller state saved alongside a cache.
pub fn load_controller(dir: &Path, max_interval: u32) -> Result<ControllerState> {
    let mut state = ControllerState::new(max_interval)?;
    for (key, e) in load_manifest(dir)? {
        state.restore(
            key.parse()?,
            KeyState {
                interval: e.interval,
                counter: e.counter,
                score: e.score,
            },
        );
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: u32, b: u32) -> ActivationRecord {
        let data: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - d as f32).collect();
        ActivationRecord::new(CacheKey::new(d, b), Tensor::matrix(3, 2, data).unwrap(), vec![2, 0, 1], 7).unwrap()
    }

    #[test]
    fn arec_layout() {
        let bytes = record_to_bytes(&rec(1, 2)).unwrap();
        assert_eq!(&bytes[..4], b"AREC");
        assert_eq!(bytes.len(), 4 + 2 + 12 + 2 + 8 + 24 + 4 + 6);
        let back = record_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, rec(1, 2));
    }

    #[test]
    fn corrupt_records_report_offsets() {
        let bytes = record_to_bytes(&rec(1, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(record_from_bytes(&bad, Path::new("m")), Err(Error::Corrupt { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[18] = 3;
        assert!(matches!(record_from_bytes(&bad, Path::new("m")), Err(Error::Corrupt { offset: 18, .. })));
        match record_from_bytes(&bytes[..30], Path::new("m")) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn persist_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = TierCache::new(4).unwrap();
        let mut ctl = ControllerState::new(8).unwrap();
        for (d, b) in [(0, 0), (0, 1), (3, 0)] {
            cache.insert(rec(d, b));
            ctl.record_receipt(CacheKey::new(d, b), Some(0.5));
        }
        persist_cache(dir.path(), &cache, Some(&ctl)).unwrap();
        let loaded = load_cache(dir.path(), 4).unwrap();
        assert!(loaded.records().eq(cache.records()));
        assert_eq!(load_controller(dir.path(), 8).unwrap(), ctl);

        let empty_dir = tempfile::tempdir().unwrap();
        persist_cache(empty_dir.path(), &TierCache::new(2).unwrap(), None).unwrap();
        assert!(load_cache(empty_dir.path(), 2).unwrap().is_empty());
    }
}
