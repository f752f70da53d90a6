//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, format version (u32 LE), header length (u64 LE),
//! a TOML header (kind, preset, run config, metadata, payload checksum),
//! then a tensor table ordered by name — name length (u64 LE), name bytes,
//! rank (u64 LE), dims (u64 LE each), values as little-endian f32 — and a
//! trailing CRC32 of the table. Loading keeps the header bytes verbatim, so
//! load -> save reproduces the byte stream exactly.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SCOPEVIT";
pub const FORMAT_VERSION: u32 = 1;

/// Parsed header fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// What the weights are: `mae`, `triplet`, `phase-stage1`, `phase-stage2`.
    pub kind: String,
    /// Model preset the shapes correspond to.
    pub preset: String,
    /// CRC32 of the tensor table, hex.
    pub payload_crc32: String,
    /// Full run configuration, structured.
    pub config: toml::Value,
    /// Extra scalar state (SWA count, step counters, metric names).
    #[serde(default)]
    pub meta: BTreeMap<String, toml::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

/// In-memory checkpoint; the unit of model persistence and evaluation.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    header: CheckpointHeader,
    header_text: String,
    tensors: BTreeMap<String, TensorEntry>,
}

fn table_bytes(tensors: &BTreeMap<String, TensorEntry>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, entry) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(entry.dims.len() as u64).to_le_bytes());
        for &d in &entry.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &entry.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl Checkpoint {
    /// Build a checkpoint from raw tensors; computes the checksum and
    /// renders the canonical header text.
    pub fn new(
        kind: &str,
        preset: &str,
        config: toml::Value,
        meta: BTreeMap<String, toml::Value>,
        tensors: BTreeMap<String, TensorEntry>,
    ) -> Result<Self> {
        for (name, e) in &tensors {
            let n: u64 = e.dims.iter().product();
            if n != e.values.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: dims {:?} do not match {} values",
                    e.dims,
                    e.values.len()
                )));
            }
        }
        let crc = crc32fast::hash(&table_bytes(&tensors));
        let header = CheckpointHeader {
            kind: kind.into(),
            preset: preset.into(),
            payload_crc32: format!("{crc:08x}"),
            config,
            meta,
        };
        let header_text = toml::to_string(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
        Ok(Checkpoint {
            header,
            header_text,
            tensors,
        })
    }

    /// Snapshot a parameter store, casting values to f32.
    pub fn from_store(
        kind: &str,
        preset: &str,
        config: toml::Value,
        meta: BTreeMap<String, toml::Value>,
        store: &ParamStore,
    ) -> Result<Self> {
        let tensors = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorEntry {
                        dims: t.shape().iter().map(|&d| d as u64).collect(),
                        values: t.data().iter().map(|&v| v as f32).collect(),
                    },
                )
            })
            .collect();
        Checkpoint::new(kind, preset, config, meta, tensors)
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn preset(&self) -> &str {
        &self.header.preset
    }

    pub fn config(&self) -> &toml::Value {
        &self.header.config
    }

    pub fn meta(&self) -> &BTreeMap<String, toml::Value> {
        &self.header.meta
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Copy checkpoint tensors into matching store parameters (widened to
    /// f64). Returns how many parameters were initialized. Shape mismatches
    /// are errors; tensors without a matching parameter are ignored.
    pub fn apply_matching(&self, store: &mut ParamStore) -> Result<usize> {
        let mut applied = 0;
        for i in 0..store.len() {
            let name = store.name(i).to_string();
            if let Some(entry) = self.tensors.get(&name) {
                let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
                if store.get(i).shape() != dims {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: checkpoint shape {:?} does not match model {:?}",
                        dims,
                        store.get(i).shape()
                    )));
                }
                let data: Vec<f64> = entry.values.iter().map(|&v| v as f64).collect();
                *store.get_mut(i) = Tensor::new(dims, data)?.with_grad();
                applied += 1;
            }
        }
        Ok(applied)
    }

    /// Like [`Checkpoint::apply_matching`] but every parameter must be
    /// present in the checkpoint.
    pub fn apply_all(&self, store: &mut ParamStore) -> Result<()> {
        let applied = self.apply_matching(store)?;
        if applied != store.len() {
            let missing: Vec<&str> = (0..store.len())
                .map(|i| store.name(i))
                .filter(|n| !self.tensors.contains_key(*n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = self.header_text.as_bytes();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header);
        let table = table_bytes(&self.tensors);
        let crc = crc32fast::hash(&table);
        out.extend_from_slice(&table);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic at offset 0: expected {MAGIC:?}, found {magic:?}"
            )));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap());
        let header_bytes = r.take(header_len as usize, "header")?;
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?
            .to_string();
        let header: CheckpointHeader = toml::from_str(&header_text)
            .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;

        let table_start = r.pos;
        if bytes.len() < table_start + 4 {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {}: no room for trailing checksum",
                bytes.len()
            )));
        }
        let table_end = bytes.len() - 4;
        let mut tensors = BTreeMap::new();
        while r.pos < table_end {
            let name_len = u64::from_le_bytes(r.take(8, "tensor name length")?.try_into().unwrap());
            let name = std::str::from_utf8(r.take(name_len as usize, "tensor name")?)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
                .to_string();
            let rank = u64::from_le_bytes(r.take(8, "tensor rank")?.try_into().unwrap());
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.take(8, "tensor dim")?.try_into().unwrap()));
            }
            let count: u64 = dims.iter().product();
            let raw = r.take(count as usize * 4, "tensor values")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), TensorEntry { dims, values }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != table_end {
            return Err(Error::Checkpoint(format!(
                "tensor table overruns at offset {}",
                r.pos
            )));
        }
        let stored_crc =
            u32::from_le_bytes(bytes[table_end..table_end + 4].try_into().unwrap());
        let table = &bytes[table_start..table_end];
        let crc = crc32fast::hash(table);
        if crc != stored_crc {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: trailing {stored_crc:08x}, recomputed {crc:08x}"
            )));
        }
        let header_crc = u32::from_str_radix(&header.payload_crc32, 16)
            .map_err(|e| Error::Checkpoint(format!("header checksum field: {e}")))?;
        if header_crc != crc {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: header records {header_crc:08x}, payload is {crc:08x}"
            )));
        }
        Ok(Checkpoint {
            header,
            header_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {}: needed {n} bytes for {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_normal("b.weight", vec![3, 4], 0.5, &mut rng);
        store.add_normal("a.bias", vec![4], 0.5, &mut rng);
        store.add_normal("c.scale", vec![2, 2, 2], 0.5, &mut rng);
        store
    }

    fn sample_ckpt() -> Checkpoint {
        let store = sample_store();
        let mut meta = BTreeMap::new();
        meta.insert("swa_count".into(), toml::Value::Integer(30));
        Checkpoint::from_store(
            "mae",
            "tiny-desk",
            toml::Value::String("cfg".into()),
            meta,
            &store,
        )
        .unwrap()
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let ck = sample_ckpt();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.kind(), "mae");
        assert_eq!(back.num_tensors(), 3);
        for name in ck.tensor_names() {
            assert_eq!(ck.tensor(name), back.tensor(name));
        }
    }

    #[test]
    fn tensor_names_are_canonically_ordered() {
        let ck = sample_ckpt();
        let names: Vec<&str> = ck.tensor_names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample_ckpt().to_bytes();
        for cut in [0, 4, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(
                err.contains("truncated")
                    || err.contains("magic")
                    || err.contains("checksum")
                    || err.contains("overruns"),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = sample_ckpt().to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0xFF;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample_ckpt().to_bytes();
        bytes[8] = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn header_checksum_matches_recomputed_payload() {
        let ck = sample_ckpt();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        // from_bytes cross-checks header vs payload; also verify the field
        // equals the trailing bytes.
        let trailing = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(format!("{trailing:08x}"), back.header.payload_crc32);
    }

    #[test]
    fn apply_roundtrip_through_f32() {
        let store = sample_store();
        let ck = Checkpoint::from_store(
            "mae",
            "tiny-desk",
            toml::Value::String(String::new()),
            BTreeMap::new(),
            &store,
        )
        .unwrap();
        let mut target = sample_store();
        for t in target.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        ck.apply_all(&mut target).unwrap();
        // Values equal the f32-rounded originals, exactly.
        for (i, t) in target.tensors().iter().enumerate() {
            for (got, orig) in t.data().iter().zip(store.get(i).data()) {
                assert_eq!(*got, *orig as f32 as f64);
            }
        }
    }

    #[test]
    fn apply_detects_shape_mismatch_and_missing() {
        let ck = sample_ckpt();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut wrong = ParamStore::new();
        wrong.add_normal("b.weight", vec![4, 3], 0.5, &mut rng);
        assert!(ck.apply_matching(&mut wrong).is_err());

        let mut extra = ParamStore::new();
        extra.add_normal("not.there", vec![2], 0.5, &mut rng);
        assert_eq!(ck.apply_matching(&mut extra).unwrap(), 0);
        assert!(ck.apply_all(&mut extra).is_err());
    }
}
