//! `RSEG` checkpoint files: an ordered list of named f32 tensors.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "RSEG" | version | entry_count
//! per entry: name_len | name (UTF-8) | rank | dim_0.. | payload (f32 LE)
//! ```
//!
//! Round-trips are bit-exact. Loading into a parameter store may be filtered
//! by name prefix; names present in the store but absent from the file are
//! reported, not fatal, which is what partial transfer-learning loads use.

use std::collections::BTreeSet;
use std::path::Path;

use super::{io_err, DataError};
use crate::tensor::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named-tensor container; the transfer-learning artifact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

/// Outcome of applying a checkpoint to a parameter store.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Parameters overwritten from the file.
    pub loaded: Vec<String>,
    /// Store parameters (matching the filter) with no entry in the file.
    pub missing: Vec<String>,
    /// File entries with no matching store parameter.
    pub unexpected: Vec<String>,
}

impl Checkpoint {
    /// Snapshot every parameter of a store, in insertion order.
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    data: e.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Copy matching entries into `store`. With a prefix filter, only store
    /// parameters whose name starts with the prefix participate. Shapes must
    /// match exactly for a loaded entry.
    pub fn apply_to_store(
        &self,
        store: &mut ParamStore<f32>,
        prefix: Option<&str>,
    ) -> Result<LoadReport, DataError> {
        let wanted: Vec<String> = store
            .names()
            .filter(|n| prefix.map_or(true, |p| n.starts_with(p)))
            .map(str::to_string)
            .collect();
        let mut report = LoadReport::default();
        let mut by_name: std::collections::HashMap<&str, &CheckpointEntry> = self
            .entries
            .iter()
            .filter(|e| prefix.map_or(true, |p| e.name.starts_with(p)))
            .map(|e| (e.name.as_str(), e))
            .collect();
        for name in &wanted {
            match by_name.remove(name.as_str()) {
                Some(entry) => {
                    let id = store.id(name).expect("name from store");
                    if store.value(id).shape() != entry.shape.as_slice() {
                        return Err(DataError::BadCheckpoint(format!(
                            "shape mismatch for {name:?}: store {:?} vs file {:?}",
                            store.value(id).shape(),
                            entry.shape
                        )));
                    }
                    store.set_value(
                        id,
                        Tensor::new(entry.shape.clone(), entry.data.clone())
                            .map_err(|e| DataError::BadCheckpoint(e.to_string()))?,
                    );
                    report.loaded.push(name.clone());
                }
                None => report.missing.push(name.clone()),
            }
        }
        report.unexpected = self
            .entries
            .iter()
            .filter(|e| prefix.map_or(true, |p| e.name.starts_with(p)))
            .filter(|e| !report.loaded.iter().any(|l| l == &e.name))
            .map(|e| e.name.clone())
            .collect();
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name);
            bytes.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let bad = |detail: String| DataError::BadCheckpoint(detail);
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
            if bytes.len() - *pos < n {
                return Err(DataError::BadCheckpoint(format!(
                    "truncated at byte {}: wanted {n} more",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32, DataError> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut pos)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| bad(format!("bad name: {e}")))?;
            if !names.insert(name.clone()) {
                return Err(bad(format!("duplicate name {name:?}")));
            }
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { entries })
    }
}
