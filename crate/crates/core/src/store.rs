//! On-disk plugin store.
//!
//! ```text
//! header   "PLGD" | u32 version=1 | [u8; 32] model hash | u32 d | u32 count
//! record   u32 id_len | id bytes | u32 L_d | L_d·d f32
//! index    count × (u64 record offset | u32 record CRC-32) | u32 header CRC-32 | u64 index offset
//! ```
//! All integers and floats are little-endian. The index is written after
//! the records it points to. The header CRC covers the 48 header bytes,
//! count included.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::plugin::DocumentPlugin;
use crate::tensor::Tensor;
use hex::encode as hex;

pub const MAGIC: &[u8; 4] = b"PLGD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 4 + 4;
const COUNT_AT: usize = 44;
const ENTRY_LEN: usize = 12;
const TRAILER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad store format: {0}")]
    Format(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("document {0:?} not in store")]
    NotFound(String),
    #[error("document {0:?} already in store")]
    Duplicate(String),
    #[error("model hash mismatch: store has {expected}, got {found}")]
    HashMismatch { expected: String, found: String },
    #[error("dimension mismatch: store has d={expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
}

type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug)]
pub struct PluginStore {
    path: Option<PathBuf>,
    model_hash: [u8; 32],
    d: usize,
    /// Full file image.
    bytes: Vec<u8>,
    offsets: Vec<u64>,
    crcs: Vec<u32>,
    index: HashMap<String, usize>,
    reads: AtomicUsize,
}

fn u32_at(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
}

fn u64_at(b: &[u8], at: usize) -> Option<u64> {
    b.get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
}

impl PluginStore {
    /// A store that lives only in memory until written with [`Self::to_bytes`].
    pub fn in_memory(model_hash: [u8; 32], d: usize) -> Self {
        let mut bytes = Vec::with_capacity(HEADER_LEN + TRAILER_LEN);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&model_hash);
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let header_crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&header_crc.to_le_bytes());
        bytes.extend_from_slice(&(HEADER_LEN as u64).to_le_bytes());
        Self {
            path: None,
            model_hash,
            d,
            bytes,
            offsets: Vec::new(),
            crcs: Vec::new(),
            index: HashMap::new(),
            reads: AtomicUsize::new(0),
        }
    }

    /// Creates (or truncates) a store file at `path`.
    pub fn create(path: &Path, model_hash: [u8; 32], d: usize) -> Result<Self> {
        let mut s = Self::in_memory(model_hash, d);
        crate::fsutil::write_atomic(path, &s.bytes).map_err(|e| match e {
            crate::Error::Io(io) => StoreError::Io(io),
            other => StoreError::Format(other.to_string()),
        })?;
        s.path = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut s = Self::from_bytes(std::fs::read(path)?)?;
        s.path = Some(path.to_path_buf());
        Ok(s)
    }

    /// Parses and fully validates a store image.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version =
            u32_at(&bytes, 4).ok_or_else(|| StoreError::Corrupt("truncated header".into()))?;
        if version != VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(StoreError::Corrupt("truncated header".into()));
        }
        let header_crc = u32_at(&bytes, bytes.len() - TRAILER_LEN).unwrap();
        if crc32fast::hash(&bytes[..HEADER_LEN]) != header_crc {
            return Err(StoreError::Corrupt("header checksum mismatch".into()));
        }
        let model_hash: [u8; 32] = bytes[8..40].try_into().unwrap();
        let d = u32_at(&bytes, 40).unwrap() as usize;
        let count = u32_at(&bytes, COUNT_AT).unwrap() as usize;
        let len = bytes.len() as u64;
        let index_start = u64_at(&bytes, bytes.len() - 8).unwrap();
        if index_start.checked_add((ENTRY_LEN * count + TRAILER_LEN) as u64) != Some(len)
            || index_start < HEADER_LEN as u64
        {
            return Err(StoreError::Corrupt(format!(
                "index of {count} entries does not fit file of {len} bytes"
            )));
        }
        let mut s = Self {
            path: None,
            model_hash,
            d,
            bytes,
            offsets: Vec::with_capacity(count),
            crcs: Vec::with_capacity(count),
            index: HashMap::with_capacity(count),
            reads: AtomicUsize::new(0),
        };
        let mut expected = HEADER_LEN as u64;
        for i in 0..count {
            let entry = index_start as usize + ENTRY_LEN * i;
            let off = u64_at(&s.bytes, entry).unwrap();
            let crc = u32_at(&s.bytes, entry + 8).unwrap();
            if off != expected {
                return Err(StoreError::Corrupt(format!(
                    "record {i} offset {off}, expected {expected}"
                )));
            }
            let (id, _, end) = s.parse_record(off as usize, index_start as usize)?;
            if crc32fast::hash(&s.bytes[off as usize..end]) != crc {
                return Err(StoreError::Corrupt(format!(
                    "record {id:?} checksum mismatch"
                )));
            }
            if s.index.insert(id.clone(), i).is_some() {
                return Err(StoreError::Corrupt(format!("duplicate id {id:?}")));
            }
            s.offsets.push(off);
            s.crcs.push(crc);
            expected = end as u64;
        }
        if expected != index_start {
            return Err(StoreError::Corrupt("gap between records and index".into()));
        }
        Ok(s)
    }

    /// Returns `(id, data offset, end offset)` of the record at `at`.
    fn parse_record(&self, at: usize, limit: usize) -> Result<(String, usize, usize)> {
        let corrupt = || StoreError::Corrupt(format!("record at {at} overruns its bounds"));
        let b = &self.bytes[..limit];
        let id_len = u32_at(b, at).ok_or_else(corrupt)? as usize;
        let id_bytes = b.get(at + 4..at + 4 + id_len).ok_or_else(corrupt)?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| StoreError::Corrupt(format!("record at {at}: id not UTF-8")))?;
        let l = u32_at(b, at + 4 + id_len).ok_or_else(corrupt)? as usize;
        if l == 0 {
            return Err(StoreError::Corrupt(format!("record {id:?} has no rows")));
        }
        let data = at + 8 + id_len;
        let end = data + 4 * l * self.d;
        if end > limit {
            return Err(corrupt());
        }
        Ok((id.to_string(), data, end))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn model_hash(&self) -> [u8; 32] {
        self.model_hash
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.index.contains_key(doc_id)
    }

    /// Document ids in insertion order.
    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<(&String, &usize)> = self.index.iter().collect();
        ids.sort_by_key(|(_, &i)| i);
        ids.into_iter().map(|(k, _)| k.clone()).collect()
    }

    /// Number of successful `get` calls so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn index_start(&self) -> usize {
        self.bytes.len() - TRAILER_LEN - ENTRY_LEN * self.offsets.len()
    }

    /// Appends a plugin. For file-backed stores the record, index and
    /// count are written and synced before returning.
    pub fn save(&mut self, plugin: &DocumentPlugin) -> Result<()> {
        if plugin.model_hash != self.model_hash {
            return Err(StoreError::HashMismatch {
                expected: hex(self.model_hash),
                found: hex(plugin.model_hash),
            });
        }
        if plugin.d() != self.d {
            return Err(StoreError::DimMismatch {
                expected: self.d,
                found: plugin.d(),
            });
        }
        if self.index.contains_key(&plugin.doc_id) {
            return Err(StoreError::Duplicate(plugin.doc_id.clone()));
        }
        if plugin.is_empty() {
            return Err(StoreError::Format(format!(
                "plugin {:?} has no rows",
                plugin.doc_id
            )));
        }
        let start = self.index_start();
        let mut tail = Vec::with_capacity(
            8 + plugin.doc_id.len() + 4 * plugin.hidden.len() + ENTRY_LEN * (self.len() + 2),
        );
        tail.extend_from_slice(&(plugin.doc_id.len() as u32).to_le_bytes());
        tail.extend_from_slice(plugin.doc_id.as_bytes());
        tail.extend_from_slice(&(plugin.len() as u32).to_le_bytes());
        for &v in plugin.hidden.data() {
            tail.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let new_index_start = (start + tail.len()) as u64;
        let mut offsets = self.offsets.clone();
        let mut crcs = self.crcs.clone();
        offsets.push(start as u64);
        crcs.push(crc32fast::hash(&tail));
        for (o, c) in offsets.iter().zip(&crcs) {
            tail.extend_from_slice(&o.to_le_bytes());
            tail.extend_from_slice(&c.to_le_bytes());
        }
        let count = (offsets.len() as u32).to_le_bytes();
        let mut header: [u8; HEADER_LEN] = self.bytes[..HEADER_LEN].try_into().unwrap();
        header[COUNT_AT..].copy_from_slice(&count);
        tail.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        tail.extend_from_slice(&new_index_start.to_le_bytes());

        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().write(true).open(path)?;
            f.seek(SeekFrom::Start(start as u64))?;
            f.write_all(&tail)?;
            f.set_len((start + tail.len()) as u64)?;
            f.sync_data()?;
            f.seek(SeekFrom::Start(COUNT_AT as u64))?;
            f.write_all(&count)?;
            f.sync_all()?;
        }
        self.bytes.truncate(start);
        self.bytes.extend_from_slice(&tail);
        self.bytes[COUNT_AT..COUNT_AT + 4].copy_from_slice(&count);
        self.index.insert(plugin.doc_id.clone(), offsets.len() - 1);
        self.offsets = offsets;
        self.crcs = crcs;
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Result<DocumentPlugin> {
        let &i = self
            .index
            .get(doc_id)
            .ok_or_else(|| StoreError::NotFound(doc_id.to_string()))?;
        let (id, data, end) = self.parse_record(self.offsets[i] as usize, self.index_start())?;
        let values: Vec<f64> = self.bytes[data..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let rows = values.len() / self.d;
        let hidden = Tensor::new(vec![rows, self.d], values)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(DocumentPlugin {
            doc_id: id,
            hidden,
            model_hash: self.model_hash,
            created_at: None,
        })
    }

    /// Writes the store image to `path` atomically.
    pub fn write_to(&self, path: &Path) -> crate::Result<()> {
        crate::fsutil::write_atomic(path, &self.bytes)
    }
}
