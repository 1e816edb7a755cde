//! Binary checkpoints and the per-run checkpoint store.
//!
//! Layout (little-endian):
//!
//! ```text
//! [0..4)    magic  b"GAPL"
//! [4..6)    format version u16
//! [6..38)   model spec digest (SHA-256)
//! [38..46)  parameter count u64
//! [46..)    parameter count x f64, canonical order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{GapError, Result};
use crate::model::ParamVector;

pub const MAGIC: &[u8; 4] = b"GAPL";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 32 + 8;

pub fn encode_checkpoint(params: &ParamVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(params.digest());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], name: &str) -> Result<ParamVector> {
    if bytes.len() < HEADER_LEN {
        return Err(GapError::format_at_byte(name, bytes.len() as u64, "truncated checkpoint header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(GapError::format_at_byte(name, 0, "bad magic, not a checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(GapError::format_at_byte(name, 4, format!("unsupported format version {version}")));
    }
    let digest: [u8; 32] = bytes[6..38].try_into().unwrap();
    let count = u64::from_le_bytes(bytes[38..46].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(GapError::format_at_byte(
            name,
            (HEADER_LEN + body.len().min(count * 8)) as u64,
            format!("expected {count} parameters, payload holds {} bytes", body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParamVector::from_raw(values, digest))
}

pub fn write_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| GapError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| GapError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

pub fn checkpoint_id(iteration: u64) -> String {
    format!("it{iteration:07}")
}

#[derive(Debug)]
enum Backend {
    Memory(BTreeMap<u64, ParamVector>),
    Directory(PathBuf),
}

/// Checkpoints of one run keyed by global iteration, in memory or on disk.
#[derive(Debug)]
pub struct CheckpointStore {
    backend: Backend,
    index: BTreeMap<u64, (usize, String)>,
}

const INDEX_FILE: &str = "index.csv";

impl CheckpointStore {
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(BTreeMap::new()),
            index: BTreeMap::new(),
        }
    }

    /// Fresh store in `dir`, created if needed.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| GapError::io(dir, e))?;
        let store = Self {
            backend: Backend::Directory(dir.to_path_buf()),
            index: BTreeMap::new(),
        };
        store.write_index()?;
        Ok(store)
    }

    /// Re-opens a store written by [`CheckpointStore::create`].
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| GapError::io(&path, e))?;
        let name = path.display().to_string();
        let mut index = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let parse_err = || GapError::format_at_line(&name, n + 1, format!("malformed index row {line:?}"));
            if fields.len() != 3 {
                return Err(parse_err());
            }
            let task: usize = fields[0].parse().map_err(|_| parse_err())?;
            let iter: u64 = fields[1].parse().map_err(|_| parse_err())?;
            index.insert(iter, (task, fields[2].to_string()));
        }
        Ok(Self {
            backend: Backend::Directory(dir.to_path_buf()),
            index,
        })
    }

    fn write_index(&self) -> Result<()> {
        if let Backend::Directory(dir) = &self.backend {
            let mut text = String::from("task,iter,file\n");
            for (iter, (task, file)) in &self.index {
                text.push_str(&format!("{task},{iter},{file}\n"));
            }
            let path = dir.join(INDEX_FILE);
            fs::write(&path, text).map_err(|e| GapError::io(&path, e))?;
        }
        Ok(())
    }

    /// Stores `params` as the checkpoint after `iteration` global steps and returns its id.
    pub fn put(&mut self, task: usize, iteration: u64, params: &ParamVector) -> Result<String> {
        let id = checkpoint_id(iteration);
        match &mut self.backend {
            Backend::Memory(map) => {
                map.insert(iteration, params.clone());
                self.index.insert(iteration, (task, id.clone()));
            }
            Backend::Directory(dir) => {
                let file = format!("{id}.gapl");
                write_checkpoint(&dir.join(&file), params)?;
                self.index.insert(iteration, (task, file));
                self.write_index()?;
            }
        }
        Ok(id)
    }

    pub fn get(&self, iteration: u64) -> Result<ParamVector> {
        match &self.backend {
            Backend::Memory(map) => map
                .get(&iteration)
                .cloned()
                .ok_or_else(|| GapError::MissingCheckpoint(vec![iteration])),
            Backend::Directory(dir) => {
                let (_, file) = self
                    .index
                    .get(&iteration)
                    .ok_or_else(|| GapError::MissingCheckpoint(vec![iteration]))?;
                read_checkpoint(&dir.join(file))
            }
        }
    }

    pub fn contains(&self, iteration: u64) -> bool {
        self.index.contains_key(&iteration)
    }

    pub fn iterations(&self) -> Vec<u64> {
        self.index.keys().copied().collect()
    }

    pub fn task_of(&self, iteration: u64) -> Option<usize> {
        self.index.get(&iteration).map(|(t, _)| *t)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}
