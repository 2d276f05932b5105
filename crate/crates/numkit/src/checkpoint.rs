//! Versioned binary container for parameters and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSTOP\0"  u32 version
//! u32 count, then `count` parameter blocks
//! u32 count, then `count` optimizer blocks
//! block := u32 name_len, name (utf-8), u32 rank, u64 extents[rank], f64 payload[prod(extents)]
//! ```
//!
//! Optimizer blocks are `adam.config` (`[lr, beta1, beta2, eps]`),
//! `adam.step` and one `adam.m.<param>` / `adam.v.<param>` pair per trainable
//! parameter.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::adam::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MSTOP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint but {expected:?} in model")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for e in t.shape() {
        w.write_all(&(*e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Malformed("truncated".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn read_block<R: Read>(r: &mut R) -> Result<(String, Tensor), CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(CheckpointError::Malformed(format!("name length {len}")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(CheckpointError::Malformed(format!("rank {rank} for `{name}`")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let count: usize = shape.iter().product();
    if count > 1 << 28 {
        return Err(CheckpointError::Malformed(format!("`{name}` has {count} elements")));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(read_u64(r)?.to_le_bytes()));
    }
    let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((name, t))
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore, adam: Option<&AdamState>) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        write_block(w, &e.name, &e.value)?;
    }
    match adam {
        None => w.write_all(&0u32.to_le_bytes())?,
        Some(state) => {
            let trainable: Vec<_> = store.trainable_ids().collect();
            w.write_all(&((2 + 2 * trainable.len()) as u32).to_le_bytes())?;
            let c = state.config;
            write_block(w, "adam.config", &Tensor::row(vec![c.lr, c.beta1, c.beta2, c.eps]))?;
            write_block(w, "adam.step", &Tensor::scalar(state.step as f64))?;
            for id in trainable {
                let shape = store.get(id).shape().to_vec();
                let name = store.name(id);
                let m = Tensor::new(shape.clone(), state.m[id.index()].clone()).map_err(io::Error::other)?;
                let v = Tensor::new(shape, state.v[id.index()].clone()).map_err(io::Error::other)?;
                write_block(w, &format!("adam.m.{name}"), &m)?;
                write_block(w, &format!("adam.v.{name}"), &v)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut sections = [Vec::new(), Vec::new()];
    for section in sections.iter_mut() {
        let count = read_u32(r)?;
        for _ in 0..count {
            section.push(read_block(r)?);
        }
    }
    let [params, optimizer] = sections;
    Ok(Checkpoint { params, optimizer })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: Option<&AdamState>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store, adam)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

impl Checkpoint {
    fn find<'a>(list: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
        list.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry of `store` from the checkpoint, by name.
    pub fn restore(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let mut updates = Vec::with_capacity(store.len());
        for e in store.entries() {
            let t = Self::find(&self.params, &e.name).ok_or_else(|| CheckpointError::Missing(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            updates.push((e.name.clone(), t.clone()));
        }
        for (name, t) in updates {
            store
                .assign(&name, t)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(())
    }

    /// Rebuilds optimizer state aligned with `store`, if one was saved.
    pub fn adam_state(&self, store: &ParamStore) -> Result<Option<AdamState>, CheckpointError> {
        if self.optimizer.is_empty() {
            return Ok(None);
        }
        let cfg = Self::find(&self.optimizer, "adam.config")
            .ok_or_else(|| CheckpointError::Missing("adam.config".into()))?
            .data();
        if cfg.len() != 4 {
            return Err(CheckpointError::Malformed("adam.config must hold 4 values".into()));
        }
        let step = Self::find(&self.optimizer, "adam.step")
            .and_then(Tensor::item)
            .ok_or_else(|| CheckpointError::Missing("adam.step".into()))?;
        let mut state = AdamState::new(
            store,
            AdamConfig {
                lr: cfg[0],
                beta1: cfg[1],
                beta2: cfg[2],
                eps: cfg[3],
            },
        );
        state.step = step as u64;
        for id in store.trainable_ids() {
            let name = store.name(id);
            for (prefix, slot) in [("adam.m.", &mut state.m), ("adam.v.", &mut state.v)] {
                let key = format!("{prefix}{name}");
                let t = Self::find(&self.optimizer, &key).ok_or(CheckpointError::Missing(key))?;
                if t.shape() != store.get(id).shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: format!("{prefix}{name}"),
                        expected: store.get(id).shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                slot[id.index()] = t.data().to_vec();
            }
        }
        Ok(Some(state))
    }
}
