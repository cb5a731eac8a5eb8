//! `BEVD` checkpoint files.
//!
//! Layout (integers little-endian):
//! magic `BEVD` | u32 version | 32-byte config hash | u32 metadata length |
//! metadata JSON | u32 block count | blocks | 32-byte SHA-256 of everything before.
//! A block is u16 name length | name | u8 element tag | u8 rank | u64 dims | payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bevdrive::autodiff::{ParamStore, Tensor};
use bevdrive::Scalar;

use crate::config::AgentKind;
use crate::CliError;

pub const MAGIC: &[u8; 4] = b"BEVD";
pub const VERSION: u32 = 1;
const MOMENT_M: &str = "opt.m/";
const MOMENT_V: &str = "opt.v/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Policy,
    /// Policy parameters plus a segmentation decoder.
    Segmentation { frozen: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub agent: AgentKind,
    pub update: u64,
    pub env_steps: u64,
    pub optimizer_step: u64,
    /// The run configuration, serialized.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub tag: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub meta: Metadata,
    pub blocks: Vec<Block>,
}

fn block_of<T: Scalar>(name: String, shape: &[usize], data: &[T]) -> Block {
    let mut payload = Vec::with_capacity(data.len() * std::mem::size_of::<T>());
    for v in data {
        match T::TAG {
            0 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Block { name, tag: T::TAG, dims: shape.to_vec(), payload }
}

fn decode_block<T: Scalar>(b: &Block) -> Result<Vec<T>, CliError> {
    if b.tag != T::TAG {
        return Err(CliError::Checkpoint(format!("block `{}` has element tag {}, expected {}", b.name, b.tag, T::TAG)));
    }
    Ok(match b.tag {
        0 => b.payload.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        _ => b.payload.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
    })
}

fn element_size(tag: u8) -> Option<usize> {
    match tag {
        0 => Some(4),
        1 => Some(8),
        _ => None,
    }
}

impl Checkpoint {
    /// Parameters followed by their Adam moments.
    pub fn from_store<T: Scalar>(meta: Metadata, config_hash: [u8; 32], store: &ParamStore<T>) -> Self {
        let (step, moments) = store.optimizer_state();
        let mut blocks: Vec<Block> = store.iter().map(|(n, t)| block_of(n.to_string(), &t.shape, &t.data)).collect();
        for ((name, t), (m, v)) in store.iter().zip(moments) {
            blocks.push(block_of(format!("{MOMENT_M}{name}"), &t.shape, m));
            blocks.push(block_of(format!("{MOMENT_V}{name}"), &t.shape, v));
        }
        Self { version: VERSION, config_hash, meta: Metadata { optimizer_step: step, ..meta }, blocks }
    }

    /// Overwrites every parameter of `store` (and its optimizer state) from the
    /// blocks; names and shapes must match exactly.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CliError> {
        let find = |name: &str| self.blocks.iter().find(|b| b.name == name);
        let params = self.blocks.iter().filter(|b| !b.name.starts_with(MOMENT_M) && !b.name.starts_with(MOMENT_V)).count();
        if params != store.len() {
            return Err(CliError::Checkpoint(format!("{params} parameter blocks for a network of {}", store.len())));
        }
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut moments = Vec::with_capacity(names.len());
        for name in &names {
            let b = find(name).ok_or_else(|| CliError::Checkpoint(format!("missing parameter `{name}`")))?;
            store.set(name, Tensor::new(&b.dims, decode_block(b)?)).map_err(|e| CliError::Checkpoint(e.to_string()))?;
            let moment = |prefix: &str| -> Result<Vec<T>, CliError> {
                let key = format!("{prefix}{name}");
                let b = find(&key).ok_or_else(|| CliError::Checkpoint(format!("missing optimizer state `{key}`")))?;
                decode_block(b)
            };
            moments.push((moment(MOMENT_M)?, moment(MOMENT_V)?));
        }
        store.set_optimizer_state(self.meta.optimizer_step, moments).map_err(|e| CliError::Checkpoint(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.tag);
            out.push(b.dims.len() as u8);
            for &d in &b.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&b.payload);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a BEVD checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CliError::Version { found: version, expected: VERSION });
        }
        if bytes.len() < 8 + 32 + 32 {
            return Err(bad("truncated checkpoint"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch (corrupted or truncated file)"));
        }
        let mut r = Reader { bytes: body, at: 8 };
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(&format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let size = element_size(tag).ok_or_else(|| bad(&format!("unknown element tag {tag} in `{name}`")))?;
            let payload = r.take(dims.iter().product::<usize>() * size)?.to_vec();
            blocks.push(Block { name, tag, dims, payload });
        }
        if r.at != body.len() {
            return Err(bad("trailing bytes after the last block"));
        }
        Ok(Self { version, config_hash, meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        // write-then-rename so an interrupted save never replaces a good file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let s = self.bytes.get(self.at..self.at + n).ok_or_else(|| CliError::Checkpoint("truncated checkpoint".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
