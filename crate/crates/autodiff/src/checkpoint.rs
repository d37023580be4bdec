//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DTPPOCKP"
//! version      u32      currently 1
//! config_hash  u64      first 8 bytes (LE) of SHA-256 over the config blob
//! config_len   u32      then config_len bytes of UTF-8 config text
//! meta_len     u32      then meta_len bytes of UTF-8 metadata text
//! has_adam     u8       0 or 1
//! adam_step    u64      present only when has_adam = 1
//! count        u32      number of parameters
//! per parameter, in store order:
//!   name_len   u16      then name_len bytes of UTF-8 name
//!   rows       u64
//!   cols       u64
//!   data       rows*cols f64
//!   first      rows*cols f64   only when has_adam = 1
//!   second     rows*cols f64   only when has_adam = 1
//! ```
//!
//! Files are written in one pass, so two saves of equal content are
//! byte-identical.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::params::{AdamSlots, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DTPPOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: String,
    pub store: ParamStore,
}

pub fn config_hash(config: &str) -> u64 {
    let digest = Sha256::digest(config.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        for text in [&self.config, &self.meta] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        let adam = self.store.adam();
        out.push(u8::from(adam.is_some()));
        if let Some(a) = adam {
            out.extend_from_slice(&a.step.to_le_bytes());
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (id, name, value) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.cols() as u64).to_le_bytes());
            let mut put = |t: &Tensor| {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            };
            put(value);
            if let Some(a) = adam {
                put(&a.first[id.0]);
                put(&a.second[id.0]);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::CorruptFile {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::FormatVersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let stored_hash = r.u64()?;
        let config = r.text_u32()?;
        let computed = config_hash(&config);
        if computed != stored_hash {
            return Err(CheckpointError::ConfigHashMismatch {
                stored: stored_hash,
                computed,
            });
        }
        let meta = r.text_u32()?;
        let has_adam = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::CorruptFile {
                    offset: r.pos - 1,
                    reason: format!("adam flag {other}"),
                })
            }
        };
        let adam_step = if has_adam { Some(r.u64()?) } else { None };
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                CheckpointError::CorruptFile {
                    offset: at,
                    reason: "parameter name is not UTF-8".into(),
                }
            })?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let value = r.tensor(rows, cols)?;
            let at = r.pos;
            store.insert(name, value).map_err(|e| CheckpointError::CorruptFile {
                offset: at,
                reason: e.to_string(),
            })?;
            if has_adam {
                first.push(r.tensor(rows, cols)?);
                second.push(r.tensor(rows, cols)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptFile {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        if let Some(step) = adam_step {
            store
                .set_adam(AdamSlots { first, second, step })
                .map_err(|e| CheckpointError::CorruptFile {
                    offset: r.pos,
                    reason: e.to_string(),
                })?;
        }
        Ok(Self { config, meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::CorruptFile {
                offset: self.bytes.len(),
                reason: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text_u32(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::CorruptFile {
            offset: at,
            reason: "text block is not UTF-8".into(),
        })
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
        let n = rows.checked_mul(cols).ok_or_else(|| CheckpointError::CorruptFile {
            offset: self.pos,
            reason: "tensor size overflow".into(),
        })?;
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data).expect("length checked"))
    }
}
