//! The `S3L1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "S3L1" | version u32 | spec digest [32] | seed u64 | epoch u64 | stage u64
//! | meta_len u32 | meta (UTF-8 JSON)
//! | n_tensors u32 | { name_len u16 | name | dtype u8 | rank u8 | dims u64×rank
//!                    | byte_len u64 | payload }*
//! | sha256 of everything above [32]
//! ```
//!
//! Payloads are f32 (dtype code 0). The trailing hash catches corruption that
//! the length fields alone would miss.

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S3L1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_digest: [u8; 32],
    pub seed: u64,
    /// Epochs completed within `stage`.
    pub epoch: u64,
    pub stage: u64,
    /// Free-form JSON the harness uses for specs, configs and history.
    pub meta: String,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_digest);
        for v in [self.seed, self.epoch, self.stage] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let meta_len = u32::try_from(self.meta.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of `{name}`")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic (not an S3L1 checkpoint)".into()));
        }
        if bytes.len() < 8 + 32 + 24 + 32 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let body_end = bytes.len() - 32;
        let hash = Sha256::digest(&bytes[..body_end]);
        let mut spec_digest = [0u8; 32];
        spec_digest.copy_from_slice(r.take(32)?);
        let (seed, epoch, stage) = (r.u64()?, r.u64()?, r.u64()?);
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?
            .to_string();
        let n = r.u32()? as usize;
        let mut tensors = IndexMap::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype code {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let byte_len = r.u64()? as usize;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(byte_len) {
                return Err(Error::Checkpoint(format!("tensor `{name}`: {byte_len} bytes for shape {shape:?}")));
            }
            let data = r
                .take(byte_len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body_end {
            return Err(Error::Checkpoint("truncated or trailing data".into()));
        }
        if hash.as_slice() != &bytes[body_end..] {
            return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
        }
        Ok(Checkpoint {
            spec_digest,
            seed,
            epoch,
            stage,
            meta,
            tensors,
        })
    }

    /// Error unless the checkpoint was written for a backbone with `digest`.
    pub fn expect_digest(&self, digest: &[u8; 32]) -> Result<()> {
        if &self.spec_digest != digest {
            return Err(Error::Checkpoint(format!(
                "backbone digest mismatch: checkpoint {}, expected {}",
                hex(&self.spec_digest),
                hex(digest)
            )));
        }
        Ok(())
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> IndexMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_group(&mut self, prefix: &str, tensors: IndexMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v);
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write atomically: a sibling temp file renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // The final 32 bytes are the checksum, never payload.
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len() - 32);
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
