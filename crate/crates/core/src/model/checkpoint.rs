//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "METAPREP-CKPT v1\n"
//! repeated per parameter:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank x u64 extents
//!     product(extents) x f64
//! u64 byte length of everything above
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};

pub const MAGIC: &[u8] = b"METAPREP-CKPT v1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a metaprep checkpoint (bad header)")]
    BadHeader,
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
}

pub fn write_checkpoint(mut w: impl Write, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(MAGIC.len() + 16 * params.len() + 8 * params.num_scalars());
    buf.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let len = buf.len() as u64;
    buf.extend_from_slice(&len.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("record overruns at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamSet, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if !bytes.starts_with(MAGIC) {
        return Err(CheckpointError::BadHeader);
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Corrupt("missing length trailer".into()));
    }
    let body_len = bytes.len() - 8;
    let trailer = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
    if trailer != body_len as u64 {
        return Err(CheckpointError::Corrupt(format!(
            "length trailer says {trailer} bytes, found {body_len}"
        )));
    }
    let mut cur = Cursor {
        bytes: &bytes[..body_len],
        at: MAGIC.len(),
    };
    let mut params = ParamSet::new();
    while cur.at < body_len {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: extent overflow")))?;
        let raw = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: extent overflow")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params
            .insert(name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    write_checkpoint(&mut f, params)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet, CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}
