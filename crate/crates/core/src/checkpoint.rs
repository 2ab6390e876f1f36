//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFRG"  u32 version
//! repeated until end of file:
//!   u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gnn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFRG";
pub const VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Serializes every tensor of `store` in store order. Tensors are written
/// with rank 2.
pub fn write_checkpoint<W: Write>(mut out: W, store: &ParamStore) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&2u32.to_le_bytes())?;
        out.write_all(&(tensor.rows() as u64).to_le_bytes())?;
        out.write_all(&(tensor.cols() as u64).to_le_bytes())?;
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store).expect("writing to memory");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return corrupt(format!("truncated {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; rank-0 and rank-1 tensors load as `1 × n` rows.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return corrupt("bad magic");
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return corrupt(format!("unsupported version {version}"));
    }
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")?;
        if len > MAX_NAME {
            return corrupt(format!("name length {len} too large"));
        }
        let name = std::str::from_utf8(cur.take(len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK {
            return corrupt(format!("{name}: rank {rank} too large"));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(cur.u64("dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= bytes.len() - cur.pos))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload larger than file")))?;
        let payload = cur.take(count * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        store
            .insert(name, Tensor::from_vec(rows, cols, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_checkpoint(&mut out, store)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
