//! Binary weight checkpoints.
//!
//! ```text
//! magic   b"PVCK"
//! version u32 = 1
//! count   u32
//! entry*  name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!         data f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian; entries follow parameter
//! registration order.

use crate::diff::{Array, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVCK";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    encode_entries(store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

pub fn encode_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Array)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(r.remaining() / 8));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: rank {rank} exceeds input"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?)
                .map_err(|_| Error::Checkpoint(format!("entry `{name}`: dimension overflows")))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: size overflows")))?;
            shape.push(d);
        }
        let nbytes = len
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: size overflows")))?;
        let raw = r.take(nbytes, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok(out)
}

/// Loads decoded values into `store`; names and shapes must match it exactly.
pub fn restore(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for ((name, value), id) in entries.iter().zip(&ids) {
        let p = store.get(*id);
        if &p.name != name || p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` {:?} does not match parameter `{}` {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    for ((_, value), id) in entries.into_iter().zip(ids) {
        store.set_value(id, value);
    }
    Ok(())
}
