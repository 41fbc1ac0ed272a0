//! "CKPT" files: a flat list of named 32-bit tensors.
//!
//! Layout (little-endian): magic, u32 count, then per tensor u16 name
//! length, name bytes, u32 rank, rank × u32 dims, data.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + store.num_values() * 4 + store.len() * 48);
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("ran out of bytes reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CKPT_MAGIC,
            found: magic,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
            .map_err(|_| Error::Contract(format!("non-UTF-8 tensor name in {}", path.display())))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Contract(format!(
            "{} has {} trailing bytes",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(store)
}
