//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "THMSEQCK" | version | len kind | len config-json | count
//! per tensor: len name | rank | dims.. | f32 LE data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"THMSEQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &ModelCheckpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    put_bytes(w, ckpt.kind.as_bytes())?;
    put_bytes(w, serde_json::to_string(&ckpt.config)?.as_bytes())?;
    put_u32(w, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        put_bytes(w, name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.exact(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<ModelCheckpoint> {
    let mut r = Reader { inner: r };
    if r.exact(MAGIC.len(), "header")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let kind = r.string("model kind")?;
    let config = serde_json::from_str(&r.string("config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not valid JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name}: bad rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 31))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: bad shape {shape:?}")))?;
        let bytes = r.exact(4 * numel, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", rest.len())));
    }
    Ok(ModelCheckpoint { kind, config, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
