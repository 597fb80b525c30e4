//! Binary checkpoint container.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! magic bytes
//! version
//! config entry count, then per entry: key length, key, value length, value
//! tensor count, then per tensor: name length, name, rank, dims..., f32 data
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet, Real};

pub const VERSION: u32 = 1;

/// Ordered `key = value` pairs stored ahead of the tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigBlock {
    pub entries: Vec<(String, String)>,
}

impl ConfigBlock {
    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint config {key} = {raw:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ConfigBlock,
    pub tensors: ParamSet<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode<F: Real>(magic: &[u8], config: &ConfigBlock, tensors: &ParamSet<F>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(magic.len() + 4 * tensors.num_values() + 1024);
    buf.extend_from_slice(magic);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, config.entries.len());
    for (k, v) in &config.entries {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    put_u32(&mut buf, tensors.tensors.len());
    for t in &tensors.tensors {
        put_str(&mut buf, &t.name);
        put_u32(&mut buf, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut buf, d);
        }
        for v in &t.data {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode(magic: &[u8], bytes: &[u8]) -> Result<Container> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::Version(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut cur = Cursor {
        bytes,
        pos: magic.len(),
    };
    let version = cur.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version(format!(
            "file version {version}, supported {VERSION}"
        )));
    }
    let n_entries = cur.u32("config count")?;
    let mut config = ConfigBlock::default();
    for _ in 0..n_entries {
        let k = cur.string("config key")?;
        let v = cur.string("config value")?;
        config.entries.push((k, v));
    }
    let n_tensors = cur.u32("tensor count")?;
    let mut tensors = ParamSet::new();
    for _ in 0..n_tensors {
        let name = cur.string("tensor name")?;
        let rank = cur.u32("tensor rank")?;
        let shape = (0..rank)
            .map(|_| cur.u32("tensor dims"))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.tensors.push(Param { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensors",
            bytes.len() - cur.pos
        )));
    }
    Ok(Container { config, tensors })
}

pub fn write_file<F: Real>(
    path: &Path,
    magic: &[u8],
    config: &ConfigBlock,
    tensors: &ParamSet<F>,
) -> Result<()> {
    std::fs::write(path, encode(magic, config, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: &[u8]) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}
