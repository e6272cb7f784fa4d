//! Binary checkpoint files.
//!
//! All integers are little-endian.
//!
//! | field   | type              | content                                   |
//! |---------|-------------------|-------------------------------------------|
//! | magic   | 4 bytes           | `PAED`                                    |
//! | version | u16               | 1                                         |
//! | config  | u32 + UTF-8 bytes | resolved run configuration, `key = value` |
//! | count   | u32               | number of parameter records               |
//! | records | see below         | in the network's parameter order          |
//!
//! Each record is a u16 name length, the UTF-8 name, a u8 rank, `rank`
//! u32 extents and then every value as an f32 in row-major order.

use std::path::Path;

use paed_core::model::Network;
use paed_core::{NdBuffer, Real};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PAED";
pub const VERSION: u16 = 1;

/// Named parameter records in file order.
pub type Records = Vec<(String, NdBuffer<f32>)>;

pub fn encode<S: Real>(cfg: &RunConfig, net: &Network<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = cfg.echo();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let entries = net.params().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.path,
                    None,
                    format!("truncated checkpoint while reading {what}"),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let b = self.take(n, what)?;
        std::str::from_utf8(b)
            .map_err(|_| Error::format(self.path, None, format!("{what} is not UTF-8")))
    }
}

/// Parsed checkpoint contents: the run configuration and the raw records.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(RunConfig, Records)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, None, "not a checkpoint (bad magic)"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            None,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let n = r.u32("config length")? as usize;
    let cfg = RunConfig::parse(r.text(n, "config")?)
        .map_err(|e| Error::format(path, None, format!("embedded config: {e}")))?;
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = r.text(n, "parameter name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product::<usize>();
        let raw = r.take(len.saturating_mul(4), &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = NdBuffer::new(&shape, values)
            .map_err(|e| Error::format(path, None, format!("`{name}`: {e}")))?;
        records.push((name, value));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            None,
            "trailing bytes after the last record",
        ));
    }
    Ok((cfg, records))
}

/// Network described by a decoded checkpoint. Every parameter of the
/// configured layout must be present exactly once with the same shape.
pub fn restore<S: Real>(
    cfg: &RunConfig,
    records: &[(String, NdBuffer<f32>)],
    path: &Path,
) -> Result<Network<S>> {
    let incompatible = |m: String| Error::format(path, None, m);
    let model = cfg
        .model_config()
        .map_err(|e| incompatible(format!("embedded config: {e}")))?;
    let mut net = Network::<S>::new(model, 0)?;
    if records.len() != net.params().len() {
        return Err(incompatible(format!(
            "{} parameter records, the configured model has {}",
            records.len(),
            net.params().len()
        )));
    }
    let store = net.params_mut();
    for (name, value) in records {
        let id = store
            .id(name)
            .ok_or_else(|| incompatible(format!("unexpected parameter `{name}`")))?;
        let slot = store.value_mut(id);
        if slot.shape() != value.shape() {
            return Err(incompatible(format!(
                "parameter `{name}`: expected shape {:?}, found {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value.cast();
    }
    Ok(net)
}

pub fn save<S: Real>(path: &Path, cfg: &RunConfig, net: &Network<S>) -> Result<()> {
    std::fs::write(path, encode(cfg, net)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Real>(path: &Path) -> Result<(RunConfig, Network<S>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, records) = decode(&bytes, path)?;
    let net = restore(&cfg, &records, path)?;
    Ok((cfg, net))
}
