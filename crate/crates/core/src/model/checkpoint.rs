//! Binary checkpoint format.
//!
//! ```text
//! "AVCK1"
//! u32 len, UTF-8 "key=value\n" lines
//! u32 parameter count
//! per parameter: u32 len, UTF-8 name, u32 rank, u32 dims…, f32 values…
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::compute::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"AVCK1";

/// Model plus free-form metadata stored alongside the architecture keys.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: BTreeMap<String, String>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model<f32>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut block = String::new();
    for (k, v) in model.config.to_pairs() {
        block.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Contract(format!("metadata entry {k:?} cannot be stored")));
        }
        if ModelConfig::keys().contains(&k.as_str()) {
            return Err(Error::Contract(format!("metadata key {k} shadows a model key")));
        }
        block.push_str(&format!("{k}={v}\n"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_str(&mut buf, &block);
    put_u32(&mut buf, model.params.len());
    for (name, t) in model.params.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.rank());
        for &d in t.dims() {
            put_u32(&mut buf, d);
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let block = r.string()?;
    let mut map = BTreeMap::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad checkpoint config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_map(&map)?;
    let meta = map
        .into_iter()
        .filter(|(k, _)| !ModelConfig::keys().contains(&k.as_str()))
        .collect();
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    let model = Model::from_parts(config, params)?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
