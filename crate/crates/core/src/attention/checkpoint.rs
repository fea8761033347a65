//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"RELPOSCK"
//! version  u32
//! n_pairs  u32, then n_pairs × (key: str, value: str)
//! n_blocks u32, then n_blocks × (name: str, ndim: u32, dims: ndim × u64, values: f64 × numel)
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::path::Path;

use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::posembed::PositionMethod;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RELPOSCK";
pub const FORMAT_VERSION: u32 = 1;

fn config_pairs(cfg: &EncoderConfig) -> Vec<(String, String)> {
    let clip = cfg.method.clip_k.map_or_else(|| "none".to_string(), |k| k.to_string());
    vec![
        ("layers".into(), cfg.layers.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("d_x".into(), cfg.d_x.to_string()),
        ("d_z".into(), cfg.d_z.to_string()),
        ("max_len".into(), cfg.max_len.to_string()),
        ("d_ff".into(), cfg.d_ff.to_string()),
        ("vocab".into(), cfg.vocab.to_string()),
        ("method".into(), cfg.method.kind.name().to_string()),
        ("clip_k".into(), clip),
        ("xlnet_bias".into(), cfg.method.xlnet_bias_enabled.to_string()),
    ]
}

fn config_from_pairs(pairs: &[(String, String)]) -> Result<EncoderConfig> {
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing header key {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("header key {key} is not an integer")))
    };
    let clip_k = match get("clip_k")? {
        "none" => None,
        v => Some(v.parse().map_err(|_| Error::Format("bad clip_k".into()))?),
    };
    let method = PositionMethod {
        kind: get("method")?.parse()?,
        clip_k,
        xlnet_bias_enabled: get("xlnet_bias")? == "true",
    };
    Ok(EncoderConfig {
        layers: num("layers")?,
        heads: num("heads")?,
        d_x: num("d_x")?,
        d_z: num("d_z")?,
        max_len: num("max_len")?,
        d_ff: num("d_ff")?,
        vocab: num("vocab")?,
        method,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(encoder: &Encoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let pairs = config_pairs(encoder.config());
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let store = encoder.store();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Encoder> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let n_pairs = r.u32()?;
    let pairs = (0..n_pairs)
        .map(|_| Ok((r.str()?, r.str()?)))
        .collect::<Result<Vec<_>>>()?;
    let config = config_from_pairs(&pairs)?;
    let mut encoder = Encoder::new(config, 0)?;
    let n_blocks = r.u32()? as usize;
    if n_blocks != encoder.store().len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_blocks} parameter blocks, model expects {}",
            encoder.store().len()
        )));
    }
    for _ in 0..n_blocks {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = encoder
            .store()
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter block {name}")))?;
        encoder.store_mut().set_value(id, Tensor::new(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    Ok(encoder)
}

pub fn save(encoder: &Encoder, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(encoder))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Encoder> {
    from_bytes(&std::fs::read(path)?)
}
