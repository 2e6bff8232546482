//! Parameter checkpoints.
//!
//! Little-endian layout: magic `HSSP`, version `u32`, encoder config as a
//! length-prefixed JSON string, parameter count `u32`, then per parameter a
//! length-prefixed UTF-8 name, rank `u32`, dims `u32 × rank` and the `f64`
//! values.

use std::fs;
use std::path::Path;

use super::train::Model;
use crate::error::{Error, Result};
use crate::ssm::EncoderConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSSP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    let params = model.params.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |reason: &str| Error::format(path, reason);
    let truncated = || bad("truncated checkpoint");
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing HSSP magic"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.u32().ok_or_else(truncated)?;
    let cfg: EncoderConfig = serde_json::from_slice(r.take(len).ok_or_else(truncated)?)
        .map_err(|e| bad(&format!("encoder config: {e}")))?;
    let mut model = Model::new(cfg, 0)?;
    let count = r.u32().ok_or_else(truncated)?;
    if count != model.params.len() {
        return Err(bad(&format!(
            "{count} parameters stored, encoder layout has {}",
            model.params.len()
        )));
    }
    for p in model.params.params_mut() {
        let len = r.u32().ok_or_else(truncated)?;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        if name != p.name {
            return Err(bad(&format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let rank = r.u32().ok_or_else(truncated)?;
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        if shape != p.value.shape() {
            return Err(bad(&format!("parameter `{name}` has shape {shape:?}")));
        }
        let n = p.value.len();
        let raw = r.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        p.value = Tensor::new(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
