//! Binary checkpoint format.
//!
//! ```text
//! "FLMN" | version u16
//! vocab_size layers heads d_model d_ff max_seq tie_head   (u32 each)
//! dropout_rate init_std                                   (f64 bits as u64)
//! vocab digest                                            (32 bytes)
//! tensor count u32
//!   name_len u32 | name | rows u32 | cols u32 | rows*cols f64
//! checksum u64   (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! All integers and floats are little-endian.

use sha2::{Digest, Sha256};

use super::{EncoderModel, Layout, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"FLMN";

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn save_checkpoint(model: &EncoderModel, vocab_digest: &[u8; 32]) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for x in [c.vocab_size, c.layers, c.heads, c.d_model, c.d_ff, c.max_seq, c.tie_head as usize] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_rate.to_bits().to_le_bytes());
    out.extend_from_slice(&c.init_std.to_bits().to_le_bytes());
    out.extend_from_slice(vocab_digest);
    out.extend_from_slice(&(model.layout.tensors.len() as u32).to_le_bytes());
    for t in &model.layout.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for x in &model.params[t.range()] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint, returning the model and the vocabulary digest it was
/// trained against.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(EncoderModel, [u8; 32])> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing FLMN magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 14 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(payload) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::ChecksumMismatch);
    }

    let mut r = Reader { buf: payload, pos: 6 };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        layers: dims[1],
        heads: dims[2],
        d_model: dims[3],
        d_ff: dims[4],
        max_seq: dims[5],
        tie_head: dims[6] != 0,
        dropout_rate: r.f64()?,
        init_std: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();

    let layout = Layout::new(&config);
    let count = r.u32()? as usize;
    if count != layout.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            layout.tensors.len()
        )));
    }
    let mut params = vec![0.0; layout.total];
    for t in &layout.tensors {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != t.name || rows != t.rows || cols != t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` ({rows}x{cols}) does not match expected `{}` ({}x{})",
                t.name, t.rows, t.cols
            )));
        }
        for x in &mut params[t.range()] {
            *x = r.f64()?;
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((
        EncoderModel {
            config,
            layout,
            params,
        },
        digest,
    ))
}
