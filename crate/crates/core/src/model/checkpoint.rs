//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "FGCK" | u32 version
//! config:  u32 input_dim, model_dim, n_blocks, n_heads, conv_kernel, ffn_mult
//!          f64 dropout | u64 seed | u32 n_layers | (u32 kernel, u32 out) × n_layers
//! tensors: u32 count | (u32 name_len, name, u32 rank, u32 dims × rank, f64 data) × count
//! ```

use std::path::Path;

use super::{ClassifierConfig, EncoderConfig, Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    let e = &model.config().encoder;
    for v in [
        e.input_dim,
        e.model_dim,
        e.n_blocks,
        e.n_heads,
        e.conv_kernel,
        e.ffn_mult,
    ] {
        w.u32(v);
    }
    w.f64(e.dropout);
    w.u64(e.seed);
    let layers = &model.config().classifier.layers;
    w.u32(layers.len());
    for &(k, o) in layers {
        w.u32(k);
        w.u32(o);
    }
    let p = model.params();
    w.u32(p.len());
    for (name, t) in p.names().iter().zip(p.tensors()) {
        w.u32(name.len());
        w.0.extend_from_slice(name.as_bytes());
        w.u32(t.rank());
        for &d in t.shape() {
            w.u32(d);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let encoder = EncoderConfig {
        input_dim: r.u32()?,
        model_dim: r.u32()?,
        n_blocks: r.u32()?,
        n_heads: r.u32()?,
        conv_kernel: r.u32()?,
        ffn_mult: r.u32()?,
        dropout: r.f64()?,
        seed: r.u64()?,
    };
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        layers.push((r.u32()?, r.u32()?));
    }
    let count = r.u32()?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        if rank > 3 {
            return Err(Error::Checkpoint(format!("rank {} > 3", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} too large", name)))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        store.push(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::from_params(
        ModelConfig {
            encoder,
            classifier: ClassifierConfig { layers },
        },
        store,
    )
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    crate::features::io::write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    decode_checkpoint(&bytes)
}
