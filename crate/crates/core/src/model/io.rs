//! EVQM model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EVQM" | version u8 | n_config u32 | n_config × u32
//! n_records u32 | records | payloads
//! record := name_len u16 | name utf-8 | dtype u8 (0 = f32) | ndim u8 | ndim × u32 | offset u64
//! ```
//!
//! The config integers are, in order: embed_dim, heads, blocks, tokens,
//! classes, mlp_dim, weight_bits, activation_bits. Record offsets are
//! relative to the start of the payload section. Every quantization scale
//! vector is stored as `blocks.{b}.scale.{point}`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Block, BlockWeights, Model, Point, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVQM";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const CONFIG_FIELDS: usize = 8;

fn records(model: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let mut push =
        |name: String, t: &Tensor| out.push((name, t.shape().to_vec(), t.data().to_vec()));
    for (b, block) in model.blocks.iter().enumerate() {
        for (h, t) in block.wq.iter().enumerate() {
            push(format!("blocks.{b}.wq.{h}"), t);
        }
        for (h, t) in block.wk.iter().enumerate() {
            push(format!("blocks.{b}.wk.{h}"), t);
        }
        for (h, t) in block.wv.iter().enumerate() {
            push(format!("blocks.{b}.wv.{h}"), t);
        }
        push(format!("blocks.{b}.wo"), &block.wo);
        push(format!("blocks.{b}.fc1.weight"), &block.fc1);
        push(format!("blocks.{b}.fc2.weight"), &block.fc2);
        let vectors = [
            ("fc1.bias", &block.fc1_bias),
            ("fc2.bias", &block.fc2_bias),
            ("ln1.gamma", &block.ln1_gamma),
            ("ln1.beta", &block.ln1_beta),
            ("ln2.gamma", &block.ln2_gamma),
            ("ln2.beta", &block.ln2_beta),
        ];
        for (name, v) in vectors {
            push(format!("blocks.{b}.{name}"), &Tensor::from_vec(v.clone()));
        }
        for (point, scale) in model.block_scale_vectors(b) {
            push(
                format!("blocks.{b}.scale.{point}"),
                &Tensor::from_vec(scale.to_vec()),
            );
        }
    }
    push("head.weight".into(), &model.head_weight);
    push(
        "head.bias".into(),
        &Tensor::from_vec(model.head_bias.clone()),
    );
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(CONFIG_FIELDS as u32).to_le_bytes());
    for v in [
        c.embed_dim,
        c.heads,
        c.blocks,
        c.tokens,
        c.classes,
        c.hidden_dim(),
        c.weight_bits as usize,
        c.activation_bits as usize,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let recs = records(model);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &recs {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(shape.len() as u8);
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * data.len() as u64;
    }
    for (_, _, data) in &recs {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
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
}

struct Record {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected EVQM"));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let at = cur.pos as u64;
    let n_config = cur.u32("config count")? as usize;
    if n_config != CONFIG_FIELDS {
        return Err(Error::format(
            at,
            format!("expected {CONFIG_FIELDS} config fields, found {n_config}"),
        ));
    }
    let mut cfg = [0usize; CONFIG_FIELDS];
    for v in cfg.iter_mut() {
        *v = cur.u32("config")? as usize;
    }
    let bits = |v: usize| {
        u8::try_from(v).map_err(|_| Error::format(at, format!("bit-width {v} out of range")))
    };
    let config = ViTConfig {
        embed_dim: cfg[0],
        heads: cfg[1],
        blocks: cfg[2],
        tokens: cfg[3],
        classes: cfg[4],
        mlp_dim: Some(cfg[5]),
        weight_bits: bits(cfg[6])?,
        activation_bits: bits(cfg[7])?,
    };
    config
        .validate()
        .map_err(|e| Error::format(at, e.to_string()))?;

    let n_records = cur.u32("record count")? as usize;
    let mut headers = Vec::with_capacity(n_records.min(1 << 16));
    for _ in 0..n_records {
        let rec_at = cur.pos as u64;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(rec_at, "record name is not utf-8"))?
            .to_string();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(
                rec_at,
                format!("record {name}: unsupported dtype {dtype}"),
            ));
        }
        let ndim = cur.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dim")? as usize);
        }
        let offset = cur.u64("offset")?;
        headers.push((rec_at, name, shape, offset));
    }
    let payload = cur.pos;
    let mut table = HashMap::with_capacity(headers.len());
    for (rec_at, name, shape, offset) in headers {
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| n.checked_mul(4).is_some())
            .unwrap_or(usize::MAX / 4);
        let start = usize::try_from(offset)
            .ok()
            .and_then(|o| o.checked_add(payload))
            .filter(|s| s.checked_add(4 * n).is_some_and(|e| e <= bytes.len()))
            .ok_or_else(|| {
                Error::format(rec_at, format!("record {name}: payload out of bounds"))
            })?;
        let data = bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if table.insert(name.clone(), Record { shape, data }).is_some() {
            return Err(Error::format(rec_at, format!("duplicate record {name}")));
        }
    }

    let end = payload as u64;
    let mut tensor = |name: String| -> Result<Tensor> {
        let r = table
            .remove(&name)
            .ok_or_else(|| Error::format(end, format!("missing record {name}")))?;
        Tensor::new(r.shape, r.data).map_err(|e| Error::format(end, format!("{name}: {e}")))
    };
    let mut blocks = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        let mut per_head = |kind: &str| {
            (0..config.heads)
                .map(|h| tensor(format!("blocks.{b}.{kind}.{h}")))
                .collect::<Result<Vec<_>>>()
        };
        let (wq, wk, wv) = (per_head("wq")?, per_head("wk")?, per_head("wv")?);
        let mut named = |name: &str| tensor(format!("blocks.{b}.{name}"));
        let weights = BlockWeights {
            wq,
            wk,
            wv,
            wo: named("wo")?,
            fc1: named("fc1.weight")?,
            fc1_bias: named("fc1.bias")?.into_data(),
            fc2: named("fc2.weight")?,
            fc2_bias: named("fc2.bias")?.into_data(),
            ln1: (
                named("ln1.gamma")?.into_data(),
                named("ln1.beta")?.into_data(),
            ),
            ln2: (
                named("ln2.gamma")?.into_data(),
                named("ln2.beta")?.into_data(),
            ),
        };
        let scales = Point::canonical(config.heads)
            .into_iter()
            .map(|p| named(&format!("scale.{p}")).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        let block = Block::assemble(&config, weights, Some(scales))
            .map_err(|e| Error::format(end, format!("block {b}: {e}")))?;
        blocks.push(block);
    }
    let head_weight = tensor("head.weight".into())?;
    let head_bias = tensor("head.bias".into())?.into_data();
    if let Some(name) = table.keys().next() {
        return Err(Error::format(end, format!("unexpected record {name}")));
    }
    Model::from_parts(config, blocks, head_weight, head_bias)
        .map_err(|e| Error::format(end, e.to_string()))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
