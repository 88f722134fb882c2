//! Binary checkpoint format.
//!
//! ```text
//! "MVCK" | u32 version | u32 record count | records...
//! record: u32 name len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 LE payload
//! ```
//!
//! All integers are little-endian. The first record, `__model_config__`, holds
//! the model configuration as a rank-1 float vector of small integers.

use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{param_shapes, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVCK";
pub const VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "__model_config__";

fn encode_config(cfg: &ModelConfig) -> Vec<f32> {
    let mut v = vec![
        cfg.image_size,
        cfg.stem_channels,
        cfg.latent_dim,
        cfg.hidden_dim,
        cfg.num_classes,
        cfg.stage_blocks.len(),
    ];
    v.extend(&cfg.stage_blocks);
    v.extend(&cfg.stage_dims);
    v.into_iter().map(|x| x as f32).collect()
}

fn decode_config(v: &[f32]) -> Result<ModelConfig> {
    let bad = || Error::Checkpoint("malformed model config record".into());
    let ints = v
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        })
        .collect::<Result<Vec<usize>>>()?;
    let (head, rest) = ints.split_at_checked(6).ok_or_else(bad)?;
    let stages = head[5];
    if rest.len() != 2 * stages {
        return Err(bad());
    }
    let cfg = ModelConfig {
        image_size: head[0],
        stem_channels: head[1],
        latent_dim: head[2],
        hidden_dim: head[3],
        num_classes: head[4],
        stage_blocks: rest[..stages].to_vec(),
        stage_dims: rest[stages..].to_vec(),
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    Ok(cfg)
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

pub fn to_bytes(model: &ModelParams<f32>) -> Vec<u8> {
    let named = model.named();
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((named.len() as u32 + 1).to_le_bytes());
    let cfg = encode_config(&model.config);
    put_record(&mut out, CONFIG_RECORD, &[cfg.len()], &cfg);
    for (name, t) in named {
        put_record(&mut out, &name, t.shape(), t.data());
    }
    out
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(b))
}

fn truncated() -> Error {
    Error::Checkpoint("unexpected end of file".into())
}

fn read_record(r: &mut Cursor<&[u8]>) -> Result<Record> {
    let remaining = |r: &Cursor<&[u8]>| r.get_ref().len() as u64 - r.position();
    let len = read_u32(r)? as u64;
    if len > remaining(r) {
        return Err(truncated());
    }
    let mut name = vec![0; len as usize];
    r.read_exact(&mut name).map_err(|_| truncated())?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let rank = read_u32(r)?;
    if rank as u64 * 8 > remaining(r) {
        return Err(truncated());
    }
    let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let n = match n {
        Some(n) if n * 4 <= remaining(r) => n as usize,
        _ => return Err(truncated()),
    };
    let mut bytes = vec![0; n * 4];
    r.read_exact(&mut bytes).map_err(|_| truncated())?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Record { name, shape, data })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing MVCK magic".into()));
    }
    let mut r = Cursor::new(bytes);
    r.set_position(4);
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let first = read_record(&mut r)?;
    if first.name != CONFIG_RECORD {
        return Err(Error::Checkpoint(format!("expected {CONFIG_RECORD} first, found `{}`", first.name)));
    }
    let config = decode_config(&first.data)?;
    let shapes = param_shapes(&config);
    let names = shapes.names();
    if count != names.len() + 1 {
        return Err(Error::Checkpoint(format!(
            "{} records for a model with {} parameters",
            count.saturating_sub(1),
            names.len()
        )));
    }
    let mut records = Vec::with_capacity(names.len());
    for _ in 0..names.len() {
        records.push(read_record(&mut r)?);
    }
    if r.position() as usize != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    let mut it = records.into_iter();
    let weights = shapes.try_map(|name, shape| {
        let rec = it.next().expect("count checked");
        if rec.name != name || rec.shape != *shape {
            return Err(Error::Checkpoint(format!(
                "record `{}` {:?} where `{name}` {shape:?} was expected",
                rec.name, rec.shape
            )));
        }
        Ok(Tensor::new(rec.shape, rec.data)?.with_grad())
    })?;
    Ok(ModelParams { config, weights })
}

pub fn save(model: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
