//! Binary parameter container: magic, format version, a length-prefixed
//! JSON header (kind, config, seed, tensor shapes) and the tensors as
//! little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm_model::{ModelConfig, ModelParams};
use crate::inference::{DownstreamHead, HeadConfig};
use crate::nn::Tensors;

pub const MAGIC: &[u8; 8] = b"TOSGCKPT";
pub const VERSION: u32 = 1;
/// Refuse headers larger than this (corrupt length prefix).
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Kind-specific dimensions needed to rebuild the parameter set.
    pub dims: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

pub fn write_checkpoint<W: Write, P: Tensors>(
    mut w: W,
    kind: &str,
    seed: u64,
    config: &impl Serialize,
    dims: serde_json::Value,
    params: &P,
) -> Result<()> {
    let named = params.named_tensors();
    let header = CheckpointHeader {
        version: VERSION,
        kind: kind.to_string(),
        seed,
        config: serde_json::to_value(config)?,
        dims,
        tensors: named
            .iter()
            .map(|(n, t)| TensorInfo {
                name: n.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in &named {
        buf.clear();
        for &v in t.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Header plus raw tensor payloads in declared order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Invalid("checkpoint is truncated".into()))?;
    if &magic != MAGIC {
        return Err(Error::Invalid("not a checkpoint file (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Invalid(format!("checkpoint header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Invalid("checkpoint header is truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut data = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Invalid(format!("tensor `{}` is truncated", t.name)))?;
        data.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Invalid("trailing bytes after the last tensor".into()));
    }
    Ok((header, data))
}

/// Copies payloads into `params`, checking names and shapes.
pub fn fill<P: Tensors>(params: &mut P, header: &CheckpointHeader, data: &[Vec<f32>]) -> Result<()> {
    let expected: Vec<TensorInfo> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| TensorInfo {
            name: n.clone(),
            shape: [t.rows(), t.cols()],
        })
        .collect();
    if expected != header.tensors {
        return Err(Error::Shape(
            "checkpoint tensors do not match the configured architecture".into(),
        ));
    }
    for (t, d) in params.tensors_mut().into_iter().zip(data) {
        for (p, &v) in t.as_mut_slice().iter_mut().zip(d) {
            *p = f64::from(v);
        }
    }
    Ok(())
}

fn expect_kind(header: &CheckpointHeader, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Invalid(format!(
            "expected a `{kind}` checkpoint, found `{}`",
            header.kind
        )));
    }
    Ok(())
}

fn dim(header: &CheckpointHeader, key: &str) -> Result<usize> {
    header.dims[key]
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::Invalid(format!("checkpoint header lacks `{key}`")))
}

pub fn save_pretrained(path: &Path, cfg: &ModelConfig, text_dim: usize, params: &ModelParams) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(
        std::io::BufWriter::new(f),
        "pretrain",
        cfg.seed,
        cfg,
        serde_json::json!({ "text_dim": text_dim }),
        params,
    )
}

pub fn load_pretrained(path: &Path) -> Result<(ModelConfig, usize, ModelParams)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = read_checkpoint(std::io::BufReader::new(f))?;
    expect_kind(&header, "pretrain")?;
    let cfg: ModelConfig = serde_json::from_value(header.config.clone())?;
    cfg.validate()?;
    let text_dim = dim(&header, "text_dim")?;
    let mut params = ModelParams::init(&cfg, text_dim);
    fill(&mut params, &header, &data)?;
    Ok((cfg, text_dim, params))
}

pub fn save_head(
    path: &Path,
    cfg: &HeadConfig,
    input_dim: usize,
    text_dim: usize,
    head: &DownstreamHead,
) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(
        std::io::BufWriter::new(f),
        "head",
        cfg.seed,
        cfg,
        serde_json::json!({ "input_dim": input_dim, "text_dim": text_dim, "classes": head.classes }),
        head,
    )
}

pub fn load_head(path: &Path) -> Result<(HeadConfig, DownstreamHead)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = read_checkpoint(std::io::BufReader::new(f))?;
    expect_kind(&header, "head")?;
    let cfg: HeadConfig = serde_json::from_value(header.config.clone())?;
    let classes: Vec<String> = serde_json::from_value(header.dims["classes"].clone())?;
    let mut head = DownstreamHead::new(&cfg, dim(&header, "input_dim")?, dim(&header, "text_dim")?, classes)?;
    fill(&mut head, &header, &data)?;
    Ok((cfg, head))
}

/// Rounds every parameter through `f32`, matching what a reload yields.
pub fn quantize<P: Tensors>(params: &mut P) {
    for t in params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v = f64::from(*v as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrained_round_trip() {
        let cfg = ModelConfig {
            d: 5,
            d_prime: 4,
            decoder_hidden: vec![3],
            ..Default::default()
        };
        let mut params = ModelParams::init(&cfg, 6);
        quantize(&mut params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_pretrained(&path, &cfg, 6, &params).unwrap();
        let (cfg2, tdim, loaded) = load_pretrained(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(tdim, 6);
        assert_eq!(loaded, params);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn head_round_trip() {
        let cfg = HeadConfig::default();
        let mut head = DownstreamHead::new(&cfg, 4, 3, vec!["x".into(), "y".into()]).unwrap();
        quantize(&mut head);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        save_head(&path, &cfg, 4, 3, &head).unwrap();
        let (_, loaded) = load_head(&path).unwrap();
        assert_eq!(loaded, head);
        assert!(load_pretrained(&path).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 2);
        let mut buf = Vec::new();
        write_checkpoint(
            &mut buf,
            "pretrain",
            0,
            &cfg,
            serde_json::json!({"text_dim": 2}),
            &params,
        )
        .unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());

        let (header, data) = read_checkpoint(&buf[..]).unwrap();
        let mut other = ModelParams::init(&ModelConfig { d: 3, ..cfg }, 2);
        assert!(fill(&mut other, &header, &data).is_err());
    }
}
