//! Binary model files.
//!
//! Layout (little-endian): `CESMUNET`, u32 version, six u32 config fields
//! (base, depth, dropout numerator, dropout denominator, in, out), then one
//! record per tensor (u32 name length, UTF-8 name, u32 rank, u32 extents,
//! f32 data), then a CRC-32 of every preceding byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;
use super::unet::UNetConfig;
use super::{ParamSet, TranslatorError};

pub const MAGIC: &[u8; 8] = b"CESMUNET";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const DROPOUT_DENOMINATOR: u32 = 1_000_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum failure: file is corrupt or truncated")]
    Checksum,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Translator(#[from] TranslatorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32, ModelError> {
    u32::try_from(v).map_err(|_| ModelError::Malformed(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_model(params: &ParamSet<f32>, cfg: &UNetConfig) -> Result<Vec<u8>, ModelError> {
    cfg.validate()?;
    cfg.check_params(params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, MODEL_FORMAT_VERSION);
    let num = (cfg.dropout_p * DROPOUT_DENOMINATOR as f64).round() as u32;
    for v in [
        to_u32(cfg.base_channels, "base_channels")?,
        to_u32(cfg.depth, "depth")?,
        num,
        DROPOUT_DENOMINATOR,
        to_u32(cfg.in_channels, "in_channels")?,
        to_u32(cfg.out_channels, "out_channels")?,
    ] {
        put_u32(&mut buf, v);
    }
    for (name, t) in params.entries() {
        put_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, to_u32(t.shape().len(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut buf, to_u32(d, "extent")?);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Malformed("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(ParamSet<f32>, UNetConfig), ModelError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(ModelError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Checksum);
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let base = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let num = r.u32()?;
    let den = r.u32()?;
    if den == 0 {
        return Err(ModelError::Malformed("zero dropout denominator".into()));
    }
    let cfg = UNetConfig {
        base_channels: base,
        depth,
        dropout_p: num as f64 / den as f64,
        in_channels: r.u32()? as usize,
        out_channels: r.u32()? as usize,
    };
    cfg.validate()?;
    let mut entries = Vec::new();
    while r.pos < body.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if rank == 0 || shape.contains(&0) {
            return Err(ModelError::Malformed(format!("tensor {name} has an empty shape")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)));
    }
    let params = ParamSet::new(entries);
    cfg.check_params(&params)?;
    Ok((params, cfg))
}

pub fn save_model(params: &ParamSet<f32>, cfg: &UNetConfig, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_model(params, cfg)?;
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<(ParamSet<f32>, UNetConfig), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::init_params;

    fn sample() -> (ParamSet<f32>, UNetConfig) {
        let cfg = UNetConfig { base_channels: 4, depth: 2, ..UNetConfig::default() };
        (init_params(&cfg, 42), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&p, &cfg, &path).unwrap();
        let (q, c2) = load_model(&path).unwrap();
        assert_eq!(c2, cfg);
        for (a, b) in p.tensors().zip(q.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(p, q);
    }

    #[test]
    fn corruption_is_detected() {
        let (p, cfg) = sample();
        let bytes = encode_model(&p, &cfg).unwrap();
        assert!(matches!(decode_model(&bytes[..bytes.len() - 10]), Err(ModelError::Checksum)));
        assert!(matches!(decode_model(&bytes[..12]), Err(ModelError::Checksum)));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(ModelError::Checksum)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(ModelError::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (p, cfg) = sample();
        let mut bytes = encode_model(&p, &cfg).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(ModelError::Version { found: 7, .. })));
    }
}
