//! Binary checkpoint container shared by tracker and defense networks.
//!
//! Layout (little-endian): magic, format version (u32), kind string,
//! JSON config echo, tensor table, then the SHA-256 of everything before it.
//! Tensors keep their stored dtype so a round trip is bitwise.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tracker::{TrackerConfig, TrackerModel};

const MAGIC: &[u8; 8] = b"ADVDEFCK";
pub const FORMAT_VERSION: u32 = 1;
pub const TRACKER_KIND: &str = "tracker";

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes a checkpoint with the current format version.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode_version(ckpt, FORMAT_VERSION)
}

fn encode_version(ckpt: &Checkpoint, version: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    put_bytes(&mut out, ckpt.kind.as_bytes());
    put_bytes(&mut out, serde_json::to_string(&ckpt.config)?.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_bytes(&mut out, name.as_bytes());
        let dims = t.dims().to_vec();
        let t = t.flatten_all()?;
        let (code, raw): (u8, Vec<u8>) = match t.dtype() {
            DType::F32 => (0, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
            DType::F64 => (1, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
            other => return Err(Error::Config(format!("cannot store {other:?} tensors"))),
        };
        out.push(code);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&raw);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}

/// Parses and verifies a serialized checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let kind = r.string()?;
    let config = serde_json::from_str(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let code = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match code {
            0 => {
                let raw = r.take(n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = r.take(n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(Error::Corrupt(format!("unknown dtype code {other}"))),
        };
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { kind, config, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a checkpoint and checks its kind tag.
pub fn read_checkpoint_kind(path: &Path, expected: &str) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind != expected {
        return Err(Error::CheckpointKind {
            expected: expected.into(),
            found: ckpt.kind,
        });
    }
    Ok(ckpt)
}

pub fn save_tracker(model: &TrackerModel, path: &Path) -> Result<()> {
    write_checkpoint(
        path,
        &Checkpoint {
            kind: TRACKER_KIND.into(),
            config: serde_json::to_value(model.config())?,
            tensors: model.params().snapshot()?,
        },
    )
}

/// Loads a tracker with frozen (non-trainable) parameters.
pub fn load_tracker(path: &Path, dtype: DType) -> Result<TrackerModel> {
    let ckpt = read_checkpoint_kind(path, TRACKER_KIND)?;
    let cfg: TrackerConfig = serde_json::from_value(ckpt.config)?;
    TrackerModel::from_tensors(&cfg, &ckpt.tensors, dtype, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let dev = Device::Cpu;
        Checkpoint {
            kind: "demo".into(),
            config: serde_json::json!({ "a": 1 }),
            tensors: vec![
                ("w".into(), Tensor::from_vec(vec![0.1f32, -2.5, 3.0, 1e-30], (2, 2), &dev).unwrap()),
                ("b".into(), Tensor::from_vec(vec![std::f64::consts::PI], 1, &dev).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back.kind, "demo");
        assert_eq!(back.config, c.config);
        assert_eq!(back.tensors[0].1.to_vec2::<f32>().unwrap(), c.tensors[0].1.to_vec2::<f32>().unwrap());
        assert_eq!(back.tensors[1].1.to_vec1::<f64>().unwrap(), vec![std::f64::consts::PI]);
        assert_eq!(back.tensors[0].1.dims(), &[2, 2]);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 5] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
        let old = encode_version(&sample(), 99).unwrap();
        assert!(matches!(decode(&old), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn tracker_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = TrackerModel::new(&TrackerConfig::micro(), 3, DType::F32).unwrap();
        save_tracker(&model, &path).unwrap();
        let back = load_tracker(&path, DType::F32).unwrap();
        assert_eq!(back.params().checksum().unwrap(), model.params().checksum().unwrap());
        assert!(!back.params().is_trainable());
        assert!(matches!(read_checkpoint_kind(&path, "defense-search"), Err(Error::CheckpointKind { .. })));
    }
}
