//! Versioned binary checkpoints (layout documented in `docs/checkpoint.md`).
//!
//! ```text
//! magic      8 bytes  "SPTTCKPT"
//! version    u32 LE
//! meta_len   u32 LE, followed by that many bytes of UTF-8 JSON
//! n_tensors  u32 LE
//! tensor*    name_len u16 LE | name | dtype u8 | ndim u8 | dims u64 LE * ndim | data LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::SpectrogramConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::params::NamedTensors;
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 8] = b"SPTTCKPT";
pub const VERSION: u32 = 1;

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub spectrogram: SpectrogramConfig,
    /// Free-form training provenance (epoch, metrics, seed, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<R> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<R>,
}

pub fn to_bytes<R: Real>(meta: &CheckpointMeta, params: &ModelParams<R>) -> Result<Vec<u8>> {
    params.check_config(&meta.model)?;
    let json = serde_json::to_vec(meta)?;
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(64 + json.len() + params.num_scalars() * R::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(R::DTYPE.code());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<R: Real>(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ModelParams<R>) -> Result<()> {
    let bytes = to_bytes(meta, params)?;
    // write-then-rename so an interrupted save never clobbers a good file
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. Tensors stored in another precision are converted.
pub fn from_bytes<R: Real>(bytes: &[u8]) -> Result<Checkpoint<R>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)?;
    meta.model.validate()?;

    let mut stored = Vec::new();
    for _ in 0..c.u32("tensor count")? {
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(c.u8("dtype")?)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let ndim = c.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len * dtype.size(), "tensor data")?;
        let data: Vec<R> = match dtype {
            d if d == R::DTYPE => raw.chunks_exact(d.size()).map(R::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|b| R::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| R::lit(f64::read_le(b))).collect(),
        };
        stored.push((name, ArrayD::from_shape_vec(shape, data).expect("length matches shape")));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }

    // Build the structure from the config, then overwrite every tensor.
    let mut params = ModelParams::<R>::init(&meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = params.tensors().len();
    if stored.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, config implies {expected}",
            stored.len()
        )));
    }
    let mut err = None;
    let mut it = stored.into_iter();
    params.visit_mut("", &mut |name, mut dst| {
        if err.is_some() {
            return;
        }
        let (sname, src) = it.next().expect("count checked");
        if sname != name {
            err = Some(Error::Checkpoint(format!("expected tensor {name}, found {sname}")));
        } else if src.shape() != dst.shape() {
            err = Some(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        } else {
            dst.assign(&src);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Checkpoint { meta, params })
}

pub fn load<R: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<R>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::tokenizer::ClipConfig;

    fn sample() -> (CheckpointMeta, ModelParams<f32>) {
        let model = ModelConfig::spectttra(16, 35, ClipConfig::gamma(), EncoderConfig::tiny());
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let meta = CheckpointMeta {
            model,
            spectrogram: SpectrogramConfig {
                n_mels: 16,
                target_frames: 35,
                ..Default::default()
            },
            extra: serde_json::json!({"epoch": 4}),
        };
        (meta, params)
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let (meta, params) = sample();
        let bytes = to_bytes(&meta, &params).unwrap();
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        for ((n1, a), (n2, b)) in params.tensors().into_iter().zip(back.params.tensors()) {
            assert_eq!(n1, n2);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let (meta, params) = sample();
        let bytes = to_bytes(&meta, &params).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
    }

    #[test]
    fn loads_into_other_precision() {
        let (meta, params) = sample();
        let back = from_bytes::<f64>(&to_bytes(&meta, &params).unwrap()).unwrap();
        assert_eq!(back.params.head.weight[[0, 3]], params.head.weight[[0, 3]] as f64);
    }
}
