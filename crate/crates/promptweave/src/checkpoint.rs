//! Flat binary parameter container.
//!
//! Layout: magic, format version, a JSON-encoded model config block, then
//! one record per parameter in store order: name, shape, float32
//! little-endian payload. Buffers round-trip bit-exactly; saving a loaded
//! file reproduces it byte for byte.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::ModelConfig;
use crate::numerics::tape::ParamStore;
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(m) => write!(f, "checkpoint format error: {m}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            CheckpointError::Format(_) => None,
        }
    }
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn format_err(message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(message.into())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg_json =
        serde_json::to_vec(cfg).map_err(|e| format_err(format!("config encode: {e}")))?;
    out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    out.write_all(&cfg_json)?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, param) in store.iter() {
        let name = param.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(param.tensor.shape.len() as u32).to_le_bytes())?;
        for &dim in &param.tensor.shape {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in &param.tensor.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        self.inner
            .read_exact(buf)
            .map_err(|e| format_err(format!("truncated while reading {what}: {e}")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Loads config and parameters. Every parameter comes back trainable; the
/// caller re-partitions for its stage.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelConfig, ParamStore<f32>), CheckpointError> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 6];
    r.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = r.u32("config length")? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.exact(&mut cfg_json, "config block")?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_json).map_err(|e| format_err(format!("config decode: {e}")))?;

    let count = r.u32("parameter count")? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.exact(&mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|e| format_err(format!("parameter {i} name is not utf-8: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f32("value")?);
        }
        let tensor = Tensor::new(shape, values)
            .map_err(|e| format_err(format!("parameter {name:?}: {e}")))?;
        store
            .insert(&name, tensor, true)
            .map_err(|e| format_err(format!("parameter {name:?}: {e}")))?;
    }
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing)? {
        0 => Ok((cfg, store)),
        _ => Err(format_err("trailing bytes after the last parameter")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::numerics::rng::Rng;
    use crate::prompts::{Mmgm, PromptBank};

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let cfg = ModelConfig {
            d_model: 8,
            prompt_len: 4,
            n_heads: 2,
            n_layers: 1,
            n_self_layers: 1,
            ffn_mult: 2,
            d_raw: [5, 5, 5],
            seq_len: [8, 8, 8],
            ..ModelConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let rng = Rng::new(1);
        Backbone::build(&cfg, &mut store, &rng).unwrap();
        PromptBank::build(&cfg, &mut store, &rng).unwrap();
        Mmgm::build(&cfg, &mut store, &rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &store).unwrap();
        let (cfg2, loaded) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.len(), loaded.len());
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            let left: Vec<u32> = a.tensor.values.iter().map(|v| v.to_bits()).collect();
            let right: Vec<u32> = b.tensor.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(left, right, "{} drifted", a.name);
        }
        save_checkpoint(&p2, &cfg2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTAPW\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::Format(_)
        ));

        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new();
        store
            .insert("backbone.head.b", Tensor::zeros(&[3]), true)
            .unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &cfg, &store).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut padded = bytes.clone();
        padded.push(0);
        std::fs::write(&path, &padded).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
