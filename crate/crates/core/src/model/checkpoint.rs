//! Self-describing binary checkpoints. A file carries the architecture,
//! every parameter tensor, and training metadata, so loading needs no side
//! information. Serialization is canonical (sorted parameter names, fixed
//! endianness), which makes digests stable across platforms.

use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use vaemap_autodiff::Arr;

use crate::model::{EpochStats, ModelError, Params, Vae, VaeConfig};
use crate::util::{atomic_write, sha256_hex};

const MAGIC: &[u8; 8] = b"VAEMAPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    pub loss_curve: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Vae,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config_json = serde_json::to_vec(&self.model.config).expect("config serializes");
        let meta_json = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&config_json);
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&(self.model.params.len() as u64).to_le_bytes());
        for (name, value) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let standard = value.as_standard_layout();
            for &x in standard.as_slice().expect("standard layout is contiguous") {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, ModelError> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u64()? as usize;
        let config: VaeConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| r.err(&format!("config block: {e}")))?;
        config.validate().map_err(|e| r.err(&format!("embedded config invalid: {e}")))?;
        let meta_len = r.u64()? as usize;
        let meta: TrainMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.err(&format!("meta block: {e}")))?;
        let count = r.u64()? as usize;
        let mut params = Params::default();
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("parameter name is not utf-8"))?
                .to_string();
            let ndim = r.u64()? as usize;
            if ndim > 8 {
                return Err(r.err(&format!("parameter {name} has implausible rank {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f64()?);
            }
            let arr = Arr::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| r.err(&format!("parameter {name}: {e}")))?;
            params.insert(name, arr);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after parameter table"));
        }
        Ok(Checkpoint {
            model: Vae { config, params },
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> ModelError {
        ModelError::Format {
            path: self.origin.to_string(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
