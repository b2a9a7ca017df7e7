use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::volume::{read_u32, truncated, VolumeData, VolumeFile};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegResMamba};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 4096;

/// SHA-256 of the config's JSON serialization.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

/// Layout: magic, version u32, 32-byte config digest, parameter count u32,
/// then per parameter `(name length u32, UTF-8 name, volume)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: Vec<(String, VolumeFile)>,
}

impl Checkpoint {
    pub fn from_model(model: &SegResMamba) -> Self {
        Checkpoint {
            digest: config_digest(&model.config),
            params: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, VolumeFile::from_tensor(&t)))
                .collect(),
        }
    }

    /// Copies the stored values into `model`. The config digest, parameter
    /// names, order and shapes must all match.
    pub fn apply_to(&self, model: &SegResMamba) -> Result<()> {
        if self.digest != config_digest(&model.config) {
            return Err(Error::Format(
                "checkpoint was written for a different model config".into(),
            ));
        }
        let live = model.named_parameters();
        if live.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                live.len()
            )));
        }
        for ((name, t), (stored_name, vol)) in live.iter().zip(&self.params) {
            if name != stored_name || t.shape() != vol.extents.as_slice() {
                return Err(Error::Format(format!(
                    "tensor mismatch: model {name} {:?} vs checkpoint {stored_name} {:?}",
                    t.shape(),
                    vol.extents
                )));
            }
            if !matches!(vol.data, VolumeData::F64(_)) {
                return Err(Error::Format(format!(
                    "{name}: parameters must be stored as f64"
                )));
            }
        }
        for ((_, t), (_, vol)) in live.iter().zip(&self.params) {
            t.set_data(vol.to_f64())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.digest)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, vol) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            vol.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut digest = [0; 32];
        r.read_exact(&mut digest).map_err(truncated)?;
        let count = read_u32(r)?;
        let mut params = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)?;
            if len > MAX_NAME_LEN {
                return Err(Error::Format(format!("parameter name of {len} bytes")));
            }
            let mut name = vec![0; len as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            params.push((name, VolumeFile::read_from(r)?));
        }
        Ok(Checkpoint { digest, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let c = Checkpoint::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                cursor.len()
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
