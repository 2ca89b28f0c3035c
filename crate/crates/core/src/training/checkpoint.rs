//! Single-file checkpoint: `CMPCKPT1`, a little-endian u64 manifest length,
//! a JSON manifest, then raw little-endian f32 payloads in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CMPCKPT1";
pub const BANK_TENSOR: &str = "fai.memory";

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    config: String,
    tensors: Vec<Entry>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Rendered run configuration.
    pub config: String,
    pub params: ParamStore,
    /// `T×C` bank slots.
    pub bank: Tensor,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let tensors = self.params.iter().chain(std::iter::once((BANK_TENSOR, &self.bank)));
        for (name, t) in tensors {
            entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), offset: payload.len() });
            for v in t.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest { config: self.config.clone(), tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let payload = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut bank = None;
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
            let t = Tensor::new(&e.shape, data);
            if e.name == BANK_TENSOR {
                bank = Some(t);
            } else {
                params.insert(&e.name, t);
            }
        }
        let bank = bank.ok_or_else(|| bad("missing fai.memory"))?;
        Ok(Self { config: manifest.config, params, bank, meta: manifest.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of parameters and bank.
    pub fn digest(&self) -> String {
        let mut all = self.params.clone();
        all.insert(BANK_TENSOR, self.bank.clone());
        all.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.init(1, "a.w", &[2, 3], Init::Scaled { fan_in: 3, gain: 1.0 });
        params.init(1, "b", &[4], Init::Constant(0.25));
        Checkpoint {
            config: "seed = 1\n".into(),
            params,
            bank: Tensor::new(&[2, 2], vec![0.5, 1.5, -2.0, 3.0]),
            meta: BTreeMap::from([("bank_filled".to_string(), "2".to_string())]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest(), ck.digest());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}
