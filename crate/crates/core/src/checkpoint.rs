//! Shared checkpoint container: named tensors plus a free-form layout
//! descriptor and metadata, stored as JSON. Floats are written in shortest
//! round-trip form, so `load(save(x)) == x` bit for bit.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffopt::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "poselift-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `"flow"`, `"lifter"` or `"regressor"`.
    pub kind: String,
    pub layout: Value,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub meta: Value,
}

impl Checkpoint {
    pub fn new(kind: &str, layout: impl Serialize, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            layout: serde_json::to_value(layout)?,
            tensors: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(n, t)| NamedTensor { name: n.clone(), rows: t.rows(), cols: t.cols(), data: t.data().to_vec() })
                .collect(),
            meta: Value::Object(Default::default()),
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        if let Value::Object(map) = &mut self.meta {
            map.insert(key.to_string(), serde_json::to_value(value)?);
        }
        Ok(self)
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.meta.get(key) {
            Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
            None => Ok(None),
        }
    }

    pub fn layout<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.layout.clone())?)
    }

    pub fn params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for t in &self.tensors {
            p.insert(t.name.clone(), Tensor::from_vec(t.rows, t.cols, t.data.clone())?);
        }
        Ok(p)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Json(_) => Error::invalid(format!("{} is not a checkpoint file: {e}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != FORMAT {
            return Err(Error::invalid("not a checkpoint file"));
        }
        if ck.version != VERSION {
            return Err(Error::Version { what: "checkpoint", found: ck.version, expected: VERSION });
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}
