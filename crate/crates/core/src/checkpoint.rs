//! Single-file checkpoint container: a JSON document carrying a format tag, a
//! mandatory version, the model configuration, and every named parameter.
//!
//! Values are written with shortest round-trip float formatting, so loading a
//! checkpoint restores parameters bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "ivif-rlhf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: &impl Serialize, store: &ParamStore) -> Result<Self> {
        let params = store
            .values()?
            .into_iter()
            .map(|(name, (shape, data))| (name, StoredTensor { shape, data }))
            .collect();
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            params,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config section: {e}")))
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(name, st)| {
                let t = Tensor::from_slice(&st.data, st.shape.as_slice(), &Device::Cpu)?;
                Ok((name.clone(), t))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag `{}`", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_mandatory() {
        let text = r#"{"format":"ivif-rlhf-checkpoint","kind":"x","config":{},"params":{}}"#;
        assert!(Checkpoint::from_json(text).is_err());
        let ok = r#"{"format":"ivif-rlhf-checkpoint","version":1,"kind":"x","config":{},"params":{}}"#;
        assert!(Checkpoint::from_json(ok).is_ok());
        let future = ok.replace("\"version\":1", "\"version\":9");
        assert!(Checkpoint::from_json(&future).is_err());
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            StoredTensor {
                shape: vec![3],
                data: vec![0.1 + 0.2, std::f64::consts::PI, -1e-300],
            },
        );
        let ckpt = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: "test".into(),
            config: serde_json::json!({"a": 1}),
            params,
        };
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }
}
