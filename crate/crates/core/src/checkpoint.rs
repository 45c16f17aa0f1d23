//! Binary checkpoints: `IPDN1`, a little-endian `u64` manifest length, a JSON
//! manifest, then every parameter tensor as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::Scaler;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams, ModelSpec};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 5] = b"IPDN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Standardization fitted on the training split.
    pub scaler: Scaler,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub tensors: Vec<TensorShape>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        channel_names: Vec<String>,
        scaler: Scaler,
        params: ModelParams<f32>,
        best_epoch: usize,
        best_val_loss: f64,
        epochs_run: usize,
    ) -> Self {
        let tensors = params
            .manifest()
            .into_iter()
            .map(|(name, shape)| TensorShape { name, shape })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                seed: config.training.seed,
                channels: channel_names.len(),
                config,
                channel_names,
                scaler,
                best_epoch,
                best_val_loss,
                epochs_run,
                tensors,
            },
            params,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.manifest.config
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_config(&self.manifest.config, self.manifest.channels)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = self.params.num_params();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an IPDN1 checkpoint"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[5..13]);
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("manifest length overflows"))?;
        let body = 13usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&bytes[13..body]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported",
                manifest.format_version
            )));
        }
        if manifest.channel_names.len() != manifest.channels || manifest.scaler.mean.len() != manifest.channels {
            return Err(bad("channel names disagree with channel count"));
        }
        manifest.config.validate()?;
        let spec = ModelSpec::from_config(&manifest.config, manifest.channels)?;
        let mut params = init_params::<f32>(&spec, 0);
        let expect: Vec<TensorShape> = params
            .manifest()
            .into_iter()
            .map(|(name, shape)| TensorShape { name, shape })
            .collect();
        if expect != manifest.tensors {
            let first = expect
                .iter()
                .zip(&manifest.tensors)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} expected, found {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} tensors expected, found {}", expect.len(), manifest.tensors.len()));
            return Err(Error::Shape(format!("checkpoint does not match its config: {first}")));
        }
        let data = &bytes[body..];
        let n = params.num_params();
        if data.len() != 4 * n {
            return Err(Error::Checkpoint(format!("{} parameter bytes, expected {}", data.len(), 4 * n)));
        }
        let flat: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.assign_flat(&flat);
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored config equals `cfg`, naming the first differing key.
    pub fn ensure_config(&self, cfg: &TrainConfig) -> Result<()> {
        if &self.manifest.config == cfg {
            return Ok(());
        }
        let a = toml::Value::try_from(&self.manifest.config).map_err(|e| Error::Config(e.to_string()))?;
        let b = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let key = first_difference(&a, &b, "").unwrap_or_default();
        Err(Error::Config(format!("{key}: checkpoint was trained with a different value")))
    }
}

fn first_difference(a: &toml::Value, b: &toml::Value, path: &str) -> Option<String> {
    match (a, b) {
        (toml::Value::Table(x), toml::Value::Table(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => first_difference(u, v, &p),
                    _ => Some(p),
                }
            })
        }
        _ if a == b => None,
        _ => Some(path.to_string()),
    }
}
