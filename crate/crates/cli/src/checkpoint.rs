//! JSON checkpoints with base64 little-endian payloads.
//!
//! Trainable parameters are stored as 32-bit floats. The fixed linear-Gaussian
//! decoder, when present, is stored at full precision so exact evidence is
//! recomputable from the checkpoint alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use qslvi::models::LinearGaussianModel;
use qslvi::{ParamSet, Tensor};

use crate::config::RunConfig;

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl Entry {
    fn f32le(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            data: STANDARD.encode(bytes),
        }
    }

    fn f64le(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|&v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> anyhow::Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| anyhow!("parameter `{name}`: corrupt base64 payload: {e}"))?;
        let count: usize = self.shape.iter().product();
        let width = match self.dtype.as_str() {
            "f32le" => 4,
            "f64le" => 8,
            other => bail!("parameter `{name}`: unknown dtype `{other}`"),
        };
        if bytes.len() != count * width {
            bail!(
                "parameter `{name}`: shape {:?} needs {} bytes, payload has {}",
                self.shape,
                count * width,
                bytes.len()
            );
        }
        let values = if width == 4 {
            bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect()
        } else {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        Ok(Tensor::new(&self.shape, values)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: BTreeMap<String, Entry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, Entry>,
}

const LG_WEIGHT: &str = "linear_gaussian.weight";
const LG_NOISE: &str = "linear_gaussian.obs_noise_var";

impl Checkpoint {
    pub fn new(config: &RunConfig, params: &ParamSet, lg: Option<&LinearGaussianModel>) -> Self {
        let params = params.iter().map(|(n, t)| (n.to_string(), Entry::f32le(t))).collect();
        let mut constants = BTreeMap::new();
        if let Some(m) = lg {
            constants.insert(LG_WEIGHT.to_string(), Entry::f64le(&m.weight));
            constants.insert(LG_NOISE.to_string(), Entry::f64le(&Tensor::scalar(m.obs_noise_var)));
        }
        Self {
            version: VERSION,
            config: config.clone(),
            params,
            constants,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).context("checkpoint is not valid JSON")?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            Some(v) => bail!("checkpoint version {v} is not supported (this build reads version {VERSION})"),
            None => bail!("checkpoint has no version field"),
        }
        let ckpt: Checkpoint = serde_json::from_value(value).context("malformed checkpoint")?;
        ckpt.param_set()?;
        ckpt.linear_gaussian()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    pub fn param_set(&self) -> anyhow::Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, entry) in &self.params {
            out.insert(name.clone(), entry.decode(name)?)?;
        }
        Ok(out)
    }

    pub fn linear_gaussian(&self) -> anyhow::Result<Option<LinearGaussianModel>> {
        match (self.constants.get(LG_WEIGHT), self.constants.get(LG_NOISE)) {
            (None, None) => Ok(None),
            (Some(w), Some(n)) => {
                let weight = w.decode(LG_WEIGHT)?;
                let noise = n.decode(LG_NOISE)?;
                Ok(Some(LinearGaussianModel::new(weight, noise.item())?))
            }
            _ => bail!("checkpoint has an incomplete linear-Gaussian decoder"),
        }
    }
}
