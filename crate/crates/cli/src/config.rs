//! Run configuration (JSON) and the data it points at.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use qslvi::data::{binarize, gen_linear_gaussian, load_idx_images, read_csv, Dataset, Provenance};
use qslvi::flows::FlowConfig;
use qslvi::models::{DecoderKind, LinearGaussianModel, ModelSpec, Vae};
use qslvi::objectives::Objective;
use qslvi::train::TrainConfig;
use qslvi::Tensor;

/// Configuration problems map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    Qsl,
    Leapfrog,
    None,
}

fn default_method() -> FlowMethod {
    FlowMethod::None
}
fn default_steps() -> usize {
    5
}
fn default_step_size() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default = "default_method")]
    pub method: FlowMethod,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub noise: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            steps: default_steps(),
            step_size: default_step_size(),
            damping: 0.0,
            noise: 0.0,
        }
    }
}

impl FlowSection {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            steps: self.steps,
            step_size: self.step_size,
            damping: self.damping,
            noise: self.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: String,
    pub n: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_obs_noise_var")]
    pub obs_noise_var: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_obs_noise_var() -> f64 {
    0.5
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// IDX image file (optionally `.gz`) or a CSV written by `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generating-model description for linear-Gaussian data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Applied to image data; `null` keeps grey levels.
    #[serde(default = "default_threshold")]
    pub binarize_threshold: Option<f64>,
    /// Keep only the first `subset_cap` items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_cap: Option<usize>,
}

fn default_threshold() -> Option<f64> {
    Some(0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
    }

    /// Cross-field validation; errors name the offending key.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        let objective = self.train.objective;
        match self.flow.method {
            FlowMethod::None => {
                if objective != Objective::Vae {
                    bail!(usage(format!(
                        "flow.method is none but train.objective is {}; use vae or choose a flow",
                        objective.as_str()
                    )));
                }
            }
            FlowMethod::Leapfrog => {
                if self.flow.damping != 0.0 {
                    bail!(usage("flow.damping must be 0 when flow.method is leapfrog"));
                }
                if objective != Objective::Hvae {
                    bail!(usage("flow.method leapfrog requires train.objective hvae"));
                }
            }
            FlowMethod::Qsl => {
                if !matches!(objective, Objective::Qsl | Objective::QslRb) {
                    bail!(usage("flow.method qsl requires train.objective qsl or qsl_rb"));
                }
            }
        }
        if self.flow.method != FlowMethod::None {
            self.flow.flow_config().validate_deterministic().map_err(|e| usage(e.to_string()))?;
        }
        match (&self.data.path, &self.data.synthetic) {
            (None, None) => bail!(usage("data.path is required (or data.synthetic)")),
            (Some(_), Some(_)) => bail!(usage("data.path and data.synthetic are mutually exclusive")),
            _ => {}
        }
        if let Some(t) = self.data.binarize_threshold {
            if !(t > 0.0 && t < 1.0) {
                bail!(usage(format!("data.binarize_threshold must lie in (0, 1), got {t}")));
            }
        }
        if let Some(s) = &self.data.synthetic {
            if s.kind != "linear_gaussian" {
                bail!(usage(format!("data.synthetic.kind `{}` is unknown (expected linear_gaussian)", s.kind)));
            }
            if s.n == 0 {
                bail!(usage("data.synthetic.n must be at least 1"));
            }
            if self.model.decoder_kind != DecoderKind::LinearGaussian {
                bail!(usage("data.synthetic requires model.decoder_kind linear_gaussian"));
            }
        }
        if self.model.decoder_kind == DecoderKind::LinearGaussian
            && self.data.synthetic.is_none()
            && self.data.model_path.is_none()
        {
            bail!(usage("data.model_path is required for model.decoder_kind linear_gaussian"));
        }
        Ok(())
    }

    /// Canonical JSON (field order fixed by the struct definitions).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Generating model written next to a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianFile {
    pub kind: String,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub obs_noise_var: f64,
    /// Row-major `A`, `data_dim × latent_dim`.
    pub weight: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LinearGaussianFile {
    pub fn from_model(m: &LinearGaussianModel, seed: u64) -> Self {
        let (d, z) = (m.data_dim(), m.latent_dim());
        Self {
            kind: "linear_gaussian".into(),
            data_dim: d,
            latent_dim: z,
            obs_noise_var: m.obs_noise_var,
            weight: (0..d).map(|i| m.weight.data()[i * z..(i + 1) * z].to_vec()).collect(),
            seed,
        }
    }

    pub fn to_model(&self) -> anyhow::Result<LinearGaussianModel> {
        if self.weight.len() != self.data_dim || self.weight.iter().any(|r| r.len() != self.latent_dim) {
            bail!("model file: weight is not {}x{}", self.data_dim, self.latent_dim);
        }
        let data = self.weight.concat();
        Ok(LinearGaussianModel::new(Tensor::matrix(self.data_dim, self.latent_dim, data)?, self.obs_noise_var)?)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> anyhow::Result<(Dataset, LinearGaussianModel)> {
    let model = LinearGaussianModel::random_orthogonal(spec.data_dim, spec.latent_dim, spec.obs_noise_var, spec.seed)
        .map_err(|e| usage(e.to_string()))?;
    let ds = gen_linear_gaussian(spec.n, &model, spec.seed.wrapping_add(1)).map_err(|e| usage(e.to_string()))?;
    Ok((ds, model))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "csv")
}

/// Load a data file: CSV (real-valued) or IDX images, binarized and capped
/// per the data section.
pub fn load_data_file(path: &Path, data: &DataSection) -> anyhow::Result<Dataset> {
    if !path.exists() {
        bail!(usage(format!("data.path {} does not exist", path.display())));
    }
    let mut ds = if is_csv(path) {
        read_csv(path, Provenance::SyntheticGaussian)?
    } else {
        let images = load_idx_images(path).with_context(|| format!("loading {}", path.display()))?;
        match data.binarize_threshold {
            Some(t) => binarize(&images, t)?,
            None => images,
        }
    };
    if let Some(cap) = data.subset_cap {
        ds = ds.truncate(cap);
    }
    Ok(ds)
}

/// Resolve the configured data and, for linear-Gaussian decoders, the model.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, Option<LinearGaussianModel>)> {
    let (ds, lg) = match (&cfg.data.path, &cfg.data.synthetic) {
        (_, Some(spec)) => {
            let (ds, m) = generate_synthetic(spec)?;
            (ds, Some(m))
        }
        (Some(path), None) => {
            let ds = load_data_file(path, &cfg.data)?;
            let lg = match &cfg.data.model_path {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading data.model_path {}", p.display()))?;
                    let file: LinearGaussianFile =
                        serde_json::from_str(&text).map_err(|e| usage(format!("data.model_path: {e}")))?;
                    Some(file.to_model()?)
                }
                None => None,
            };
            (ds, lg)
        }
        (None, None) => bail!(usage("data.path is required (or data.synthetic)")),
    };
    if ds.dim() != cfg.model.data_dim {
        bail!(usage(format!(
            "model.data_dim is {} but the data has dimension {}",
            cfg.model.data_dim,
            ds.dim()
        )));
    }
    Ok((ds, lg))
}

pub fn build_model(spec: &ModelSpec, lg: Option<LinearGaussianModel>) -> anyhow::Result<Vae> {
    match spec.decoder_kind {
        DecoderKind::BernoulliMlp => Ok(Vae::bernoulli(spec.clone())?),
        DecoderKind::LinearGaussian => {
            let lg = lg.ok_or_else(|| usage("data.model_path is required for model.decoder_kind linear_gaussian"))?;
            if lg.latent_dim() != spec.latent_dim {
                bail!(usage(format!(
                    "model.latent_dim is {} but the generating model has {}",
                    spec.latent_dim,
                    lg.latent_dim()
                )));
            }
            Ok(Vae::linear_gaussian(spec.hidden_sizes.clone(), lg)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RunConfig {
        RunConfig::from_json(
            r#"{
                "model": {"latent_dim": 2, "data_dim": 4, "hidden_sizes": [], "decoder_kind": "linear_gaussian"},
                "flow": {"method": "qsl", "steps": 2, "step_size": 0.1},
                "train": {"objective": "qsl_rb", "max_steps": 20, "patience": 5, "batch_size": 50},
                "data": {"synthetic": {"kind": "linear_gaussian", "n": 200, "data_dim": 4, "latent_dim": 2}}
            }"#,
        )
        .unwrap()
    }

    fn message(cfg: &RunConfig) -> String {
        cfg.validate().unwrap_err().to_string()
    }

    #[test]
    fn valid_toy() {
        toy().validate().unwrap();
        let (ds, lg) = load_data(&toy()).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(lg.is_some());
    }

    #[test]
    fn errors_name_keys() {
        let mut c = toy();
        c.data.synthetic = None;
        assert!(message(&c).contains("data.path"));

        let mut c = toy();
        c.flow.method = FlowMethod::None;
        assert!(message(&c).contains("flow.method"));

        let mut c = toy();
        c.flow.method = FlowMethod::Leapfrog;
        c.train.objective = Objective::Hvae;
        c.flow.damping = 0.3;
        assert!(message(&c).contains("flow.damping"));

        let mut c = toy();
        c.train.patience = 100;
        assert!(message(&c).contains("train.patience"));

        let mut c = toy();
        c.model.latent_dim = 0;
        assert!(message(&c).contains("model.latent_dim"));

        let mut c = toy();
        c.flow.noise = 0.1;
        assert!(message(&c).contains("flow.noise"));

        let err = RunConfig::from_json(r#"{"model": {"latent_dim": 2, "data_dim": 4, "decoder_kind": "bernoulli_mlp"}, "trian": {}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("trian"));
    }

    #[test]
    fn json_round_trip_is_stable() {
        let c = toy();
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
    }

    #[test]
    fn model_file_round_trip() {
        let m = LinearGaussianModel::random_orthogonal(4, 2, 0.3, 9).unwrap();
        let back = LinearGaussianFile::from_model(&m, 9).to_model().unwrap();
        assert_eq!(back, m);
    }
}
