//! Encoder, decoders and the Gaussian densities of the generative model.
//!
//! Batched convention: data `x` is `[batch, d]`, latents are `[batch, ζ]`, and
//! every log-density returns one value per item (`[batch]`). A plain `[ζ]`
//! vector yields a scalar.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::PhasePoint;
use crate::linalg::{self, Matrix};
use crate::ndgrad::{BoundParams, ParamSet, Tensor, Var};

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    BernoulliMlp,
    LinearGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub data_dim: usize,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    pub decoder_kind: DecoderKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("model.latent_dim must be at least 1".into()));
        }
        if self.data_dim < 1 {
            return Err(Error::Config("model.data_dim must be at least 1".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("model.hidden_sizes entries must be positive".into()));
        }
        Ok(())
    }
}

/// Linear-Gaussian generative model `x = A·z + τ·ε`, `z, ε ~ N(0, I)`.
/// Its evidence `N(x | 0, A·Aᵀ + τ²·I)` is available in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    /// `A`, shape `[d, ζ]`.
    pub weight: Tensor,
    pub obs_noise_var: f64,
}

impl LinearGaussianModel {
    pub fn new(weight: Tensor, obs_noise_var: f64) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::Config(format!(
                "linear-Gaussian weight must be a matrix, got shape {:?}",
                weight.shape()
            )));
        }
        if !(obs_noise_var > 0.0 && obs_noise_var.is_finite()) {
            return Err(Error::Config(format!(
                "obs_noise_var must be positive, got {obs_noise_var}"
            )));
        }
        Ok(Self {
            weight,
            obs_noise_var,
        })
    }

    /// Seeded model whose columns are mutually orthogonal with random
    /// directions and norms in `[0.5, 2]`. `AᵀA` is then diagonal, so the exact
    /// posterior factorizes and lies inside the diagonal-Gaussian encoder family.
    pub fn random_orthogonal(data_dim: usize, latent_dim: usize, obs_noise_var: f64, seed: u64) -> Result<Self> {
        if latent_dim > data_dim {
            return Err(Error::Config(format!(
                "orthogonal columns need latent_dim ({latent_dim}) <= data_dim ({data_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(latent_dim);
        while columns.len() < latent_dim {
            let mut v: Vec<f64> = (0..data_dim).map(|_| rng.sample(StandardNormal)).collect();
            for c in &columns {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                columns.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let scales: Vec<f64> = (0..latent_dim).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut data = vec![0.0; data_dim * latent_dim];
        for (j, c) in columns.iter().enumerate() {
            for i in 0..data_dim {
                data[i * latent_dim + j] = c[i] * scales[j];
            }
        }
        Self::new(Tensor::matrix(data_dim, latent_dim, data)?, obs_noise_var)
    }

    pub fn data_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn a(&self, i: usize, j: usize) -> f64 {
        self.weight.data()[i * self.latent_dim() + j]
    }

    /// Marginal covariance `A·Aᵀ + τ²·I`.
    pub fn marginal_covariance(&self) -> Matrix {
        let (d, z) = (self.data_dim(), self.latent_dim());
        let mut cov = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                let aa: f64 = (0..z).map(|k| self.a(i, k) * self.a(j, k)).sum();
                cov.data[i * d + j] = aa + if i == j { self.obs_noise_var } else { 0.0 };
            }
        }
        cov
    }

    /// Exact posterior `N(z | m, C)` with `C = (I + AᵀA/τ²)⁻¹`, `m = C·Aᵀx/τ²`.
    pub fn exact_posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        let (d, z) = (self.data_dim(), self.latent_dim());
        if x.len() != d {
            return Err(Error::Shape {
                op: "exact_posterior",
                lhs: vec![x.len()],
                rhs: vec![d],
            });
        }
        let tau2 = self.obs_noise_var;
        let mut precision = Matrix::identity(z);
        for i in 0..z {
            for j in 0..z {
                let ata: f64 = (0..d).map(|k| self.a(k, i) * self.a(k, j)).sum();
                precision.data[i * z + j] += ata / tau2;
            }
        }
        let cov = linalg::spd_inverse(&precision)?;
        let atx: Vec<f64> = (0..z)
            .map(|i| (0..d).map(|k| self.a(k, i) * x[k]).sum::<f64>() / tau2)
            .collect();
        let mean = (0..z)
            .map(|i| (0..z).map(|j| cov.at(i, j) * atx[j]).sum())
            .collect();
        Ok((mean, cov))
    }
}

/// `log N(x | 0, A·Aᵀ + τ²·I)` by dense Cholesky.
pub fn exact_evidence(x: &[f64], model: &LinearGaussianModel) -> Result<f64> {
    if x.len() != model.data_dim() {
        return Err(Error::Shape {
            op: "exact_evidence",
            lhs: vec![x.len()],
            rhs: vec![model.data_dim()],
        });
    }
    let zero = vec![0.0; x.len()];
    linalg::gaussian_log_density(x, &zero, &model.marginal_covariance())
}

/// Observation model attached to the latent space.
#[derive(Clone, Debug, PartialEq)]
pub enum Likelihood {
    /// Product of Bernoullis with logits from an MLP decoder.
    Bernoulli,
    /// Known linear-Gaussian decoder; contributes no trainable parameters.
    LinearGaussian(LinearGaussianModel),
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    pub mean: Var<'g>,
    pub stddev: Var<'g>,
}

/// Amortized encoder plus decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    spec: ModelSpec,
    likelihood: Likelihood,
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.hidden.{i}.weight"), format!("{prefix}.hidden.{i}.bias"))
}

fn affine<'g>(h: Var<'g>, params: &BoundParams<'g>, weight: &str, bias: &str) -> Result<Var<'g>> {
    h.matmul(params.get(weight)?)?.add(params.get(bias)?)
}

fn sum_last<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let rank = v.shape().len();
    if rank == 0 {
        Ok(v)
    } else {
        v.sum_axis(rank - 1)
    }
}

impl Vae {
    pub fn new(spec: ModelSpec, likelihood: Likelihood) -> Result<Self> {
        spec.validate()?;
        match (&spec.decoder_kind, &likelihood) {
            (DecoderKind::BernoulliMlp, Likelihood::Bernoulli) => {}
            (DecoderKind::LinearGaussian, Likelihood::LinearGaussian(m)) => {
                if m.data_dim() != spec.data_dim || m.latent_dim() != spec.latent_dim {
                    return Err(Error::Config(format!(
                        "linear-Gaussian model is {}x{} but the model spec asks for d={} ζ={}",
                        m.data_dim(),
                        m.latent_dim(),
                        spec.data_dim,
                        spec.latent_dim
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "model.decoder_kind does not match the supplied likelihood".into(),
                ))
            }
        }
        Ok(Self { spec, likelihood })
    }

    pub fn bernoulli(spec: ModelSpec) -> Result<Self> {
        Self::new(spec, Likelihood::Bernoulli)
    }

    pub fn linear_gaussian(hidden_sizes: Vec<usize>, model: LinearGaussianModel) -> Result<Self> {
        let spec = ModelSpec {
            latent_dim: model.latent_dim(),
            data_dim: model.data_dim(),
            hidden_sizes,
            decoder_kind: DecoderKind::LinearGaussian,
        };
        Self::new(spec, Likelihood::LinearGaussian(model))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    /// Layer shapes `(weight name, bias name, fan_in, fan_out)` in creation order.
    fn layers(&self) -> Vec<(String, String, usize, usize)> {
        let (d, z) = (self.spec.data_dim, self.spec.latent_dim);
        let mut out = Vec::new();
        let mut fan_in = d;
        for (i, &h) in self.spec.hidden_sizes.iter().enumerate() {
            let (w, b) = layer_names("enc", i);
            out.push((w, b, fan_in, h));
            fan_in = h;
        }
        out.push(("enc.mean.weight".into(), "enc.mean.bias".into(), fan_in, z));
        out.push(("enc.std.weight".into(), "enc.std.bias".into(), fan_in, z));
        if self.likelihood == Likelihood::Bernoulli {
            let mut fan_in = z;
            for (i, &h) in self.spec.hidden_sizes.iter().rev().enumerate() {
                let (w, b) = layer_names("dec", i);
                out.push((w, b, fan_in, h));
                fan_in = h;
            }
            out.push(("dec.out.weight".into(), "dec.out.bias".into(), fan_in, d));
        }
        out
    }

    /// Seeded initialization: weights `U(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (w, b, fan_in, fan_out) in self.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params
                .insert(w, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
                .expect("unique names");
            params
                .insert(b, Tensor::zeros(&[fan_out]))
                .expect("unique names");
        }
        params
    }

    /// Check that `params` has exactly the names and shapes this model expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let layers = self.layers();
        if params.len() != 2 * layers.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (w, b, fan_in, fan_out) in layers {
            for (name, shape) in [(w, vec![fan_in, fan_out]), (b, vec![fan_out])] {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Shape {
                            op: "check_params",
                            lhs: t.shape().to_vec(),
                            rhs: shape,
                        })
                    }
                    None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                }
            }
        }
        Ok(())
    }

    /// Diagonal-Gaussian variational prior `q⁰(φ0 | x)`.
    pub fn encode<'g>(&self, x: Var<'g>, params: &BoundParams<'g>) -> Result<EncoderOutput<'g>> {
        let mut h = x;
        for i in 0..self.spec.hidden_sizes.len() {
            let (w, b) = layer_names("enc", i);
            h = affine(h, params, &w, &b)?.softplus();
        }
        let mean = affine(h, params, "enc.mean.weight", "enc.mean.bias")?;
        let stddev = affine(h, params, "enc.std.weight", "enc.std.bias")?
            .softplus()
            .offset(STD_FLOOR);
        Ok(EncoderOutput { mean, stddev })
    }

    /// Bernoulli logits `[batch, d]`.
    pub fn decoder_logits<'g>(&self, phi: Var<'g>, params: &BoundParams<'g>) -> Result<Var<'g>> {
        if self.likelihood != Likelihood::Bernoulli {
            return Err(Error::Config("decoder logits need a Bernoulli decoder".into()));
        }
        let mut h = phi;
        for i in 0..self.spec.hidden_sizes.len() {
            let (w, b) = layer_names("dec", i);
            h = affine(h, params, &w, &b)?.softplus();
        }
        affine(h, params, "dec.out.weight", "dec.out.bias")
    }

    /// `log p(x | φ)` per item.
    pub fn log_likelihood<'g>(&self, x: Var<'g>, phi: Var<'g>, params: &BoundParams<'g>) -> Result<Var<'g>> {
        match &self.likelihood {
            Likelihood::Bernoulli => {
                let logits = self.decoder_logits(phi, params)?;
                log_likelihood_bernoulli(x, logits)
            }
            Likelihood::LinearGaussian(m) => {
                let a_t = phi.graph().constant(m.weight.clone()).t()?;
                let mean = phi.matmul(a_t)?;
                log_likelihood_gaussian(x, mean, m.obs_noise_var)
            }
        }
    }

    /// `log p(x | φ) + log N(φ | 0, I)` per item.
    pub fn log_joint<'g>(&self, x: Var<'g>, phi: Var<'g>, params: &BoundParams<'g>) -> Result<Var<'g>> {
        self.log_likelihood(x, phi, params)?.add(log_prior_normal(phi)?)
    }
}

/// Reparameterized initial state: `φ0 = μ + s⊙εφ`, `κ0 = εκ`.
pub fn sample_initial<'g>(enc: &EncoderOutput<'g>, eps_phi: Var<'g>, eps_kappa: Var<'g>) -> Result<PhasePoint<'g>> {
    let position = enc.mean.add(enc.stddev.mul(eps_phi)?)?;
    PhasePoint::new(position, eps_kappa)
}

/// `Σⱼ xⱼ log pⱼ + (1 − xⱼ) log(1 − pⱼ)` with `p = sigmoid(logits)`, written
/// as `Σⱼ xⱼ·lⱼ − softplus(lⱼ)`.
pub fn log_likelihood_bernoulli<'g>(x: Var<'g>, logits: Var<'g>) -> Result<Var<'g>> {
    sum_last(x.mul(logits)?.sub(logits.softplus())?)
}

/// `log N(x | mean, τ²·I)` per item.
pub fn log_likelihood_gaussian<'g>(x: Var<'g>, mean: Var<'g>, noise_var: f64) -> Result<Var<'g>> {
    let d = *x.shape().last().unwrap_or(&1) as f64;
    let quad = sum_last(x.sub(mean)?.square())?;
    Ok(quad
        .scale(-0.5 / noise_var)
        .offset(-0.5 * d * (2.0 * PI * noise_var).ln()))
}

/// `log N(v | 0, I) = −½‖v‖² − (ζ/2)·ln 2π` per item.
pub fn log_prior_normal<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let dim = *v.shape().last().unwrap_or(&1) as f64;
    Ok(sum_last(v.square())?.scale(-0.5).offset(-0.5 * dim * (2.0 * PI).ln()))
}

/// Diagonal-Gaussian log density `log q⁰(φ0)` per item.
pub fn log_q0<'g>(phi0: Var<'g>, enc: &EncoderOutput<'g>) -> Result<Var<'g>> {
    let dim = *phi0.shape().last().unwrap_or(&1) as f64;
    let z = phi0.sub(enc.mean)?.div(enc.stddev)?;
    let quad = sum_last(z.square())?.scale(-0.5);
    let log_s = sum_last(enc.stddev.log()?)?;
    Ok(quad.sub(log_s)?.offset(-0.5 * dim * (2.0 * PI).ln()))
}
