//! Numerical property suites: each measurement is computed with an oracle
//! that does not share code with the quantity under test (finite
//! differences, independent integrators, closed forms).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flows::{self, inverse_qsl_step, leapfrog_step, qsl_flow, qsl_step, FlowConfig, PhasePoint};
use crate::models::{exact_evidence, DecoderKind, Likelihood, LinearGaussianModel, ModelSpec, Vae};
use crate::ndgrad::{Graph, ParamSet, Tensor, Var};
use crate::numdiff;
use crate::objectives::{draw_noise, elbo, evaluate, Objective};

/// `log p(φ) = Σ w2ᵀ·tanh(W1ᵀφ + b1) − ½‖φ‖²` with seeded random weights;
/// positions are `[1, ζ]` rows.
#[derive(Clone, Debug)]
pub struct RandomPotential {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}

impl RandomPotential {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        Self {
            w1: Tensor::matrix(dim, hidden, normal(dim * hidden, 1.0 / (dim as f64).sqrt())).expect("shape"),
            b1: Tensor::vector(&normal(hidden, 0.5)),
            w2: Tensor::matrix(hidden, 1, normal(hidden, 1.0 / (hidden as f64).sqrt())).expect("shape"),
        }
    }

    pub fn log_joint<'g>(&self, phi: Var<'g>) -> Result<Var<'g>> {
        let g = phi.graph();
        let h = phi.matmul(g.constant(self.w1.clone()))?.add(g.constant(self.b1.clone()))?.tanh();
        let mlp = h.matmul(g.constant(self.w2.clone()))?.sum();
        mlp.sub(phi.square().sum().scale(0.5))
    }
}

fn row_state<'g>(g: &'g Graph, z: &[f64]) -> PhasePoint<'g> {
    let dim = z.len() / 2;
    PhasePoint::new(
        g.constant(Tensor::matrix(1, dim, z[..dim].to_vec()).expect("shape")),
        g.constant(Tensor::matrix(1, dim, z[dim..].to_vec()).expect("shape")),
    )
    .expect("shapes")
}

fn flatten(p: &PhasePoint<'_>) -> Vec<f64> {
    let mut out = p.position.value().data().to_vec();
    out.extend_from_slice(p.velocity.value().data());
    out
}

/// One deterministic QSL step as a plain map on `(φ, κ) ∈ R^{2ζ}`.
pub fn qsl_step_map<'a>(target: &'a RandomPotential, cfg: &'a FlowConfig) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |z: &[f64]| {
        let g = Graph::new();
        let lj = flows::potential(|phi| target.log_joint(phi));
        let (next, _) = qsl_step(row_state(&g, z), &lj, cfg, None).expect("finite potential");
        flatten(&next)
    }
}

fn random_point(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..2 * dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Finite-difference Jacobian of one QSL step at a random state.
pub fn step_jacobian(dim: usize, cfg: &FlowConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = RandomPotential::new(dim, 8, &mut rng);
    let z = random_point(dim, &mut rng);
    numdiff::jacobian(qsl_step_map(&target, cfg), &z, 1e-5)
}

/// `max |JᵀΩJ − c·Ω|` with `Ω` the canonical symplectic form on `(φ, κ)`.
pub fn conformal_symplectic_residual(jac: &[Vec<f64>], c: f64) -> f64 {
    let n = jac.len();
    let dim = n / 2;
    let omega = |i: usize, j: usize| -> f64 {
        if i < dim && j == i + dim {
            1.0
        } else if i >= dim && j + dim == i {
            -1.0
        } else {
            0.0
        }
    };
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += jac[i][a] * omega(i, j) * jac[j][b];
                }
            }
            worst = worst.max((s - c * omega(a, b)).abs());
        }
    }
    worst
}

/// Largest deviation between a ν = 0 QSL step and an independent leapfrog
/// step over `trials` random states and potentials.
pub fn max_leapfrog_deviation(trials: usize, step_size: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dim = rng.random_range(1..=4);
        let target = RandomPotential::new(dim, 6, &mut rng);
        let z = random_point(dim, &mut rng);
        let g = Graph::new();
        let lj = flows::potential(|phi| target.log_joint(phi));
        let (q, _) = qsl_step(row_state(&g, &z), &lj, &FlowConfig::new(1, step_size, 0.0), None)?;
        let l = leapfrog_step(row_state(&g, &z), &lj, step_size)?;
        for (a, b) in flatten(&q).iter().zip(flatten(&l)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Largest `|inverse(forward(z)) − z|` over `trials` random states.
pub fn max_inverse_error(trials: usize, cfg: &FlowConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dim = rng.random_range(1..=4);
        let target = RandomPotential::new(dim, 6, &mut rng);
        let z = random_point(dim, &mut rng);
        let g = Graph::new();
        let lj = flows::potential(|phi| target.log_joint(phi));
        let (fwd, _) = qsl_step(row_state(&g, &z), &lj, cfg, None)?;
        let back = inverse_qsl_step(fwd, &lj, cfg)?;
        for (a, b) in flatten(&back).iter().zip(&z) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `|H(end) − H(start)|` for `H = ½φ² + ½κ²` after `steps` undamped steps
/// from `(1, 0)`.
pub fn quadratic_energy_drift(steps: usize, step_size: f64) -> Result<f64> {
    let g = Graph::new();
    let lj = flows::potential(|phi| Ok(phi.square().sum().scale(-0.5)));
    let s0 = row_state(&g, &[1.0, 0.0]);
    let flow = qsl_flow(s0, &lj, &FlowConfig::new(steps, step_size, 0.0), false)?;
    let end = flatten(&flow.final_state);
    Ok((0.5 * (end[0] * end[0] + end[1] * end[1]) - 0.5).abs())
}

/// The small Bernoulli model used by the gradient check (ζ=2, d=3).
pub fn gradient_toy() -> (Vae, ParamSet, Tensor) {
    let spec = ModelSpec {
        latent_dim: 2,
        data_dim: 3,
        hidden_sizes: vec![4],
        decoder_kind: DecoderKind::BernoulliMlp,
    };
    let model = Vae::bernoulli(spec).expect("valid spec");
    let params = model.init_params(2024);
    let x = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).expect("shape");
    (model, params, x)
}

/// Largest relative error, over all parameters, between reverse-mode and
/// central-difference gradients of the summed objective.
pub fn max_gradient_error(
    objective: Objective,
    model: &Vae,
    params: &ParamSet,
    cfg: &FlowConfig,
    x: &Tensor,
    seed: u64,
) -> Result<(f64, String)> {
    let (ep, ek) = draw_noise(&mut ChaCha8Rng::seed_from_u64(seed), x.shape()[0], model.latent_dim());
    let g = Graph::new();
    let bound = params.bind(&g);
    let est = elbo(objective, model, &bound, cfg, g.constant(x.clone()), g.constant(ep.clone()), g.constant(ek.clone()))?;
    let grads = bound.gradients(est.per_item.sum())?;
    let mut worst = (0.0, String::new());
    for (name, value) in params.iter() {
        let fd = numdiff::gradient(
            |theta| {
                let mut q = params.clone();
                q.set(name, Tensor::new(value.shape(), theta.to_vec()).expect("shape")).expect("shape");
                evaluate(objective, model, &q, cfg, x, &ep, &ek).expect("evaluates").iter().sum()
            },
            value.data(),
            1e-5,
        );
        let err = numdiff::relative_error(grads[name].data(), &fd);
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    }
    Ok(worst)
}

/// Seeded linear-Gaussian oracle problem with `d = 4`, `ζ = 2`.
pub fn oracle_problem(seed: u64) -> LinearGaussianModel {
    LinearGaussianModel::random_orthogonal(4, 2, 0.5, seed).expect("d >= ζ")
}

#[derive(Clone, Copy, Debug)]
pub struct MonteCarlo {
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
}

impl MonteCarlo {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            variance,
            stderr: (variance / n).sqrt(),
        }
    }
}

/// `draws` shared-noise evaluations of an objective at one data point.
pub fn repeated_draws(
    objective: Objective,
    model: &Vae,
    params: &ParamSet,
    cfg: &FlowConfig,
    x: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let xs = Tensor::matrix(draws, x.len(), x.repeat(draws))?;
    let (ep, ek) = draw_noise(&mut ChaCha8Rng::seed_from_u64(seed), draws, model.latent_dim());
    evaluate(objective, model, params, cfg, &xs, &ep, &ek)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn report(name: impl Into<String>, passed: bool, detail: String) -> CheckReport {
    CheckReport {
        name: name.into(),
        passed,
        detail,
    }
}

pub const SUITES: [&str; 5] = ["grad", "jacobian", "symplectic", "invert", "elbo-oracle"];

pub fn run_suite(name: &str) -> Result<Vec<CheckReport>> {
    match name {
        "grad" => grad_suite(),
        "jacobian" => jacobian_suite(),
        "symplectic" => symplectic_suite(),
        "invert" => invert_suite(),
        "elbo-oracle" => elbo_oracle_suite(),
        other => Err(Error::Argument(format!(
            "unknown suite `{other}` (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn grad_suite() -> Result<Vec<CheckReport>> {
    let (model, params, x) = gradient_toy();
    let mut out = Vec::new();
    for (objective, damping) in [
        (Objective::Vae, 0.0),
        (Objective::Qsl, 0.5),
        (Objective::QslRb, 0.5),
        (Objective::Hvae, 0.0),
    ] {
        let cfg = FlowConfig::new(3, 0.1, damping);
        let (err, name) = max_gradient_error(objective, &model, &params, &cfg, &x, 1)?;
        out.push(report(
            format!("gradient {}", objective.as_str()),
            err < 1e-4,
            format!("max relative error {err:.2e} at {name} (tolerance 1e-4)"),
        ));
    }
    Ok(out)
}

fn jacobian_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut seed = 0;
    for dim in [1, 2, 4] {
        for nu in [0.0, 0.5, 1.0] {
            for t in [1e-2, 1e-1] {
                seed += 1;
                let cfg = FlowConfig::new(1, t, nu);
                let jac = step_jacobian(dim, &cfg, seed);
                let det = numdiff::determinant(&jac);
                let want = (-(dim as f64) * nu * t).exp();
                let rel = ((det - want) / want).abs();
                let residual = conformal_symplectic_residual(&jac, (-nu * t).exp());
                out.push(report(
                    format!("det ζ={dim} ν={nu} t={t}"),
                    rel < 1e-4 && residual < 1e-6,
                    format!(
                        "det {det:.8} vs e^(-ζνt) {want:.8} (rel {rel:.1e}); |JᵀΩJ − e^(-νt)Ω| = {residual:.1e}"
                    ),
                ));
            }
        }
    }
    Ok(out)
}

fn symplectic_suite() -> Result<Vec<CheckReport>> {
    let dev = max_leapfrog_deviation(100, 0.1, 11)?;
    let mut out = vec![report(
        "ν=0 step equals leapfrog",
        dev < 1e-12,
        format!("max deviation {dev:.1e} over 100 states (tolerance 1e-12)"),
    )];
    for dim in [1, 3] {
        let jac = step_jacobian(dim, &FlowConfig::new(1, 0.1, 0.0), 5 + dim as u64);
        let residual = conformal_symplectic_residual(&jac, 1.0);
        out.push(report(
            format!("ν=0 step preserves Ω (ζ={dim})"),
            residual < 1e-6,
            format!("|JᵀΩJ − Ω| = {residual:.1e}"),
        ));
    }
    let drift = quadratic_energy_drift(1000, 1e-2)?;
    out.push(report(
        "energy drift",
        drift < 1e-3,
        format!("|ΔH| = {drift:.2e} after 1000 steps of t=1e-2 (tolerance 1e-3)"),
    ));
    Ok(out)
}

fn invert_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for nu in [0.0, 1.0] {
        let err = max_inverse_error(100, &FlowConfig::new(1, 0.1, nu), 21)?;
        out.push(report(
            format!("inverse round trip ν={nu}"),
            err < 1e-10,
            format!("max error {err:.1e} over 100 states (tolerance 1e-10)"),
        ));
    }
    Ok(out)
}

fn elbo_oracle_suite() -> Result<Vec<CheckReport>> {
    let lg = oracle_problem(7);
    let model = Vae::linear_gaussian(vec![], lg.clone())?;
    let params = model.init_params(3);
    let x = [0.6, -0.3, 1.2, -0.8];
    let evidence = exact_evidence(&x, &lg)?;
    let mut out = Vec::new();
    for (objective, damping) in [
        (Objective::Vae, 0.0),
        (Objective::Qsl, 0.5),
        (Objective::QslRb, 0.5),
        (Objective::Hvae, 0.0),
    ] {
        let cfg = FlowConfig::new(3, 0.1, damping);
        let mc = MonteCarlo::of(&repeated_draws(objective, &model, &params, &cfg, &x, 10_000, 5)?);
        out.push(report(
            format!("lower bound {}", objective.as_str()),
            mc.mean <= evidence + 3.0 * mc.stderr,
            format!("mean {:.4} ± {:.4} vs log p(x) {evidence:.4}", mc.mean, mc.stderr),
        ));
    }
    Ok(out)
}

/// Exact log-evidence of the linear-Gaussian likelihood, if the model has one.
pub fn linear_gaussian_of(model: &Vae) -> Option<&LinearGaussianModel> {
    match model.likelihood() {
        Likelihood::LinearGaussian(m) => Some(m),
        Likelihood::Bernoulli => None,
    }
}
