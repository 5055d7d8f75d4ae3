//! Quasi-symplectic Langevin integrator, the leapfrog baseline and flow
//! composition.
//!
//! One QSL step with step size `t` and damping `ν` is
//!
//! ```text
//! κa = κ·e^{−νt/2}
//! φh = φ + (t/2)·κa
//! κb = κa + t·∇φ log p(x, φh) + √t·σ·ξ
//! κ' = κb·e^{−νt/2}
//! φ' = φh + (t/2)·κb
//! ```
//!
//! The drifts and the kick are shears (unit determinant) and each damping
//! half-step scales every velocity coordinate by `e^{−νt/2}`. For a latent of
//! dimension ζ the step therefore has the constant Jacobian determinant
//! `e^{−ζνt}`; each coordinate pair `(φj, κj)` contributes `e^{−νt}`.
//!
//! Positions and velocities are `[batch, ζ]` (or `[ζ]`) nodes; the log-joint
//! passed to the integrator must return the sum over the batch so that its
//! gradient is the per-item gradient stacked row-wise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Var;

/// Integrator hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub noise: f64,
}

impl FlowConfig {
    pub fn new(steps: usize, step_size: f64, damping: f64) -> Self {
        Self {
            steps,
            step_size,
            damping,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("flow.steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "flow.step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!(
                "flow.damping must be non-negative, got {}",
                self.damping
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "flow.noise must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Valid and deterministic (`σ = 0`), as required wherever the flow
    /// defines a density.
    pub fn validate_deterministic(&self) -> Result<()> {
        self.validate()?;
        if self.noise != 0.0 {
            return Err(Error::Config(
                "flow.noise must be 0 when the flow is used as a density transform".into(),
            ));
        }
        Ok(())
    }

    /// `log |det ∂Ψ⁻¹|` of one step for a latent of dimension `dim`.
    pub fn step_log_det_inverse(&self, dim: usize) -> f64 {
        dim as f64 * self.damping * self.step_size
    }

    /// Closed-form `log |det ∂(Ψ^I)⁻¹| = I·ζ·ν·t`.
    pub fn log_det_inverse_sum(&self, dim: usize) -> f64 {
        self.steps as f64 * self.step_log_det_inverse(dim)
    }
}

/// Augmented latent state: position φ and velocity κ of identical shape.
#[derive(Clone, Copy, Debug)]
pub struct PhasePoint<'g> {
    pub position: Var<'g>,
    pub velocity: Var<'g>,
}

impl<'g> PhasePoint<'g> {
    pub fn new(position: Var<'g>, velocity: Var<'g>) -> Result<Self> {
        let (p, v) = (position.shape(), velocity.shape());
        if p != v {
            return Err(Error::Shape {
                op: "PhasePoint",
                lhs: p,
                rhs: v,
            });
        }
        Ok(Self { position, velocity })
    }

    /// Latent dimension ζ (the last axis).
    pub fn dim(&self) -> usize {
        self.position.shape().last().copied().unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct FlowResult<'g> {
    pub final_state: PhasePoint<'g>,
    /// Per-item `I·ζ·ν·t`, computed in closed form.
    pub log_det_inverse_sum: f64,
    pub trajectory: Option<Vec<PhasePoint<'g>>>,
}

/// Scalar log-joint `φ ↦ Σ_batch log p(x, φ)`.
pub type LogJoint<'a, 'g> = dyn Fn(Var<'g>) -> Result<Var<'g>> + 'a;

/// Ties a closure's argument and result to one graph lifetime so it can be
/// passed as a [`LogJoint`]; plain closures otherwise infer two lifetimes.
pub fn potential<'g, F: Fn(Var<'g>) -> Result<Var<'g>>>(f: F) -> F {
    f
}

/// `κ·e^{−νt/2}`.
pub fn damp_half<'g>(velocity: Var<'g>, step_size: f64, damping: f64) -> Var<'g> {
    velocity.scale((-damping * step_size / 2.0).exp())
}

/// `∇φ log_joint(φ)` as a differentiable node.
pub fn log_joint_gradient<'g>(position: Var<'g>, log_joint: &LogJoint<'_, 'g>) -> Result<Var<'g>> {
    let value = log_joint(position)?;
    let grad = position.graph().grad(value, &[position])?.remove(0);
    if !grad.value().all_finite() {
        return Err(Error::NonFiniteGradient {
            norm: position.value().norm(),
        });
    }
    Ok(grad)
}

/// One quasi-symplectic Langevin step; returns the new state and the per-item
/// `log |det ∂Ψ⁻¹| = ζ·ν·t`.
pub fn qsl_step<'g>(
    state: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    cfg: &FlowConfig,
    xi: Option<Var<'g>>,
) -> Result<(PhasePoint<'g>, f64)> {
    let t = cfg.step_size;
    let kappa_a = damp_half(state.velocity, t, cfg.damping);
    let phi_h = state.position.add(kappa_a.scale(t / 2.0))?;
    let force = log_joint_gradient(phi_h, log_joint)?;
    let mut kappa_b = kappa_a.add(force.scale(t))?;
    match (cfg.noise > 0.0, xi) {
        (true, Some(xi)) => kappa_b = kappa_b.add(xi.scale(t.sqrt() * cfg.noise))?,
        (true, None) => {
            return Err(Error::Argument(
                "a noise draw is required when flow.noise > 0".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::Argument(
                "a noise draw was supplied but flow.noise is 0".into(),
            ))
        }
        (false, None) => {}
    }
    let velocity = damp_half(kappa_b, t, cfg.damping);
    let position = phi_h.add(kappa_b.scale(t / 2.0))?;
    let next = PhasePoint { position, velocity };
    Ok((next, cfg.step_log_det_inverse(state.dim())))
}

/// Exact algebraic inverse of a deterministic [`qsl_step`].
pub fn inverse_qsl_step<'g>(
    state: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    cfg: &FlowConfig,
) -> Result<PhasePoint<'g>> {
    if cfg.noise != 0.0 {
        return Err(Error::Config("the inverse step needs flow.noise = 0".into()));
    }
    let t = cfg.step_size;
    let undamp = (cfg.damping * t / 2.0).exp();
    let kappa_b = state.velocity.scale(undamp);
    let phi_h = state.position.sub(kappa_b.scale(t / 2.0))?;
    let force = log_joint_gradient(phi_h, log_joint)?;
    let kappa_a = kappa_b.sub(force.scale(t))?;
    let velocity = kappa_a.scale(undamp);
    let position = phi_h.sub(kappa_a.scale(t / 2.0))?;
    Ok(PhasePoint { position, velocity })
}

/// Position-Verlet (drift–kick–drift) step of Hamiltonian dynamics with unit
/// mass. Written out separately from [`qsl_step`] so the two can be compared.
pub fn leapfrog_step<'g>(
    state: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    step_size: f64,
) -> Result<PhasePoint<'g>> {
    let half = step_size / 2.0;
    let phi_h = state.position.add(state.velocity.scale(half))?;
    let force = log_joint_gradient(phi_h, log_joint)?;
    let velocity = state.velocity.add(force.scale(step_size))?;
    let position = phi_h.add(velocity.scale(half))?;
    Ok(PhasePoint { position, velocity })
}

/// `I` deterministic QSL steps.
pub fn qsl_flow<'g>(
    initial: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    cfg: &FlowConfig,
    keep_trajectory: bool,
) -> Result<FlowResult<'g>> {
    cfg.validate_deterministic()?;
    let mut state = initial;
    let mut trajectory = keep_trajectory.then(|| vec![initial]);
    for step in 1..=cfg.steps {
        let (next, _) = qsl_step(state, log_joint, cfg, None).map_err(|e| Error::FlowStep {
            step,
            source: Box::new(e),
        })?;
        state = next;
        if let Some(traj) = trajectory.as_mut() {
            traj.push(state);
        }
    }
    Ok(FlowResult {
        final_state: state,
        log_det_inverse_sum: cfg.log_det_inverse_sum(initial.dim()),
        trajectory,
    })
}

/// `steps` leapfrog steps; volume preserving, so the log-det sum is zero.
pub fn leapfrog_flow<'g>(
    initial: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    steps: usize,
    step_size: f64,
) -> Result<FlowResult<'g>> {
    let mut state = initial;
    for step in 1..=steps {
        state = leapfrog_step(state, log_joint, step_size).map_err(|e| Error::FlowStep {
            step,
            source: Box::new(e),
        })?;
    }
    Ok(FlowResult {
        final_state: state,
        log_det_inverse_sum: 0.0,
        trajectory: None,
    })
}

/// Stochastic QSL trajectory (`σ > 0`), for sampling diagnostics only; it is
/// not a density transform. `noise` supplies one standard-normal draw per step.
pub fn qsl_sample_path<'g>(
    initial: PhasePoint<'g>,
    log_joint: &LogJoint<'_, 'g>,
    cfg: &FlowConfig,
    mut noise: impl FnMut(usize) -> Var<'g>,
) -> Result<Vec<PhasePoint<'g>>> {
    cfg.validate()?;
    let mut path = vec![initial];
    let mut state = initial;
    for step in 1..=cfg.steps {
        let xi = (cfg.noise > 0.0).then(|| noise(step));
        let (next, _) = qsl_step(state, log_joint, cfg, xi).map_err(|e| Error::FlowStep {
            step,
            source: Box::new(e),
        })?;
        // Detach so long diagnostic runs do not keep a growing graph alive
        // through the gradient path.
        state = PhasePoint {
            position: next.position.detach(),
            velocity: next.velocity.detach(),
        };
        path.push(state);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{Graph, Tensor};
    use crate::numdiff;

    fn quadratic<'g>() -> impl Fn(Var<'g>) -> Result<Var<'g>> {
        |phi: Var<'g>| Ok(phi.square().sum().scale(-0.5))
    }

    fn state<'g>(g: &'g Graph, phi: &[f64], kappa: &[f64]) -> PhasePoint<'g> {
        PhasePoint::new(
            g.leaf(Tensor::vector(phi)),
            g.leaf(Tensor::vector(kappa)),
        )
        .unwrap()
    }

    fn pair(p: &PhasePoint<'_>) -> (f64, f64) {
        (p.position.value().data()[0], p.velocity.value().data()[0])
    }

    #[test]
    fn damp_half_closed_forms() {
        let g = Graph::new();
        let one = g.scalar(1.0);
        assert!((damp_half(one, 1.0, 2.0).item() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(damp_half(g.scalar(0.7), 0.3, 0.0).item(), 0.7);
        // 0.5·e^{−0.05}
        assert!((damp_half(g.scalar(0.5), 0.1, 1.0).item() - 0.475614712).abs() < 1e-9);
    }

    #[test]
    fn undamped_step_on_quadratic_potential() {
        let g = Graph::new();
        let lj = quadratic();
        let (next, ld) = qsl_step(state(&g, &[1.0], &[0.0]), &lj, &FlowConfig::new(1, 0.1, 0.0), None).unwrap();
        let (phi, kappa) = pair(&next);
        assert!((phi - 0.995).abs() < 1e-12 && (kappa + 0.1).abs() < 1e-12);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn damped_step_matches_hand_evaluation() {
        // κa = 0.5e^{−0.05}, φh = 1 + 0.05κa, κb = κa − 0.1φh,
        // κ' = κb e^{−0.05}, φ' = φh + 0.05κb.
        let ka = 0.5 * (-0.05f64).exp();
        let ph = 1.0 + 0.05 * ka;
        let kb = ka - 0.1 * ph;
        let (want_phi, want_kappa) = (ph + 0.05 * kb, kb * (-0.05f64).exp());
        assert!((ka - 0.475615).abs() < 1e-6 && (ph - 1.023781).abs() < 1e-6 && (kb - 0.373237).abs() < 1e-6);
        assert!((want_phi - 1.042443).abs() < 1e-6 && (want_kappa - 0.355033).abs() < 1e-6);

        let g = Graph::new();
        let lj = quadratic();
        let (next, ld) = qsl_step(state(&g, &[1.0], &[0.5]), &lj, &FlowConfig::new(1, 0.1, 1.0), None).unwrap();
        let (phi, kappa) = pair(&next);
        assert!((phi - want_phi).abs() < 1e-14 && (kappa - want_kappa).abs() < 1e-14);
        assert!((ld - 0.1).abs() < 1e-15);
    }

    /// `log p = −φ⁴/4 − softplus(φ)`
    fn quartic(phi: Var<'_>) -> Result<Var<'_>> {
        Ok(phi.square().square().scale(-0.25).sub(phi.softplus())?.sum())
    }

    fn free(phi: Var<'_>) -> Result<Var<'_>> {
        Ok(phi.scale(0.0).sum())
    }

    fn blows_up(phi: Var<'_>) -> Result<Var<'_>> {
        Ok(phi.scale(f64::INFINITY).sum())
    }

    /// One-dimensional step map `(φ, κ) ↦ (φ', κ')` on a non-quadratic potential.
    fn step_map(cfg: FlowConfig) -> impl Fn(&[f64]) -> Vec<f64> {
        move |z: &[f64]| {
            let g = Graph::new();
            let s = PhasePoint::new(g.constant(Tensor::vector(&z[..1])), g.constant(Tensor::vector(&z[1..]))).unwrap();
            let (n, _) = qsl_step(s, &quartic, &cfg, None).unwrap();
            vec![n.position.item(), n.velocity.item()]
        }
    }

    #[test]
    fn one_dimensional_jacobian_is_exp_of_minus_damping_times_step() {
        let cfg = FlowConfig::new(1, 0.01, 0.5);
        for z in [[0.3, -1.2], [-1.7, 0.4], [2.0, 2.0]] {
            let j = numdiff::jacobian(step_map(cfg), &z, 1e-5);
            let det = numdiff::determinant(&j);
            assert!((det - (-0.005f64).exp()).abs() / 0.995012 < 1e-6, "det {det}");
        }
    }

    #[test]
    fn leapfrog_examples() {
        let g = Graph::new();
        let lj = quadratic();
        let next = leapfrog_step(state(&g, &[1.0], &[0.0]), &lj, 0.1).unwrap();
        let (phi, kappa) = pair(&next);
        assert!((phi - 0.995).abs() < 1e-12 && (kappa + 0.1).abs() < 1e-12);

        let next = leapfrog_step(state(&g, &[0.2, -0.1], &[1.0, 3.0]), &free, 0.5).unwrap();
        assert_eq!(next.position.value().data(), &[0.7, 1.4]);
        assert_eq!(next.velocity.value().data(), &[1.0, 3.0]);

        let j = numdiff::jacobian(step_map(FlowConfig::new(1, 0.1, 0.0)), &[0.4, -0.3], 1e-5);
        assert!((numdiff::determinant(&j) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn flow_composition() {
        let g = Graph::new();
        let lj = quadratic();
        let cfg = FlowConfig::new(1, 0.1, 1.0);
        let s0 = state(&g, &[1.0], &[0.5]);
        let flow = qsl_flow(s0, &lj, &cfg, true).unwrap();
        let (step, _) = qsl_step(s0, &lj, &cfg, None).unwrap();
        assert_eq!(pair(&flow.final_state), pair(&step));
        assert_eq!(flow.trajectory.as_ref().unwrap().len(), 2);

        let cfg = FlowConfig::new(3, 0.01, 0.2);
        let flow = qsl_flow(s0, &lj, &cfg, false).unwrap();
        assert!((flow.log_det_inverse_sum - 0.006).abs() < 1e-15);
    }

    #[test]
    fn undamped_flow_conserves_energy_against_fine_reference() {
        let energy = |p: (f64, f64)| 0.5 * p.0 * p.0 + 0.5 * p.1 * p.1;
        let t = 0.1;
        let g = Graph::new();
        let lj = quadratic();
        let s0 = state(&g, &[0.8], &[-0.6]);
        let h0 = energy(pair(&s0));
        let coarse = qsl_flow(s0, &lj, &FlowConfig::new(5, t, 0.0), true).unwrap();
        let fine = qsl_flow(s0, &lj, &FlowConfig::new(500, t / 100.0, 0.0), true).unwrap();
        let (traj, fine_traj) = (coarse.trajectory.unwrap(), fine.trajectory.unwrap());
        for (n, p) in traj.iter().enumerate().skip(1) {
            let reference = energy(pair(&fine_traj[n * 100]));
            assert!((reference - h0).abs() < 1e-5);
            assert!((energy(pair(p)) - reference).abs() < t * t, "step {n}");
        }
    }

    #[test]
    fn inverse_examples() {
        for (cfg, z) in [
            (FlowConfig::new(1, 0.1, 0.0), [0.3, -0.9]),
            (FlowConfig::new(1, 0.1, 1.0), [1.0, 0.5]),
        ] {
            let g = Graph::new();
            let lj = quadratic();
            let s = state(&g, &z[..1], &z[1..]);
            let (fwd, _) = qsl_step(s, &lj, &cfg, None).unwrap();
            let back = inverse_qsl_step(fwd, &lj, &cfg).unwrap();
            let (phi, kappa) = pair(&back);
            assert!((phi - z[0]).abs() < 1e-12 && (kappa - z[1]).abs() < 1e-12);
        }
        let g = Graph::new();
        let lj = quadratic();
        let s = state(&g, &[0.4], &[-0.2]);
        let tiny = FlowConfig::new(1, 1e-8, 0.5);
        let back = inverse_qsl_step(s, &lj, &tiny).unwrap();
        let (phi, kappa) = pair(&back);
        assert!((phi - 0.4).abs() < 1e-7 && (kappa + 0.2).abs() < 1e-7);
    }

    #[test]
    fn noisy_configs_are_rejected_where_a_density_is_needed() {
        let g = Graph::new();
        let lj = quadratic();
        let mut cfg = FlowConfig::new(2, 0.1, 0.0);
        cfg.noise = 0.3;
        assert!(qsl_flow(state(&g, &[0.0], &[0.0]), &lj, &cfg, false).is_err());
        assert!(inverse_qsl_step(state(&g, &[0.0], &[0.0]), &lj, &cfg).is_err());
        assert!(qsl_step(state(&g, &[0.0], &[0.0]), &lj, &cfg, None).is_err());
        let path = qsl_sample_path(state(&g, &[0.0], &[0.0]), &lj, &cfg, |_| g.constant(Tensor::vector(&[1.0]))).unwrap();
        assert_eq!(path.len(), 3);
        assert!(path[1].velocity.item() > 0.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(FlowConfig::new(0, 0.1, 0.0).validate().is_err());
        assert!(FlowConfig::new(1, 0.0, 0.0).validate().is_err());
        assert!(FlowConfig::new(1, 0.1, -1.0).validate().is_err());
        assert!(FlowConfig::new(1, 0.1, 0.0).validate().is_ok());
    }

    #[test]
    fn non_finite_gradient_reports_position_norm() {
        let g = Graph::new();
        let err = qsl_flow(state(&g, &[3.0], &[4.0]), &blows_up, &FlowConfig::new(2, 0.1, 0.0), false).unwrap_err();
        match err {
            Error::FlowStep { step: 1, source } => match *source {
                Error::NonFiniteGradient { norm } => assert!((norm - 3.2).abs() < 1e-12),
                other => panic!("unexpected {other}"),
            },
            other => panic!("unexpected {other}"),
        }
    }
}
