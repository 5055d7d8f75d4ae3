//! Minibatch ELBO ascent with Adamax, early stopping and metric logging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::models::Vae;
use crate::ndgrad::{Graph, ParamSet, Tensor};
use crate::objectives::{draw_noise, elbo, evaluate, nll_importance, NllConfig, Objective};

/// Random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Split = 2,
    Batches = 3,
    Noise = 4,
    ValidationNoise = 5,
    Nll = 6,
    Sample = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn default_batch_size() -> usize {
    1000
}
fn default_learning_rate() -> f64 {
    5e-5
}
fn default_max_steps() -> usize {
    2000
}
fn default_patience() -> usize {
    100
}
fn default_objective() -> Objective {
    Objective::Qsl
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Validation evaluations without improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Training steps between validation evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Importance samples for the validation NLL column; 0 leaves it empty.
    #[serde(default)]
    pub nll_samples: usize,
    /// Fill the `seconds` column; off by default so logs are reproducible.
    #[serde(default)]
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            max_steps: default_max_steps(),
            patience: default_patience(),
            seed: 0,
            objective: default_objective(),
            val_fraction: default_val_fraction(),
            eval_every: default_eval_every(),
            nll_samples: 0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.max_steps", self.max_steps),
            ("train.patience", self.patience),
            ("train.eval_every", self.eval_every),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.patience >= self.max_steps {
            return Err(Error::Config(format!(
                "train.patience ({}) must be smaller than train.max_steps ({})",
                self.patience, self.max_steps
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Adamax state; the update ascends.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub u: BTreeMap<String, Tensor>,
}

impl Default for Adamax {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            u: BTreeMap::new(),
        }
    }
}

impl Adamax {
    pub fn new() -> Self {
        Self::default()
    }

    /// `m ← β1·m + (1−β1)·g`, `u ← max(β2·u, |g|)`,
    /// `θ ← θ + lr/(1−β1^step) · m/(u+ε)`.
    ///
    /// All gradients are checked before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, value) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Argument(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "adamax",
                    lhs: g.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteParameterGradient { name: name.to_string() });
            }
        }
        self.step += 1;
        let correction = lr / (1.0 - self.beta1.powi(self.step as i32));
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = &grads[&name];
            let theta = params.get(&name).expect("listed");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let u = self.u.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let mut m_new = Vec::with_capacity(g.len());
            let mut u_new = Vec::with_capacity(g.len());
            let mut theta_new = Vec::with_capacity(g.len());
            for ((&gi, (&mi, &ui)), &ti) in g.data().iter().zip(m.data().iter().zip(u.data())).zip(theta.data()) {
                let mi = self.beta1 * mi + (1.0 - self.beta1) * gi;
                let ui = (self.beta2 * ui).max(gi.abs());
                m_new.push(mi);
                u_new.push(ui);
                theta_new.push(ti + correction * mi / (ui + self.eps));
            }
            *m = Tensor::new(g.shape(), m_new)?;
            *u = Tensor::new(g.shape(), u_new)?;
            params.set(&name, Tensor::new(g.shape(), theta_new)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: &'static str,
    pub elbo: f64,
    pub nll: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "step,split,elbo,nll,seconds";

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.split, r.elbo, opt(r.nll), opt(r.seconds));
        }
        out
    }

    pub fn validation(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.split == "val")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub params: ParamSet,
    pub log: MetricLog,
    pub best_step: usize,
    pub best_val_elbo: f64,
    /// Per-item validation ELBOs at the best evaluation.
    pub best_val_items: Vec<f64>,
    pub init_val_elbo: f64,
    pub steps_run: usize,
    pub evaluations: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

/// Rows per graph when evaluating many items.
const EVAL_CHUNK: usize = 250;

/// Per-item objective values over `x` with fixed noise, evaluated in chunks
/// so the graph stays small.
pub fn evaluate_items(
    objective: Objective,
    model: &Vae,
    params: &ParamSet,
    flow: &FlowConfig,
    x: &Tensor,
    eps_phi: &Tensor,
    eps_kappa: &Tensor,
) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        out.extend(evaluate(
            objective,
            model,
            params,
            flow,
            &x.select_rows(&rows),
            &eps_phi.select_rows(&rows),
            &eps_kappa.select_rows(&rows),
        )?);
    }
    Ok(out)
}

/// Validation objective with fixed noise.
struct Validator<'a> {
    x: Tensor,
    eps_phi: Tensor,
    eps_kappa: Tensor,
    model: &'a Vae,
    flow: &'a FlowConfig,
    objective: Objective,
}

impl Validator<'_> {
    fn items(&self, params: &ParamSet) -> Result<Vec<f64>> {
        evaluate_items(self.objective, self.model, params, self.flow, &self.x, &self.eps_phi, &self.eps_kappa)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train from the model's seeded initialization.
pub fn train(dataset: &Dataset, model: &Vae, flow: &FlowConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init_seed = substream(cfg.seed, Stream::Init).next_u64();
    train_from(dataset, model, flow, cfg, model.init_params(init_seed), &mut |_| {})
}

/// Train from `params`, calling `observe` on every logged row.
pub fn train_from(
    dataset: &Dataset,
    model: &Vae,
    flow: &FlowConfig,
    cfg: &TrainConfig,
    mut params: ParamSet,
    observe: &mut dyn FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.objective.uses_flow() {
        flow.validate_deterministic()?;
    }
    model.check_params(&params)?;
    if dataset.dim() != model.data_dim() {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match model.data_dim {}",
            dataset.dim(),
            model.data_dim()
        )));
    }
    let started = Instant::now();
    let split_seed = substream(cfg.seed, Stream::Split).next_u64();
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, split_seed)?;
    let zdim = model.latent_dim();
    let (val_phi, val_kappa) = draw_noise(&mut substream(cfg.seed, Stream::ValidationNoise), val_idx.len(), zdim);
    let validator = Validator {
        x: dataset.batch(&val_idx),
        eps_phi: val_phi,
        eps_kappa: val_kappa,
        model,
        flow,
        objective: cfg.objective,
    };
    let mut batch_rng = substream(cfg.seed, Stream::Batches);
    let mut noise_rng = substream(cfg.seed, Stream::Noise);
    let mut nll_rng = substream(cfg.seed, Stream::Nll);
    let batch_size = cfg.batch_size.min(train_idx.len());
    let mut order = train_idx.clone();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0;

    let mut log = MetricLog::default();
    let mut record = |log: &mut MetricLog, row: MetricRow| {
        observe(&row);
        log.rows.push(row);
    };
    let seconds = |t: &Instant| cfg.record_time.then(|| t.elapsed().as_secs_f64());
    let mut optimizer = Adamax::new();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone(), Vec::new());
    let mut init_val = f64::NAN;
    let mut since_best = 0;
    let mut evaluations = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..=cfg.max_steps {
        if step > 0 {
            if cursor + batch_size > order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let batch = &order[cursor..cursor + batch_size];
            cursor += batch_size;
            let x = dataset.batch(batch);
            let (eps_phi, eps_kappa) = draw_noise(&mut noise_rng, batch_size, zdim);
            let g = Graph::new();
            let bound = params.bind(&g);
            let value = elbo(
                cfg.objective,
                model,
                &bound,
                flow,
                g.constant(x),
                g.constant(eps_phi),
                g.constant(eps_kappa),
            )
            .and_then(|est| {
                let objective = est.mean();
                Ok((objective.item(), bound.gradients(objective)?))
            });
            let (batch_elbo, grads) = value.map_err(|e| Error::TrainStep { step, source: Box::new(e) })?;
            drop(bound);
            optimizer
                .update(&mut params, &grads, cfg.learning_rate)
                .map_err(|e| Error::TrainStep { step, source: Box::new(e) })?;
            steps_run = step;
            record(&mut log, MetricRow { step, split: "train", elbo: batch_elbo, nll: None, seconds: seconds(&started) });
        }
        if step % cfg.eval_every != 0 && step != cfg.max_steps {
            continue;
        }
        let items = validator.items(&params).map_err(|e| Error::TrainStep { step, source: Box::new(e) })?;
        let val = mean(&items);
        let nll = if cfg.nll_samples > 0 {
            let per_item = nll_importance(
                cfg.objective,
                model,
                &params,
                flow,
                &validator.x,
                &NllConfig { samples: cfg.nll_samples },
                &mut nll_rng,
            )?;
            Some(mean(&per_item))
        } else {
            None
        };
        evaluations += 1;
        if step == 0 {
            init_val = val;
        }
        record(&mut log, MetricRow { step, split: "val", elbo: val, nll, seconds: seconds(&started) });
        if val > best.0 {
            best = (val, step, params.clone(), items);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_elbo, best_step, best_params, best_val_items) = best;
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_step,
        best_val_elbo,
        best_val_items,
        init_val_elbo: init_val,
        steps_run,
        evaluations,
        stopped_early,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
