//! Subcommand implementations. Output goes to the supplied writer so the
//! commands can be exercised in-process.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde_json::json;
use sha2::{Digest, Sha256};

use qslvi::checks::{self, MonteCarlo};
use qslvi::data::{split_indices, write_csv, Dataset};
use qslvi::models::{exact_evidence, DecoderKind, LinearGaussianModel, Vae};
use qslvi::objectives::{draw_noise, nll_importance, NllConfig};
use qslvi::train::{evaluate_items, substream, train_from, MetricRow, Stream};
use qslvi::{Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{build_model, load_data, load_data_file, usage, LinearGaussianFile, RunConfig, SyntheticSpec};

pub const SEED_ENV: &str = "QSLVI_SEED";

/// `QSLVI_SEED`, if set.
pub fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn mean_exact_evidence(ds: &Dataset, rows: &[usize], lg: &LinearGaussianModel) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for &i in rows {
        total += exact_evidence(ds.item(i), lg)?;
    }
    Ok(total / rows.len() as f64)
}

pub fn cmd_train(config_path: &Path, out_dir: &Path, seed: Option<u64>, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let (ds, lg) = load_data(&cfg)?;
    let model = build_model(&cfg.model, lg.clone())?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let flow = cfg.flow.flow_config();
    let init_seed = substream(cfg.train.seed, Stream::Init).next_u64();
    let params = model.init_params(init_seed);
    let mut progress = |row: &MetricRow| {
        if row.split == "val" {
            eprintln!("step {:>6}  val elbo {:.5}", row.step, row.elbo);
        }
    };
    let outcome = train_from(&ds, &model, &flow, &cfg.train, params, &mut progress)?;

    fs::write(out_dir.join("metrics.csv"), outcome.log.to_csv())?;
    Checkpoint::new(&cfg, &outcome.params, lg.as_ref()).save(&out_dir.join("checkpoint.json"))?;

    let config_json = cfg.to_json();
    let mut meta = json!({
        "seed": cfg.train.seed,
        "config_sha256": sha256_hex(&config_json),
        "wall_seconds": outcome.wall_seconds,
        "steps_run": outcome.steps_run,
        "evaluations": outcome.evaluations,
        "stopped_early": outcome.stopped_early,
        "best_step": outcome.best_step,
        "best_val_elbo": outcome.best_val_elbo,
        "init_val_elbo": outcome.init_val_elbo,
        "binarize_threshold": cfg.data.binarize_threshold,
        "config": cfg,
    });
    let mut evidence_line = String::new();
    if let Some(lg) = &lg {
        let split_seed = substream(cfg.train.seed, Stream::Split).next_u64();
        let (_, val) = split_indices(ds.len(), cfg.train.val_fraction, split_seed)?;
        let ev = mean_exact_evidence(&ds, &val, lg)?;
        meta["val_exact_evidence"] = json!(ev);
        evidence_line = format!(", exact evidence {ev:.5}");
    }
    fs::write(out_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    writeln!(
        out,
        "trained {} steps ({} evaluations{}); best val elbo {:.5} at step {}{evidence_line}",
        outcome.steps_run,
        outcome.evaluations,
        if outcome.stopped_early { ", stopped early" } else { "" },
        outcome.best_val_elbo,
        outcome.best_step,
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    All,
    Train,
    Val,
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub samples: usize,
    pub split: EvalSplit,
    pub json: bool,
    pub seed: Option<u64>,
}

pub fn cmd_eval(args: &EvalArgs<'_>, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.samples == 0 {
        bail!(usage("--samples must be at least 1"));
    }
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let cfg = &ckpt.config;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let params = ckpt.param_set()?;
    let lg = ckpt.linear_gaussian()?;
    let model = build_model(&cfg.model, lg.clone())?;
    model.check_params(&params)?;
    let ds = load_data_file(args.data, &cfg.data)?;
    if ds.dim() != model.data_dim() {
        bail!(usage(format!(
            "data has dimension {} but the checkpoint model expects {}",
            ds.dim(),
            model.data_dim()
        )));
    }
    let rows: Vec<usize> = match args.split {
        EvalSplit::All => (0..ds.len()).collect(),
        split => {
            let split_seed = substream(seed, Stream::Split).next_u64();
            let (train, val) = split_indices(ds.len(), cfg.train.val_fraction, split_seed)?;
            if split == EvalSplit::Train {
                train
            } else {
                val
            }
        }
    };
    let objective = cfg.train.objective;
    let flow = cfg.flow.flow_config();
    let x = ds.batch(&rows);
    let (ep, ek) = draw_noise(&mut substream(seed, Stream::ValidationNoise), rows.len(), model.latent_dim());
    let elbo = MonteCarlo::of(&evaluate_items(objective, &model, &params, &flow, &x, &ep, &ek)?);
    let nll_items = nll_importance(
        objective,
        &model,
        &params,
        &flow,
        &x,
        &NllConfig { samples: args.samples },
        &mut substream(seed, Stream::Nll),
    )?;
    let nll = MonteCarlo::of(&nll_items);
    let evidence = match &lg {
        Some(lg) => Some(mean_exact_evidence(&ds, &rows, lg)?),
        None => None,
    };
    if args.json {
        let mut report = json!({
            "items": rows.len(),
            "objective": objective.as_str(),
            "samples": args.samples,
            "elbo": {"mean": elbo.mean, "stderr": elbo.stderr},
            "nll": {"mean": nll.mean, "stderr": nll.stderr},
        });
        if let Some(ev) = evidence {
            report["exact_evidence"] = json!(ev);
        }
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        writeln!(out, "items {}  objective {}  samples {}", rows.len(), objective.as_str(), args.samples)?;
        writeln!(out, "elbo {:.5} ± {:.5}", elbo.mean, elbo.stderr)?;
        writeln!(out, "nll  {:.5} ± {:.5}", nll.mean, nll.stderr)?;
        if let Some(ev) = evidence {
            writeln!(out, "exact log-evidence {ev:.5}")?;
        }
    }
    Ok(())
}

/// `(rows, cols)` of one image: square when `d` is a perfect square.
pub fn image_shape(d: usize) -> (usize, usize) {
    let r = (d as f64).sqrt().round() as usize;
    if r * r == d {
        (r, r)
    } else {
        (1, d)
    }
}

/// Tile `n` images (values in `[0, 1]`) into a grid with `⌈√n⌉` columns and
/// encode it as binary PGM. Empty cells are black.
pub fn encode_pgm_grid(images: &[Vec<f64>], rows: usize, cols: usize) -> Vec<u8> {
    let n = images.len();
    let grid_cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(grid_cols);
    let (width, height) = (grid_cols * cols, grid_rows * rows);
    let mut pixels = vec![0u8; width * height];
    for (k, img) in images.iter().enumerate() {
        let (gr, gc) = (k / grid_cols, k % grid_cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = (img[r * cols + c] * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels[(gr * rows + r) * width + gc * cols + c] = v;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

pub fn cmd_sample(checkpoint: &Path, n: usize, out_path: &Path, seed: Option<u64>, out: &mut dyn Write) -> anyhow::Result<()> {
    if n == 0 {
        bail!(usage("--n must be at least 1"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    if cfg.model.decoder_kind != DecoderKind::BernoulliMlp {
        bail!(usage("sampling images needs a bernoulli_mlp decoder"));
    }
    let params = ckpt.param_set()?;
    let model = Vae::bernoulli(cfg.model.clone())?;
    model.check_params(&params)?;
    let zdim = model.latent_dim();
    let mut rng = substream(seed.unwrap_or(cfg.train.seed), Stream::Sample);
    let phi: Vec<f64> = (0..n * zdim).map(|_| rng.sample(StandardNormal)).collect();
    let g = Graph::new();
    let bound = params.bind(&g);
    let means = model.decoder_logits(g.constant(Tensor::matrix(n, zdim, phi)?), &bound)?.sigmoid().value();
    let d = model.data_dim();
    let images: Vec<Vec<f64>> = (0..n).map(|i| means.data()[i * d..(i + 1) * d].to_vec()).collect();
    let (rows, cols) = image_shape(d);
    fs::write(out_path, encode_pgm_grid(&images, rows, cols)).with_context(|| format!("writing {}", out_path.display()))?;
    writeln!(out, "wrote {n} samples to {}", out_path.display())?;
    Ok(())
}

/// Returns whether every property passed.
pub fn cmd_check(suite: &str, out: &mut dyn Write) -> anyhow::Result<bool> {
    let reports = checks::run_suite(suite).map_err(|e| usage(e.to_string()))?;
    let mut all = true;
    for r in &reports {
        writeln!(out, "{r}")?;
        all &= r.passed;
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    writeln!(out, "{suite}: {passed}/{} passed", reports.len())?;
    Ok(all)
}

pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    if spec.kind != "linear_gaussian" {
        bail!(usage(format!("unknown kind `{}` (expected linear_gaussian)", spec.kind)));
    }
    if spec.n == 0 {
        bail!(usage("--n must be at least 1"));
    }
    let (ds, model) = crate::config::generate_synthetic(spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_csv(&ds, out_dir.join("dataset.csv"))?;
    let file = LinearGaussianFile::from_model(&model, spec.seed);
    fs::write(out_dir.join("model.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    writeln!(
        out,
        "wrote {} items of dimension {} to {}",
        ds.len(),
        ds.dim(),
        out_dir.join("dataset.csv").display()
    )?;
    Ok(())
}
