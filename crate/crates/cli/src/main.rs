use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qslvi_cli::commands::{self, EvalArgs, EvalSplit};
use qslvi_cli::config::SyntheticSpec;
use qslvi_cli::exit_code;

#[derive(Parser)]
#[command(name = "qslvi", version, about = "Quasi-symplectic Langevin variational autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    LinearGaussian,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report mean ELBO and importance-sampled NLL of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_enum, default_value = "all")]
        split: EvalSplit,
        #[arg(long)]
        json: bool,
    },
    /// Decode prior draws into a PGM image grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a numerical property suite.
    Check {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(qslvi::checks::SUITES))]
        suite: String,
    },
    /// Write a seeded synthetic dataset and its generating model.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        data_dim: usize,
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
        #[arg(long, default_value_t = 0.5)]
        obs_noise_var: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let seed = commands::seed_override()?;
    match cli.command {
        Command::Train { config, out: dir } => commands::cmd_train(&config, &dir, seed, &mut out)?,
        Command::Eval { checkpoint, data, samples, split, json } => {
            let args = EvalArgs { checkpoint: &checkpoint, data: &data, samples, split, json, seed };
            commands::cmd_eval(&args, &mut out)?
        }
        Command::Sample { checkpoint, n, out: path } => commands::cmd_sample(&checkpoint, n, &path, seed, &mut out)?,
        Command::Check { suite } => return commands::cmd_check(&suite, &mut out),
        Command::Synth { kind, n, data_dim, latent_dim, obs_noise_var, seed: synth_seed, out: dir } => {
            let kind = match kind {
                SynthKind::LinearGaussian => "linear_gaussian",
            };
            let spec = SyntheticSpec {
                kind: kind.into(),
                n,
                data_dim,
                latent_dim,
                obs_noise_var,
                seed: seed.unwrap_or(synth_seed),
            };
            commands::cmd_synth(&spec, &dir, &mut out)?
        }
    }
    out.flush()?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
