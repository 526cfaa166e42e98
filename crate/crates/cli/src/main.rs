use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fairicl::data::{write_csv, Schema};
use fairicl_cli::pipeline::{Pipeline, Policy};
use fairicl_cli::sweep::{sweep, SweepParam};
use fairicl_cli::synthetic::{planted_bias, SyntheticConfig};
use fairicl_cli::{serve, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fairicl", version, about = "Fair demonstration selection for in-context learning")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Sets any configuration key, e.g. `--set selection.k=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Recompute the requested stage even when its output exists.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the data and write the training split and the test splits.
    Prepare,
    /// Generate the hierarchical and random synthetic sets.
    Augment,
    /// Train the internal model.
    TrainLm,
    /// Learn every concept the configured strategies need.
    LearnConcept,
    /// Score the training split under each concept.
    Rank,
    /// Predict the test splits with every configured strategy.
    Infer,
    /// Compute per-run and aggregate reports.
    Evaluate,
    /// All stages, reusing complete outputs.
    Run,
    /// One full run per parameter value.
    Sweep {
        /// q, k, n_tilde_fraction or epochs.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Serve the trained internal model over the completions protocol.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8000")]
        addr: SocketAddr,
    },
    /// Write a planted-bias synthetic table as CSV.
    Synth {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let mut sets = cli.sets.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    let mut cfg = ExperimentConfig::load(path, &sets).with_context(|| format!("loading {}", path.display()))?;
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn pipeline(cli: &Cli, upstream: Policy) -> anyhow::Result<Pipeline> {
    Ok(Pipeline::new(load_config(cli)?)?.with_upstream(upstream).forced(cli.force))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Prepare => {
            let p = pipeline(&cli, Policy::Load)?;
            let out = p.prepare(Policy::Build)?;
            println!("{}", out.stage.dir.display());
        }
        Command::Augment => {
            let out = pipeline(&cli, Policy::Load)?.augment(Policy::Build)?;
            println!("{}", out.stage.dir.display());
        }
        Command::TrainLm => {
            let out = pipeline(&cli, Policy::Load)?.train_lm(Policy::Build)?;
            println!("{}", out.stage.dir.display());
        }
        Command::LearnConcept => {
            let p = pipeline(&cli, Policy::Load)?;
            let variants = p.variants();
            if variants.is_empty() {
                bail!("no configured strategy uses a concept");
            }
            for v in variants {
                let (c, _) = p.learn_concept(v, Policy::Build)?;
                println!("{v:?}\t{}", c.stage.dir.display());
            }
        }
        Command::Rank => {
            let p = pipeline(&cli, Policy::Load)?;
            let ranked: Vec<_> = p.cfg.strategies.iter().filter(|k| k.uses_ranking()).collect();
            if ranked.is_empty() {
                bail!("no configured strategy ranks demonstrations");
            }
            for v in p.variants() {
                let r = p.rank(v, Policy::Build)?;
                println!("{v:?}\t{}", r.stage.dir.display());
            }
        }
        Command::Infer => {
            let p = pipeline(&cli, Policy::Load)?;
            for &k in &p.cfg.strategies {
                let out = p.infer(k, Policy::Build)?;
                println!("{}\t{}", k.as_str(), out.stage.dir.display());
            }
        }
        Command::Evaluate | Command::Run => {
            let upstream = if matches!(cli.command, Command::Run) {
                Policy::Build
            } else {
                Policy::Load
            };
            let (s, _) = pipeline(&cli, upstream)?.evaluate(Policy::Build)?;
            print!("{}", std::fs::read_to_string(s.path(fairicl_cli::pipeline::SUMMARY))?);
            println!("{}", s.dir.display());
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let (s, _) = sweep(&load_config(&cli)?, param, values)?;
            print!("{}", std::fs::read_to_string(s.path("table.csv"))?);
        }
        Command::Serve { addr } => {
            let model = pipeline(&cli, Policy::Load)?.train_lm(Policy::Load)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve::serve(model.lm, *addr))?;
        }
        Command::Synth {
            schema,
            n,
            data_seed,
            out,
        } => {
            let schema = Schema::load(schema)?;
            let d = planted_bias(&schema, &SyntheticConfig::new(*n, *data_seed))?;
            write_csv(&d, out, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
