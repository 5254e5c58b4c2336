// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cuekit` command-line pipeline. Every stage reads and writes files in a
//! run directory (`--out`) and records a run manifest.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cuekit::CueError;

use crate::run::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cuekit",
    version,
    about = "Cultural SAE feature discovery, bias diagnosis and steering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run directory; stage artifacts are read from and written to it.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Corpus TSV (default: <out>/corpus.tsv).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Activation dump directory (default: <out>/dump).
    #[arg(long, global = true)]
    dump: Option<PathBuf>,

    /// Decoder directory (default: <out>/decoders).
    #[arg(long, global = true)]
    decoders: Option<PathBuf>,

    /// Toy world configuration (default: <out>/world.json).
    #[arg(long, global = true)]
    world: Option<PathBuf>,

    /// Cumulative MI fraction kept by `select`.
    #[arg(long, global = true, default_value_t = 0.1)]
    rho: f64,

    /// Comma-separated steering strengths.
    #[arg(
        long,
        global = true,
        value_delimiter = ',',
        default_value = "0.25,0.5,1,2"
    )]
    alphas: Vec<f64>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Steer only layers divisible by this stride.
    #[arg(long, global = true, default_value_t = 1)]
    layer_stride: u32,

    /// Quantization scheme: binary, binary:T or quantile:K.
    #[arg(long, global = true, default_value = "binary")]
    scheme: String,

    /// Restrict to one culture label.
    #[arg(long, global = true)]
    target: Option<String>,

    /// Restrict to one condition: implicit, explicit, steer-implicit, steer-explicit.
    #[arg(long, global = true)]
    condition: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the toy oracle and write its dump, decoders, corpus and config.
    Synth {
        /// Records per label in the dump and assertions per label in the corpus.
        #[arg(long, default_value_t = 50)]
        n_per_label: usize,
        /// World configuration to use instead of the default layout.
        #[arg(long)]
        world_config: Option<PathBuf>,
    },
    /// Score features by mutual information and keep the top-rho prefix.
    Select,
    /// Per-label prototypes over the selected features.
    Prototypes,
    /// Per-response bias scores and concentration of response sets.
    Bias,
    /// Decode per-target steering vectors.
    SteerBuild {
        /// Rescale each target's vectors to unit norm.
        #[arg(long)]
        normalize: bool,
    },
    /// Generate and read responses under each condition.
    SteerRun {
        /// Responses per (condition, target, alpha).
        #[arg(long, default_value_t = 100)]
        generations: usize,
        /// Tokens generated per response.
        #[arg(long, default_value_t = 20)]
        new_tokens: usize,
    },
    /// Train per-layer linear probes from residual activations.
    Probe {
        #[arg(long, value_enum, default_value_t = PoolingArg::FinalToken)]
        pooling: PoolingArg,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
    },
    /// Judge responses and write the condition matrix and pairwise tallies.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    FinalToken,
    Mean,
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Config(_) => 2,
        CliError::Core(err) => match err {
            CueError::InvalidArgument(_) | CueError::UnknownLabel(_) => 2,
            CueError::Numeric(_) | CueError::NoInformativeFeatures | CueError::Judge { .. } => 4,
            _ => 3,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = RunConfig {
        command: String::new(),
        out: cli.out,
        corpus: cli.corpus,
        dump: cli.dump,
        decoders: cli.decoders,
        world: cli.world,
        rho: cli.rho,
        alphas: cli.alphas,
        seed: cli.seed,
        layer_stride: cli.layer_stride,
        scheme: cli.scheme,
        target: cli.target,
        condition: cli.condition,
        stage: Default::default(),
    };
    let result = match cli.command {
        Command::Synth {
            n_per_label,
            world_config,
        } => commands::synth(config, n_per_label, world_config),
        Command::Select => commands::select(config),
        Command::Prototypes => commands::prototypes(config),
        Command::Bias => commands::bias(config),
        Command::SteerBuild { normalize } => commands::steer_build(config, normalize),
        Command::SteerRun {
            generations,
            new_tokens,
        } => commands::steer_run(config, generations, new_tokens),
        Command::Probe { pooling, epochs } => {
            let pooling = match pooling {
                PoolingArg::FinalToken => cuekit::probes::Pooling::FinalToken,
                PoolingArg::Mean => cuekit::probes::Pooling::Mean,
            };
            commands::probe(config, pooling, epochs)
        }
        Command::Report => commands::report(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cuekit: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
