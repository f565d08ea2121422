//! `dfsim`: command-line driver for the DFS distribution simulator.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error.

mod channel;
mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfsim::protocols::{ProtocolId, Reference, SamplingConvention, DEFAULT_CUTOFF};

use crate::channel::{parse_list, parse_matrix_arg, ChannelFile};
use crate::commands::{
    OracleConfig, Output, ReciprocityConfig, ReciprocitySource, RunSettings, SweepConfig,
    TradeoffConfig, Verdict,
};
use crate::output::{emit, RunManifest};

#[derive(Parser)]
#[command(name = "dfsim", version, about = "DFS entanglement distribution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the backward/forward relation on random or given channels.
    Reciprocity(ReciprocityArgs),
    /// Run one distribution protocol.
    Protocol(ProtocolArgs),
    /// Success probability versus transmittance, with log-log slope.
    Sweep(SweepArgs),
    /// Fidelity/efficiency table of the weak-coherent reference.
    Tradeoff(TradeoffArgs),
    /// Compare the closed-form click probabilities with a Fock simulation.
    OracleCheck(OracleArgs),
    /// Re-run the command recorded in an output file's manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for all random draws.
    #[arg(long, env = "DFSIM_SEED", default_value_t = 0)]
    seed: u64,
    /// Output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReciprocityArgs {
    /// Channel description file.
    #[arg(long, conflicts_with = "random")]
    channel: Option<PathBuf>,
    /// Draw random channels with up to this many elements.
    #[arg(long)]
    random: Option<usize>,
    /// Number of random channels.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Declared backward matrix `re,im,re,im,re,im,re,im` to compare against
    /// instead of the element-wise composite.
    #[arg(long, allow_hyphen_values = true)]
    matrix: Option<String>,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Haar,
    AppendixUniform,
}

#[derive(Args)]
struct RunArgs {
    /// Protocol letter: a, b, c or d.
    #[arg(long, value_parser = parse_protocol)]
    protocol: ProtocolId,
    /// Channel 1̄ description file.
    #[arg(long)]
    channel: PathBuf,
    /// Channel 2̄ description file (protocols b and d).
    #[arg(long)]
    channel2: Option<PathBuf>,
    /// Weak coherent reference with this mean photon number at Alice.
    #[arg(long, conflicts_with = "single_photon")]
    mu: Option<f64>,
    /// Single-photon reference (the default).
    #[arg(long)]
    single_photon: bool,
    /// Signal state `re_h,im_h,re_v,im_v` for protocols a and b.
    #[arg(long, allow_hyphen_values = true)]
    signal: Option<String>,
    /// Average over random unitaries at the channel ends.
    #[arg(long, value_enum)]
    randomize: Option<Sampling>,
    /// Monte-Carlo samples when randomizing.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Use the same random unitaries on both channels.
    #[arg(long)]
    shared_randomization: bool,
    /// Total photon-number cutoff.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: usize,
}

#[derive(Args)]
struct ProtocolArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated channel transmittances.
    #[arg(long = "T-grid", alias = "t-grid")]
    t_grid: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TradeoffArgs {
    /// Transmittance of both channels.
    #[arg(long = "T", alias = "t")]
    t: f64,
    /// Comma-separated mean photon numbers.
    #[arg(long)]
    mu_grid: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct OracleArgs {
    /// `m=...;l=...;a=...` with comma-separated values per axis.
    #[arg(long)]
    grid_spec: Option<String>,
    #[arg(long, default_value_t = 8)]
    cutoff: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReplayArgs {
    /// Output file of an earlier run.
    file: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_protocol(s: &str) -> Result<ProtocolId, String> {
    s.parse().map_err(|e: dfsim::Error| e.to_string())
}

fn resolve_run(args: &RunArgs) -> Result<RunSettings> {
    let signal = match &args.signal {
        Some(s) => {
            let v = parse_list(s)?;
            if v.len() != 4 {
                bail!("--signal needs 4 numbers, got {}", v.len());
            }
            [v[0], v[1], v[2], v[3]]
        }
        None => {
            let d = std::f64::consts::FRAC_1_SQRT_2;
            [d, 0.0, d, 0.0]
        }
    };
    let reference = match args.mu {
        Some(mu) => Reference::Coherent { mu },
        None => Reference::SinglePhoton,
    };
    Ok(RunSettings {
        protocol: args.protocol,
        channel_1: ChannelFile::load(&args.channel)?,
        channel_2: args.channel2.as_deref().map(ChannelFile::load).transpose()?,
        reference,
        signal,
        sampling: args.randomize.map(|s| match s {
            Sampling::Haar => SamplingConvention::Haar,
            Sampling::AppendixUniform => SamplingConvention::AppendixUniform,
        }),
        samples: args.samples,
        shared_randomization: args.shared_randomization,
        cutoff: args.cutoff,
    })
}

const DEFAULT_ORACLE_AXIS: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];
const DEFAULT_ORACLE_A: [f64; 3] = [0.02, 0.1, 0.2];

fn parse_grid_spec(spec: Option<&str>) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut m = DEFAULT_ORACLE_AXIS.to_vec();
    let mut l = DEFAULT_ORACLE_AXIS.to_vec();
    let mut a = DEFAULT_ORACLE_A.to_vec();
    for part in spec.unwrap_or("").split(';').filter(|p| !p.trim().is_empty()) {
        let (key, values) = part
            .split_once('=')
            .with_context(|| format!("grid entry '{part}' is not key=values"))?;
        let values = parse_list(values)?;
        match key.trim() {
            "m" => m = values,
            "l" => l = values,
            "a" => a = values,
            other => bail!("unknown grid axis '{other}' (expected m, l or a)"),
        }
    }
    Ok((m, l, a))
}

fn execute(cli: Cli) -> Result<Output> {
    let (output, out) = match cli.command {
        Command::Reciprocity(args) => {
            let source = match (&args.channel, args.random) {
                (Some(path), None) => ReciprocitySource::File {
                    channel: ChannelFile::load(path)?,
                },
                (None, Some(n)) => ReciprocitySource::Random {
                    max_elements: n,
                    trials: args.trials,
                },
                _ => bail!("give either --channel FILE or --random N"),
            };
            let cfg = ReciprocityConfig {
                source,
                backward_override: args.matrix.as_deref().map(parse_matrix_arg).transpose()?,
                tolerance: args.tolerance,
            };
            (commands::reciprocity(&cfg, args.common.seed)?, args.common.out)
        }
        Command::Protocol(args) => {
            let settings = resolve_run(&args.run)?;
            (commands::protocol(&settings, args.common.seed)?, args.common.out)
        }
        Command::Sweep(args) => {
            let cfg = SweepConfig {
                run: resolve_run(&args.run)?,
                t_grid: parse_list(&args.t_grid)?,
            };
            (commands::sweep(&cfg, args.common.seed)?, args.common.out)
        }
        Command::Tradeoff(args) => {
            let cfg = TradeoffConfig {
                t: args.t,
                mu_grid: parse_list(&args.mu_grid)?,
            };
            (commands::tradeoff(&cfg, args.common.seed)?, args.common.out)
        }
        Command::OracleCheck(args) => {
            let (m_grid, l_grid, a_grid) = parse_grid_spec(args.grid_spec.as_deref())?;
            let cfg = OracleConfig {
                m_grid,
                l_grid,
                a_grid,
                cutoff: args.cutoff,
                tolerance: args.tolerance,
            };
            (commands::oracle_check(&cfg, args.common.seed)?, args.common.out)
        }
        Command::Replay(args) => {
            let text = std::fs::read_to_string(&args.file)
                .with_context(|| format!("reading {}", args.file.display()))?;
            let manifest = RunManifest::parse_header(&text)?;
            (commands::replay(&manifest)?, args.out)
        }
    };
    emit(&output.text, out.as_deref())?;
    Ok(output)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(output) => {
            for w in &output.warnings {
                eprintln!("warning: {w}");
            }
            match output.verdict {
                Verdict::Pass => ExitCode::SUCCESS,
                Verdict::CheckFailed => {
                    eprintln!("check failed");
                    ExitCode::from(1)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
