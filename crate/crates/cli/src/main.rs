use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rednet_core::nnops::{AttentionMode, KernelGenForm};
use rednet_core::rednet::{GroupChannels, MacConvention, MiddleOp, StemVariant};

mod cmd;
mod config;
mod output;

pub const SUBCOMMANDS: [&str; 6] = [
    "profile",
    "gradcheck",
    "oracle",
    "bench",
    "train-toy",
    "heatmap",
];

/// Involution operators, RedNet cost models and verification suites.
#[derive(Parser, Debug)]
#[command(name = "rednet", version, args_override_self = true)]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Allowed parameter deviation from published totals, percent.
    #[arg(long, global = true, default_value_t = 2.0, value_name = "PCT")]
    pub tolerance_params: f64,
    /// Allowed MAC deviation from published totals, percent.
    #[arg(long, global = true, default_value_t = 3.0, value_name = "PCT")]
    pub tolerance_macs: f64,
    /// TOML file: top-level keys set global flags, `[subcommand]` tables set
    /// that subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and MAC report, checked against published totals.
    Profile(cmd::profile::ProfileArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(cmd::checks::GradcheckArgs),
    /// Naive-loop oracles, structural properties and the attention identity.
    Oracle(cmd::checks::OracleArgs),
    /// Operator timings after an oracle check.
    Bench(cmd::bench::BenchArgs),
    /// Train RedNet-toy and a linear baseline on synthetic blobs.
    TrainToy(cmd::toy::ToyArgs),
    /// Per-group kernel-sum maps of one involution layer.
    Heatmap(cmd::heatmap::HeatmapArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpKind {
    Involution,
    Conv,
    Depthwise,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StemKind {
    Inv,
    Conv7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormKind {
    Bottleneck,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionKind {
    Content,
    Position,
}

/// The block's middle operator and the stem.
#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    #[arg(long, value_enum, default_value = "involution")]
    pub op: OpKind,
    /// Defaults to `inv` for involution and `conv7` otherwise.
    #[arg(long, value_enum)]
    pub stem: Option<StemKind>,
    /// Involution kernel size or attention window.
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    /// Channels sharing one kernel; `C` for a single group.
    #[arg(long, default_value = "16")]
    pub group_channels: String,
    #[arg(long, default_value_t = 4)]
    pub reduction: usize,
    #[arg(long, value_enum, default_value = "bottleneck")]
    pub form: FormKind,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, value_enum, default_value = "content")]
    pub attention: AttentionKind,
    /// Normalise attention affinities over the window.
    #[arg(long)]
    pub softmax: bool,
}

pub fn parse_group_channels(s: &str) -> Result<GroupChannels> {
    match s {
        "C" | "c" | "all" => Ok(GroupChannels::All),
        n => match n.parse::<usize>() {
            Ok(v) if v > 0 => Ok(GroupChannels::Channels(v)),
            _ => bail!("--group-channels must be a positive integer or C, got `{n}`"),
        },
    }
}

impl ArchArgs {
    pub fn middle(&self) -> Result<MiddleOp> {
        Ok(match self.op {
            OpKind::Involution => MiddleOp::Involution {
                kernel: self.kernel,
                group_channels: parse_group_channels(&self.group_channels)?,
                reduction: self.reduction,
                form: match self.form {
                    FormKind::Bottleneck => KernelGenForm::Bottleneck,
                    FormKind::Linear => KernelGenForm::Linear,
                },
            },
            OpKind::Conv => MiddleOp::Conv3x3,
            OpKind::Depthwise => MiddleOp::Depthwise3x3,
            OpKind::Attention => MiddleOp::Attention {
                window: self.kernel,
                heads: self.heads,
                mode: match self.attention {
                    AttentionKind::Content => AttentionMode::Content,
                    AttentionKind::Position => AttentionMode::Position,
                },
                softmax: self.softmax,
            },
        })
    }

    pub fn stem(&self) -> StemVariant {
        match self.stem.unwrap_or(if self.op == OpKind::Involution {
            StemKind::Inv
        } else {
            StemKind::Conv7
        }) {
            StemKind::Inv => StemVariant::InvStem,
            StemKind::Conv7 => StemVariant::Conv7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionKind {
    /// Broadcast multiply and window sum counted separately.
    Unfused,
    /// One MAC per kernel tap and channel.
    Fused,
}

impl From<ConventionKind> for MacConvention {
    fn from(c: ConventionKind) -> Self {
        match c {
            ConventionKind::Unfused => MacConvention::Unfused,
            ConventionKind::Fused => MacConvention::Fused,
        }
    }
}

/// Whether every check passed.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Profile(a) => cmd::profile::run(cli, a),
        Command::Gradcheck(a) => cmd::checks::run_gradcheck(cli, a),
        Command::Oracle(a) => cmd::checks::run_oracle(cli, a),
        Command::Bench(a) => cmd::bench::run(cli, a),
        Command::TrainToy(a) => cmd::toy::run(cli, a),
        Command::Heatmap(a) => cmd::heatmap::run(cli, a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
