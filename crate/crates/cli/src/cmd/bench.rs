use anyhow::Result;
use clap::{Args, ValueEnum};
use rednet_core::harness::bench::{run_bench, BenchConfig, BenchResult};

use crate::output::Outputs;
use crate::{parse_group_channels, Cli};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchWhich {
    Involution,
    Conv3x3,
    Both,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub op: BenchWhich,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Spatial sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "14,28,56")]
    pub sizes: Vec<usize>,
    /// Involution kernel sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    pub kernels: Vec<usize>,
    #[arg(long, default_value = "16")]
    pub group_channels: String,
    #[arg(long, default_value_t = 4)]
    pub reduction: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = BenchConfig::MIN_REPS)]
    pub reps: usize,
}

pub fn run(cli: &Cli, a: &BenchArgs) -> Result<bool> {
    let groups = parse_group_channels(&a.group_channels)?.groups(a.channels);
    let mut configs = Vec::new();
    for &hw in &a.sizes {
        if a.op != BenchWhich::Conv3x3 {
            for &k in &a.kernels {
                configs.push(BenchConfig {
                    groups,
                    reduction: a.reduction.min(a.channels),
                    batch: a.batch,
                    reps: a.reps,
                    ..BenchConfig::involution(a.channels, k, hw)
                });
            }
        }
        if a.op != BenchWhich::Involution {
            configs.push(BenchConfig {
                batch: a.batch,
                reps: a.reps,
                ..BenchConfig::conv3x3(a.channels, hw)
            });
        }
    }
    let mut csv = format!("{}\n", BenchResult::CSV_HEADER);
    for c in &configs {
        let r = run_bench(c, cli.seed)?;
        println!(
            "{} C={} K={} G={} {}x{} B={}: median {:.3} ms, {} MACs, {:.3} GMAC/s",
            c.op,
            c.channels,
            c.kernel,
            c.groups,
            c.height,
            c.width,
            c.batch,
            r.median_s * 1e3,
            r.macs,
            r.gmacs_per_s()
        );
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let mut out = Outputs::new(&cli.out);
    out.add("bench.csv", csv);
    out.write()?;
    Ok(true)
}
