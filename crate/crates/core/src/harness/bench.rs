use std::fmt::{self, Write as _};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::oracle::{naive_conv2d, naive_involution};
use crate::nnops::{conv2d, involution, ConvSpec, InvolutionSpec, KernelGenForm};
use crate::prng::Prng;
use crate::rednet::{layer_cost, GroupChannels, MacConvention, MiddleOp};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    /// Kernel generation plus multiply-add.
    Involution,
    Conv3x3,
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchOp::Involution => "involution",
            BenchOp::Conv3x3 => "conv3x3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub op: BenchOp,
    pub batch: usize,
    pub channels: usize,
    /// 3 for `conv3x3`.
    pub kernel: usize,
    /// Involution kernel groups; 1 for `conv3x3`.
    pub groups: usize,
    pub reduction: usize,
    pub height: usize,
    pub width: usize,
    pub reps: usize,
}

impl BenchConfig {
    /// Upper bound on any single input or output tensor.
    pub const MAX_ELEMENTS: usize = 1 << 24;
    /// Upper bound on the work of one repetition.
    pub const MAX_MACS: u64 = 20_000_000_000;
    pub const MIN_REPS: usize = 20;

    pub fn involution(channels: usize, kernel: usize, hw: usize) -> Self {
        Self {
            op: BenchOp::Involution,
            batch: 1,
            channels,
            kernel,
            groups: (channels / 16).max(1),
            reduction: 4.min(channels),
            height: hw,
            width: hw,
            reps: Self::MIN_REPS,
        }
    }

    pub fn conv3x3(channels: usize, hw: usize) -> Self {
        Self {
            op: BenchOp::Conv3x3,
            kernel: 3,
            groups: 1,
            reduction: 1,
            ..Self::involution(channels, 3, hw)
        }
    }

    fn middle(&self) -> MiddleOp {
        match self.op {
            BenchOp::Involution => MiddleOp::Involution {
                kernel: self.kernel,
                group_channels: GroupChannels::Channels(self.channels / self.groups.max(1)),
                reduction: self.reduction,
                form: KernelGenForm::Bottleneck,
            },
            BenchOp::Conv3x3 => MiddleOp::Conv3x3,
        }
    }

    /// Analytic MACs for the whole batch, in the fused convention that
    /// matches the implemented loops.
    pub fn macs(&self) -> u64 {
        self.batch as u64
            * layer_cost(
                self.middle(),
                self.channels,
                self.height,
                self.width,
                1,
                MacConvention::Fused,
            )
            .macs
    }

    fn guard(&self) -> Result<()> {
        let elems = self.batch * self.channels * self.height * self.width;
        let kernels = match self.op {
            BenchOp::Involution => {
                self.batch * self.groups * self.kernel * self.kernel * self.height * self.width
            }
            BenchOp::Conv3x3 => self.batch * 9 * self.channels * self.height * self.width,
        };
        if self.batch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        if elems.max(kernels) > Self::MAX_ELEMENTS || self.macs() > Self::MAX_MACS {
            return Err(Error::Config(format!(
                "bench config too large: {} elements, {} MACs per rep",
                elems.max(kernels),
                self.macs()
            )));
        }
        if self.reps < Self::MIN_REPS {
            return Err(Error::Config(format!(
                "at least {} repetitions required",
                Self::MIN_REPS
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub macs: u64,
    /// Largest deviation from the oracle, checked before timing.
    pub oracle_err: f64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str =
        "op,batch,channels,kernel,groups,reduction,height,width,reps,median_s,p10_s,p90_s,macs,gmacs_per_s";

    pub fn gmacs_per_s(&self) -> f64 {
        self.macs as f64 / self.median_s / 1e9
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{},{:.4}",
            c.op,
            c.batch,
            c.channels,
            c.kernel,
            c.groups,
            c.reduction,
            c.height,
            c.width,
            c.reps,
            self.median_s,
            self.p10_s,
            self.p90_s,
            self.macs,
            self.gmacs_per_s()
        );
        s
    }
}

/// Nearest-rank percentile of sorted samples, with the median averaged.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if q == 0.5 && n % 2 == 0 {
        return (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
    }
    sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)]
}

/// Times one operator after confirming its output against the oracle.
pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<BenchResult> {
    cfg.guard()?;
    let mut rng = Prng::new(seed);
    let x = Tensor::randn(
        &[cfg.batch, cfg.channels, cfg.height, cfg.width],
        1.0,
        &mut rng,
    )?;
    let run: Box<dyn Fn() -> Result<Tensor>>;
    let reference: Tensor;
    match cfg.op {
        BenchOp::Involution => {
            let mut spec = InvolutionSpec::new(
                cfg.channels,
                cfg.kernel,
                1,
                cfg.groups,
                cfg.reduction,
                &mut rng,
            )?;
            spec.span_bias = Tensor::randn(spec.span_bias.shape(), 0.1, &mut rng)?;
            reference = naive_involution(&x, &spec);
            let xc = x.clone();
            run = Box::new(move || involution(&xc, &spec));
        }
        BenchOp::Conv3x3 => {
            let spec = ConvSpec::new(cfg.channels, cfg.channels, 3, 1, 1, &mut rng)?;
            reference = naive_conv2d(&x, &spec.filters, 1, 1, 1);
            let xc = x.clone();
            run = Box::new(move || conv2d(&xc, &spec));
        }
    }
    let y = run()?;
    let oracle_err = y.max_abs_diff(&reference)?;
    if !(oracle_err <= 1e-9 * reference.max_abs().max(1.0)) {
        return Err(Error::Config(format!(
            "{} output failed the oracle check (error {oracle_err:e})",
            cfg.op
        )));
    }
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchResult {
        config: *cfg,
        median_s: percentile(&times, 0.5),
        p10_s: percentile(&times, 0.1),
        p90_s: percentile(&times, 0.9),
        macs: cfg.macs(),
        oracle_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.5);
        assert_eq!(percentile(&v, 0.1), 3.0);
        assert_eq!(percentile(&v, 0.9), 18.0);
    }

    #[test]
    fn guard_rejects_huge_configs() {
        let mut c = BenchConfig::conv3x3(512, 1024);
        assert!(run_bench(&c, 0).is_err());
        c = BenchConfig::involution(8, 3, 8);
        c.reps = 5;
        assert!(run_bench(&c, 0).is_err());
    }

    #[test]
    fn small_bench_runs() {
        let r = run_bench(&BenchConfig::involution(8, 1, 6), 0).unwrap();
        assert!(r.p10_s <= r.median_s && r.median_s <= r.p90_s);
        assert_eq!(
            r.csv_row().split(',').count(),
            BenchResult::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn mac_ratio_follows_the_cost_model() {
        let inv = BenchConfig::involution(64, 7, 56);
        let conv = BenchConfig::conv3x3(64, 56);
        let per_pos_inv = 64 * 16 + 16 * 49 * 4 + 49 * 64;
        assert_eq!(inv.macs(), 56 * 56 * per_pos_inv);
        assert_eq!(conv.macs(), 56 * 56 * 9 * 64 * 64);
    }
}
