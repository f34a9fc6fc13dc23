//! Reference implementations written as plain nested loops over centred
//! window offsets. They share no indexing code with the operators in
//! [`crate::nnops`] and are only meant for small inputs.

use std::fmt;

use crate::error::Result;
use crate::nnops::{
    conv2d, depthwise_conv2d, involution, involution_mac, involution_mac_unfolded, kernel_generate,
    local_self_attention, AttentionMode, AttentionSpec, BnMode, ConvSpec, InvolutionSpec,
    KernelGenForm, Window,
};
use crate::prng::Prng;
use crate::tensor::Tensor;

struct Grid<'a> {
    data: &'a [f64],
    c: usize,
    h: usize,
    w: usize,
}

impl<'a> Grid<'a> {
    fn new(x: &'a Tensor) -> Self {
        let s = x.shape();
        Self {
            data: x.data(),
            c: s[1],
            h: s[2],
            w: s[3],
        }
    }

    /// Zero outside the map.
    fn get(&self, b: usize, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            return 0.0;
        }
        self.data[((b * self.c + c) * self.h + i as usize) * self.w + j as usize]
    }
}

fn out_len(n: usize, k: usize, s: usize, d: usize) -> usize {
    let p = (k / 2 * d) as isize;
    let mut count = 0;
    // last window must start no later than n + 2p − span
    while ((count * s) as isize) < n as isize + 2 * p - (d * (k - 1)) as isize {
        count += 1;
    }
    count
}

/// Centred offsets `Δ_K = {−⌊K/2⌋, …, ⌊K/2⌋}` scaled by dilation.
fn offsets(k: usize, d: usize) -> Vec<isize> {
    let r = (k / 2) as isize;
    (-r..=r).map(|u| u * d as isize).collect()
}

pub fn naive_conv2d(
    x: &Tensor,
    f: &Tensor,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Tensor {
    let g = Grid::new(x);
    let b = x.shape()[0];
    let (co, cig, k) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (ho, wo) = (
        out_len(g.h, k, stride, dilation),
        out_len(g.w, k, stride, dilation),
    );
    let cog = co / groups;
    let off = offsets(k, dilation);
    let mut y = vec![0.0; b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            let grp = o / cog;
            for i in 0..ho {
                for j in 0..wo {
                    let (ci0, cj0) = ((i * stride) as isize, (j * stride) as isize);
                    let mut acc = 0.0;
                    for ic in 0..cig {
                        let c = grp * cig + ic;
                        for (a, &u) in off.iter().enumerate() {
                            for (bb, &v) in off.iter().enumerate() {
                                let wv = f.data()[((o * cig + ic) * k + a) * k + bb];
                                acc += wv * g.get(bi, c, ci0 + u, cj0 + v);
                            }
                        }
                    }
                    y[((bi * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], y).expect("positive dims")
}

/// Filters `(C, 1, K, K)`.
pub fn naive_depthwise(x: &Tensor, f: &Tensor, stride: usize) -> Tensor {
    let g = Grid::new(x);
    let b = x.shape()[0];
    let k = f.shape()[2];
    let (ho, wo) = (out_len(g.h, k, stride, 1), out_len(g.w, k, stride, 1));
    let off = offsets(k, 1);
    let mut y = vec![0.0; b * g.c * ho * wo];
    for bi in 0..b {
        for c in 0..g.c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for (a, &u) in off.iter().enumerate() {
                        for (bb, &v) in off.iter().enumerate() {
                            acc += f.data()[(c * k + a) * k + bb]
                                * g.get(
                                    bi,
                                    c,
                                    (i * stride) as isize + u,
                                    (j * stride) as isize + v,
                                );
                        }
                    }
                    y[((bi * g.c + c) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, g.c, ho, wo], y).expect("positive dims")
}

/// Kernels generated pixel by pixel with explicit matrix-vector products.
pub fn naive_kernel_generate(x: &Tensor, spec: &InvolutionSpec) -> Tensor {
    let g = Grid::new(x);
    let (b, c, s) = (x.shape()[0], g.c, spec.stride);
    let (hp, wp) = (g.h / s, g.w / s);
    let n = b * hp * wp;
    // pooled pixel vectors
    let mut pix = vec![vec![0.0; c]; n];
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                let p = &mut pix[(bi * hp + i) * wp + j];
                for (ch, v) in p.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for di in 0..s {
                        for dj in 0..s {
                            acc += g.get(bi, ch, (i * s + di) as isize, (j * s + dj) as isize);
                        }
                    }
                    *v = acc / (s * s) as f64;
                }
            }
        }
    }
    let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        (0..rows)
            .map(|r| (0..cols).map(|q| m.data()[r * cols + q] * v[q]).sum())
            .collect()
    };
    let hidden: Vec<Vec<f64>> = match &spec.reduce {
        None => pix,
        Some(red) => {
            let z: Vec<Vec<f64>> = pix.iter().map(|p| matvec(&red.weight, p)).collect();
            let ch = red.weight.shape()[0];
            let (mean, var): (Vec<f64>, Vec<f64>) = match red.bn.mode {
                BnMode::Eval => (
                    red.bn.running_mean.data().to_vec(),
                    red.bn.running_var.data().to_vec(),
                ),
                BnMode::Train => (0..ch)
                    .map(|q| {
                        let m = z.iter().map(|v| v[q]).sum::<f64>() / n as f64;
                        let var = z.iter().map(|v| (v[q] - m) * (v[q] - m)).sum::<f64>() / n as f64;
                        (m, var)
                    })
                    .unzip(),
            };
            z.iter()
                .map(|v| {
                    (0..ch)
                        .map(|q| {
                            let t = red.bn.gamma.data()[q] * (v[q] - mean[q])
                                / (var[q] + red.bn.eps).sqrt()
                                + red.bn.beta.data()[q];
                            t.max(0.0)
                        })
                        .collect()
                })
                .collect()
        }
    };
    let taps = spec.kernel_size * spec.kernel_size;
    let gg = spec.groups;
    let mut out = vec![0.0; b * gg * taps * hp * wp];
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                let kv = matvec(&spec.span_weight, &hidden[(bi * hp + i) * wp + j]);
                for gi in 0..gg {
                    for t in 0..taps {
                        let r = gi * taps + t;
                        out[(((bi * gg + gi) * taps + t) * hp + i) * wp + j] =
                            kv[r] + spec.span_bias.data()[r];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, gg, taps, hp, wp], out).expect("positive dims")
}

/// `Y[b, k, i, j] = Σ_{(u, v) ∈ Δ_K} H[b, g(k), (u, v), i, j] · X[b, k, i·s + u, j·s + v]`.
pub fn naive_involution_mac(
    x: &Tensor,
    kernel: &Tensor,
    k: usize,
    stride: usize,
    dilation: usize,
) -> Tensor {
    let g = Grid::new(x);
    let b = x.shape()[0];
    let (groups, ho, wo) = (kernel.shape()[1], kernel.shape()[3], kernel.shape()[4]);
    let off = offsets(k, dilation);
    let mut y = vec![0.0; b * g.c * ho * wo];
    for bi in 0..b {
        for ch in 0..g.c {
            // ⌈(k+1)G/C⌉ with 1-based k, i.e. contiguous blocks
            let grp = ch * groups / g.c;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for (a, &u) in off.iter().enumerate() {
                        for (bb, &v) in off.iter().enumerate() {
                            let t = a * k + bb;
                            let hv = kernel.data()
                                [(((bi * groups + grp) * k * k + t) * ho + i) * wo + j];
                            acc += hv
                                * g.get(
                                    bi,
                                    ch,
                                    (i * stride) as isize + u,
                                    (j * stride) as isize + v,
                                );
                        }
                    }
                    y[((bi * g.c + ch) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, g.c, ho, wo], y).expect("positive dims")
}

pub fn naive_involution(x: &Tensor, spec: &InvolutionSpec) -> Tensor {
    let k = naive_kernel_generate(x, spec);
    naive_involution_mac(x, &k, spec.kernel_size, spec.stride, spec.dilation)
}

/// Content-mode attention with per-pixel projections and explicit window sums.
pub fn naive_content_attention(x: &Tensor, spec: &AttentionSpec) -> Tensor {
    let g = Grid::new(x);
    let (b, c, h, w) = (x.shape()[0], g.c, g.h, g.w);
    let project = |m: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for o in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[((bi * c + o) * h + i) * w + j] = (0..c)
                            .map(|q| m.data()[o * c + q] * g.get(bi, q, i as isize, j as isize))
                            .sum();
                    }
                }
            }
        }
        out
    };
    let (q, kk, v) = (project(&spec.wq), project(&spec.wk), project(&spec.wv));
    let at = |t: &[f64], bi: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            t[((bi * c + ch) * h + i as usize) * w + j as usize]
        }
    };
    let dh = c / spec.heads;
    let off = offsets(spec.window, 1);
    let mut y = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for hd in 0..spec.heads {
            for i in 0..h {
                for j in 0..w {
                    let (ii, jj) = (i as isize, j as isize);
                    let mut aff = Vec::with_capacity(off.len() * off.len());
                    for &u in &off {
                        for &vv in &off {
                            aff.push(
                                (0..dh)
                                    .map(|d| {
                                        at(&q, bi, hd * dh + d, ii, jj)
                                            * at(&kk, bi, hd * dh + d, ii + u, jj + vv)
                                    })
                                    .sum::<f64>(),
                            );
                        }
                    }
                    if spec.softmax {
                        let m = aff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = aff.iter().map(|a| (a - m).exp()).sum();
                        aff.iter_mut().for_each(|a| *a = (*a - m).exp() / z);
                    }
                    for d in 0..dh {
                        let ch = hd * dh + d;
                        let mut acc = 0.0;
                        let mut t = 0;
                        for &u in &off {
                            for &vv in &off {
                                acc += aff[t] * at(&v, bi, ch, ii + u, jj + vv);
                                t += 1;
                            }
                        }
                        y[((bi * c + ch) * h + i) * w + j] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], y).expect("positive dims")
}

/// Random operator configuration within the oracle suite's bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleConfig {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub reduction: usize,
}

impl fmt::Display for OracleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "B={} C={} H={} W={} K={} s={} G={} r={}",
            self.batch,
            self.channels,
            self.height,
            self.width,
            self.kernel,
            self.stride,
            self.groups,
            self.reduction
        )
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

impl OracleConfig {
    /// B ≤ 2, C ≤ 8, H, W ≤ 9, K ∈ {1, 3, 5}, s ∈ {1, 2}. Strided cases use
    /// even sizes so pooling is exact.
    pub fn sample(rng: &mut Prng) -> Self {
        let stride = 1 + rng.below(2);
        let kernel = [1, 3, 5][rng.below(3)];
        let channels = 1 + rng.below(8);
        let dim = |rng: &mut Prng| {
            if stride == 2 {
                2 * (1 + rng.below(4))
            } else {
                1 + rng.below(9)
            }
        };
        let (height, width) = (dim(rng), dim(rng));
        let ds = divisors(channels);
        Self {
            batch: 1 + rng.below(2),
            channels,
            height,
            width,
            kernel,
            stride,
            groups: ds[rng.below(ds.len())],
            reduction: ds[rng.below(ds.len())],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub op: &'static str,
    pub config: OracleConfig,
    pub max_abs_err: f64,
    pub pass: bool,
}

impl OracleResult {
    pub const CSV_HEADER: &'static str = "op,config,max_abs_err,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{}",
            self.op, self.config, self.max_abs_err, self.pass
        )
    }
}

fn diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

/// Runs every operator against its oracle on `configs` random cases.
pub fn run_oracle_suite(configs: usize, seed: u64, tol: f64) -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();
    let mut push = |op, config, err: f64| {
        out.push(OracleResult {
            op,
            config,
            max_abs_err: err,
            pass: err <= tol,
        })
    };
    for n in 0..configs {
        let mut rng = Prng::fork(seed, n as u64);
        let cfg = OracleConfig::sample(&mut rng);
        let x = Tensor::randn(
            &[cfg.batch, cfg.channels, cfg.height, cfg.width],
            1.0,
            &mut rng,
        )?;

        let co = cfg.groups * (1 + rng.below(3));
        let conv = ConvSpec::new(
            cfg.channels,
            co,
            cfg.kernel,
            cfg.stride,
            cfg.groups,
            &mut rng,
        )?;
        push(
            "conv2d",
            cfg,
            diff(
                &conv2d(&x, &conv)?,
                &naive_conv2d(&x, &conv.filters, cfg.stride, 1, cfg.groups),
            ),
        );

        let dw = ConvSpec::new(
            cfg.channels,
            cfg.channels,
            cfg.kernel,
            cfg.stride,
            cfg.channels,
            &mut rng,
        )?;
        push(
            "depthwise_conv2d",
            cfg,
            diff(
                &depthwise_conv2d(&x, &dw)?,
                &naive_depthwise(&x, &dw.filters, cfg.stride),
            ),
        );

        let form = if n % 5 == 4 {
            KernelGenForm::Linear
        } else {
            KernelGenForm::Bottleneck
        };
        let mut spec = InvolutionSpec::with_form(
            cfg.channels,
            cfg.kernel,
            cfg.stride,
            1,
            cfg.groups,
            cfg.reduction,
            form,
            &mut rng,
        )?;
        spec.span_bias = Tensor::randn(spec.span_bias.shape(), 1.0, &mut rng)?;
        if let Some(r) = spec.reduce.as_mut() {
            let ch = r.bn.channels();
            r.bn.gamma = Tensor::uniform(&[ch], 0.5, 1.5, &mut rng)?;
            r.bn.beta = Tensor::randn(&[ch], 0.5, &mut rng)?;
            r.bn.running_mean = Tensor::randn(&[ch], 0.5, &mut rng)?;
            r.bn.running_var = Tensor::uniform(&[ch], 0.5, 2.0, &mut rng)?;
            if n % 2 == 1 {
                r.bn.mode = BnMode::Eval;
            }
        }
        let kernels = kernel_generate(&x, &spec)?;
        push(
            "kernel_generate",
            cfg,
            diff(&kernels, &naive_kernel_generate(&x, &spec)),
        );
        let reference = naive_involution_mac(&x, &kernels, cfg.kernel, cfg.stride, 1);
        push(
            "involution_mac",
            cfg,
            diff(&involution_mac(&x, &kernels, spec.window())?, &reference),
        );
        push(
            "involution_mac_unfolded",
            cfg,
            diff(
                &involution_mac_unfolded(&x, &kernels, spec.window())?,
                &reference,
            ),
        );
        push(
            "involution",
            cfg,
            diff(&involution(&x, &spec)?, &naive_involution(&x, &spec)),
        );

        let heads = divisors(cfg.channels)[rng.below(divisors(cfg.channels).len())];
        let mut att = AttentionSpec::new(cfg.channels, cfg.kernel, heads, &mut rng)?;
        att.softmax = n % 3 == 2;
        push(
            "local_self_attention",
            cfg,
            diff(
                &local_self_attention(&x, &att, AttentionMode::Content)?,
                &naive_content_attention(&x, &att),
            ),
        );
    }
    Ok(out)
}

/// Max |attention − involution_mac(V, affinity)| for one random case; the
/// two paths share every floating-point operation, so this is exactly zero.
pub fn unification_gap(seed: u64, mode: AttentionMode, softmax: bool) -> Result<f64> {
    let mut rng = Prng::new(seed);
    let (c, heads, k) = (8, 2, 3);
    let x = Tensor::randn(&[2, c, 7, 6], 1.0, &mut rng)?;
    let mut spec = AttentionSpec::new(c, k, heads, &mut rng)?;
    spec.softmax = softmax;
    let y = local_self_attention(&x, &spec, mode)?;
    let v = crate::nnops::linear_1x1(&x, &spec.wv, None)?;
    let a = spec.affinity(&x, mode)?;
    let z = involution_mac(&v, &a, Window::same(k, 1, 1)?)?;
    y.max_abs_diff(&z)
}
