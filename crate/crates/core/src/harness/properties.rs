//! Structural properties of the involution operator, each checked over many
//! seeded random cases.

use crate::error::Result;
use crate::nnops::{
    involution, involution_mac, involution_mac_unfolded, kernel_generate, BnMode, InvolutionSpec,
    Window,
};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest deviation seen (for specificity: smallest separation).
    pub worst: f64,
}

impl PropertyReport {
    pub fn pass(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }
}

fn divisor(n: usize, rng: &mut Prng) -> usize {
    let ds: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
    ds[rng.below(ds.len())]
}

/// Eval-mode spec with non-trivial statistics and span bias, so generation
/// is a fixed per-pixel function.
fn frozen_spec(c: usize, k: usize, g: usize, r: usize, rng: &mut Prng) -> Result<InvolutionSpec> {
    let mut spec = InvolutionSpec::new(c, k, 1, g, r, rng)?;
    spec.span_bias = Tensor::randn(spec.span_bias.shape(), 0.5, rng)?;
    if let Some(red) = spec.reduce.as_mut() {
        let h = red.bn.channels();
        red.bn.gamma = Tensor::uniform(&[h], 0.5, 1.5, rng)?;
        red.bn.beta = Tensor::uniform(&[h], 0.5, 1.0, rng)?;
        red.bn.running_mean = Tensor::randn(&[h], 0.2, rng)?;
        red.bn.running_var = Tensor::uniform(&[h], 0.5, 2.0, rng)?;
        red.bn.mode = BnMode::Eval;
    }
    Ok(spec)
}

/// Centre one-hot kernels reproduce the input for any batch, channel, group
/// and spatial size, through both multiply-add paths.
pub fn delta_identity(cases: usize, seed: u64) -> Result<PropertyReport> {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for n in 0..cases {
        let mut rng = Prng::fork(seed, n as u64);
        let (b, c) = (1 + rng.below(2), 1 + rng.below(8));
        let g = divisor(c, &mut rng);
        let (h, w) = (1 + rng.below(9), 1 + rng.below(9));
        let k = [1, 3, 5, 7][rng.below(4)];
        let d = 1 + rng.below(2);
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut rng)?;
        let taps = k * k;
        let centre = taps / 2;
        let kernel = Tensor::from_fn(&[b, g, taps, h, w], |i| {
            ((i / (h * w)) % taps == centre) as u8 as f64
        })?;
        let win = Window::same(k, 1, d)?;
        let e = involution_mac(&x, &kernel, win)?
            .max_abs_diff(&x)?
            .max(involution_mac_unfolded(&x, &kernel, win)?.max_abs_diff(&x)?);
        worst = worst.max(e);
        failures += (e != 0.0) as usize;
    }
    Ok(PropertyReport {
        name: "delta_identity",
        cases,
        failures,
        worst,
    })
}

fn permute_channels(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("permute_channels")?;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for (dst, &src) in perm.iter().enumerate() {
            out[(bi * c + dst) * plane..][..plane]
                .copy_from_slice(&x.data()[(bi * c + src) * plane..][..plane]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// With the kernel held fixed, shuffling channels inside their groups
/// shuffles the output channels the same way.
pub fn channel_permutation(cases: usize, seed: u64) -> Result<PropertyReport> {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for n in 0..cases {
        let mut rng = Prng::fork(seed, n as u64);
        let (b, c) = (1 + rng.below(2), 2 + rng.below(7));
        let g = divisor(c, &mut rng);
        let (h, w) = (2 + rng.below(8), 2 + rng.below(8));
        let k = [1, 3, 5][rng.below(3)];
        let s = 1 + rng.below(2);
        let win = Window::same(k, s, 1)?;
        let (ho, wo) = win.out_hw(h, w)?;
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut rng)?;
        let kernel = Tensor::randn(&[b, g, k * k, ho, wo], 1.0, &mut rng)?;
        let cg = c / g;
        let mut perm: Vec<usize> = (0..c).collect();
        for block in perm.chunks_mut(cg) {
            rng.shuffle(block);
        }
        let y = involution_mac(&x, &kernel, win)?;
        let yp = involution_mac(&permute_channels(&x, &perm)?, &kernel, win)?;
        let e = yp.max_abs_diff(&permute_channels(&y, &perm)?)?;
        worst = worst.max(e);
        failures += (e != 0.0) as usize;
    }
    Ok(PropertyReport {
        name: "channel_permutation",
        cases,
        failures,
        worst,
    })
}

/// Shifting the input shifts a stride-1 involution's output, on the region
/// whose windows never touch padding or the freshly exposed border.
pub fn translation_equivariance(cases: usize, seed: u64) -> Result<PropertyReport> {
    let mut failures = 0;
    let mut worst = 0.0f64;
    for n in 0..cases {
        let mut rng = Prng::fork(seed, n as u64);
        let c = 1 + rng.below(8);
        let (g, r) = (divisor(c, &mut rng), divisor(c, &mut rng));
        let k = [1, 3, 5][rng.below(3)];
        let p = k / 2;
        let (di, dj) = loop {
            let d = (rng.below(3), rng.below(3));
            if d != (0, 0) {
                break d;
            }
        };
        let h = 2 * p + di + 1 + rng.below(4);
        let w = 2 * p + dj + 1 + rng.below(4);
        let b = 1 + rng.below(2);
        let spec = frozen_spec(c, k, g, r, &mut rng)?;
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut rng)?;
        let mut shifted = Tensor::randn(&[b, c, h, w], 1.0, &mut rng)?.into_data();
        for bc in 0..b * c {
            for i in 0..h - di {
                for j in 0..w - dj {
                    shifted[(bc * h + i + di) * w + j + dj] = x.data()[(bc * h + i) * w + j];
                }
            }
        }
        let xs = Tensor::new(&[b, c, h, w], shifted)?;
        let (y, ys) = (involution(&x, &spec)?, involution(&xs, &spec)?);
        let mut e = 0.0f64;
        for bc in 0..b * c {
            for i in p..h - p - di {
                for j in p..w - p - dj {
                    let a = y.data()[(bc * h + i) * w + j];
                    let z = ys.data()[(bc * h + i + di) * w + j + dj];
                    e = e.max((a - z).abs());
                }
            }
        }
        worst = worst.max(e);
        failures += (e > 1e-12) as usize;
    }
    Ok(PropertyReport {
        name: "translation_equivariance",
        cases,
        failures,
        worst,
    })
}

/// Generated kernels at two distinct positions of a random input differ.
pub fn spatial_specificity(cases: usize, seed: u64) -> Result<PropertyReport> {
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    for n in 0..cases {
        let mut rng = Prng::fork(seed, n as u64);
        let r = [1, 2][rng.below(2)];
        let c = 4 * (1 + rng.below(2));
        let g = divisor(c, &mut rng);
        let k = [3, 5, 7][rng.below(3)];
        let (h, w) = (3 + rng.below(7), 3 + rng.below(7));
        let spec = frozen_spec(c, k, g, r, &mut rng)?;
        let x = Tensor::randn(&[1, c, h, w], 1.0, &mut rng)?;
        let kern = kernel_generate(&x, &spec)?;
        let a = rng.below(h * w);
        let b = (a + 1 + rng.below(h * w - 1)) % (h * w);
        let sep = (0..g * k * k)
            .map(|t| (kern.data()[t * h * w + a] - kern.data()[t * h * w + b]).abs())
            .fold(0.0, f64::max);
        worst = worst.min(sep);
        failures += (sep <= 1e-9) as usize;
    }
    Ok(PropertyReport {
        name: "spatial_specificity",
        cases,
        failures,
        worst,
    })
}

pub fn run_property_suite(cases: usize, seed: u64) -> Result<Vec<PropertyReport>> {
    Ok(vec![
        delta_identity(cases, seed)?,
        channel_permutation(cases, seed)?,
        translation_equivariance(cases, seed)?,
        spatial_specificity(cases, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_properties_hold() {
        for r in run_property_suite(30, 17).unwrap() {
            assert!(r.pass(), "{r:?}");
        }
    }

    #[test]
    fn a_broken_shift_is_detected() {
        // zero-padded box filtering is not the identity, so a delta check on
        // it must fail
        let x = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let k = Tensor::full(&[1, 1, 9, 3, 3], 1.0 / 9.0).unwrap();
        let y = involution_mac(&x, &k, Window::same(3, 1, 1).unwrap()).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() > 0.1);
    }
}
