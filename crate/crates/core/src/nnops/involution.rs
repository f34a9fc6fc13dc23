use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::nnops::activation::{linear_1x1, relu};
use crate::nnops::norm::{batch_norm_apply, BatchNormState};
use crate::nnops::pool::avg_pool2d;
use crate::nnops::unfold::{unfold, Window};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Shape of the kernel-generation function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelGenForm {
    /// `W1 · relu(BN(W0 · x)) + b`
    Bottleneck,
    /// `W · x + b`, a single projection with no nonlinearity.
    Linear,
}

/// The reduce half of the bottleneck generator.
#[derive(Clone, Debug)]
pub struct ReduceStage {
    /// `(C/r, C)`, no bias (batch norm follows).
    pub weight: Tensor,
    pub bn: BatchNormState,
}

#[derive(Clone, Debug)]
pub struct InvolutionSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub reduction: usize,
    /// Present for [`KernelGenForm::Bottleneck`].
    pub reduce: Option<ReduceStage>,
    /// `(K·K·G, C/r)`, or `(K·K·G, C)` for the linear form.
    pub span_weight: Tensor,
    /// `(K·K·G)`
    pub span_bias: Tensor,
}

impl InvolutionSpec {
    pub fn new(
        channels: usize,
        kernel_size: usize,
        stride: usize,
        groups: usize,
        reduction: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        Self::with_form(
            channels,
            kernel_size,
            stride,
            1,
            groups,
            reduction,
            KernelGenForm::Bottleneck,
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_form(
        channels: usize,
        kernel_size: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        reduction: usize,
        form: KernelGenForm,
        rng: &mut Prng,
    ) -> Result<Self> {
        validate(channels, kernel_size, groups, reduction)?;
        Window::same(kernel_size, stride, dilation)?;
        let hidden = channels / reduction;
        let span_out = kernel_size * kernel_size * groups;
        let (reduce, span_in) = match form {
            KernelGenForm::Bottleneck => (
                Some(ReduceStage {
                    weight: Tensor::randn(
                        &[hidden, channels],
                        (2.0 / channels as f64).sqrt(),
                        rng,
                    )?,
                    bn: BatchNormState::new(hidden)?,
                }),
                hidden,
            ),
            KernelGenForm::Linear => (None, channels),
        };
        Ok(Self {
            channels,
            kernel_size,
            stride,
            dilation,
            groups,
            reduction,
            reduce,
            span_weight: Tensor::randn(&[span_out, span_in], (1.0 / span_in as f64).sqrt(), rng)?,
            span_bias: Tensor::zeros(&[span_out])?,
        })
    }

    pub fn form(&self) -> KernelGenForm {
        if self.reduce.is_some() {
            KernelGenForm::Bottleneck
        } else {
            KernelGenForm::Linear
        }
    }

    pub fn window(&self) -> Window {
        Window::same(self.kernel_size, self.stride, self.dilation)
            .expect("validated at construction")
    }

    /// Number of values generated per output position, `K·K·G`.
    pub fn kernel_values(&self) -> usize {
        self.kernel_size * self.kernel_size * self.groups
    }

    /// Parameter count: reduce projection, its batch-norm affine pair, span
    /// projection and span bias.
    pub fn param_count(&self) -> usize {
        let reduce = self
            .reduce
            .as_ref()
            .map_or(0, |r| r.weight.len() + r.bn.gamma.len() + r.bn.beta.len());
        reduce + self.span_weight.len() + self.span_bias.len()
    }
}

pub(crate) fn validate(
    channels: usize,
    kernel: usize,
    groups: usize,
    reduction: usize,
) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::EvenKernel(kernel));
    }
    if groups == 0 || reduction == 0 || channels % groups != 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "involution channels {channels} must be divisible by groups {groups} and reduction {reduction}"
        )));
    }
    Ok(())
}

/// Generates one `K×K` kernel per group and output position from the pixel
/// at that position: `(B, C, H, W)` to `(B, G, K·K, H_out, W_out)`. With
/// stride `s > 1` the input is average-pooled by `s` first.
pub fn kernel_generate(x: &Tensor, spec: &InvolutionSpec) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4("kernel_generate")?;
    if c != spec.channels {
        return Err(mismatch(
            "kernel_generate",
            format!("{c} channels, spec has {}", spec.channels),
        ));
    }
    let pooled = avg_pool2d(x, spec.stride)?;
    let hidden = match &spec.reduce {
        Some(r) => relu(&batch_norm_apply(
            &linear_1x1(&pooled, &r.weight, None)?,
            &r.bn,
        )?),
        None => pooled,
    };
    let k = linear_1x1(&hidden, &spec.span_weight, Some(&spec.span_bias))?;
    let (_, _, ho, wo) = k.dims4("kernel_generate")?;
    k.reshape(&[b, spec.groups, spec.kernel_size * spec.kernel_size, ho, wo])
}

fn mac_dims(
    x: &Tensor,
    kernel: &Tensor,
    win: Window,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("involution_mac")?;
    let (ho, wo) = win.out_hw(h, w)?;
    let kk = win.kernel * win.kernel;
    match *kernel.shape() {
        [kb, g, taps, kh, kw]
            if kb == b && taps == kk && kh == ho && kw == wo && g > 0 && c % g == 0 =>
        {
            Ok((b, c, h, w, g, ho, wo))
        }
        _ => Err(mismatch(
            "involution_mac",
            format!(
                "kernel {:?} does not match input {:?} (expected (B, G, {kk}, {ho}, {wo}))",
                kernel.shape(),
                x.shape()
            ),
        )),
    }
}

/// Multiply-add of each channel's neighbourhood with the kernel of its group
/// at every output position. Channels are assigned to groups in contiguous
/// blocks of `C/G`.
pub fn involution_mac(x: &Tensor, kernel: &Tensor, win: Window) -> Result<Tensor> {
    if win.kernel % 2 == 0 {
        return Err(Error::EvenKernel(win.kernel));
    }
    let (b, c, h, w, g, ho, wo) = mac_dims(x, kernel, win)?;
    let (k, l, cg) = (win.kernel, ho * wo, c / g);
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let plane = &xd[(bi * c + ci) * h * w..][..h * w];
            let dst = &mut out[(bi * c + ci) * l..][..l];
            for ki in 0..k {
                for kj in 0..k {
                    let taps = &kd[((bi * g + gi) * k * k + ki * k + kj) * l..][..l];
                    for oy in 0..ho {
                        let Some(iy) = win.source(oy, ki, h) else {
                            continue;
                        };
                        let row = &plane[iy * w..][..w];
                        for ox in 0..wo {
                            if let Some(ix) = win.source(ox, kj, w) {
                                dst[oy * wo + ox] += taps[oy * wo + ox] * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

/// Returns `(dx, dkernel)`.
pub fn involution_mac_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    win: Window,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w, g, ho, wo) = mac_dims(x, kernel, win)?;
    if dy.shape() != [b, c, ho, wo] {
        return Err(mismatch(
            "involution_mac_backward",
            format!("dy {:?}", dy.shape()),
        ));
    }
    let (k, l, cg) = (win.kernel, ho * wo, c / g);
    let (xd, kd, dd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let pbase = (bi * c + ci) * h * w;
            let grad = &dd[(bi * c + ci) * l..][..l];
            for ki in 0..k {
                for kj in 0..k {
                    let tbase = ((bi * g + gi) * k * k + ki * k + kj) * l;
                    for oy in 0..ho {
                        let Some(iy) = win.source(oy, ki, h) else {
                            continue;
                        };
                        for ox in 0..wo {
                            if let Some(ix) = win.source(ox, kj, w) {
                                let o = oy * wo + ox;
                                let p = pbase + iy * w + ix;
                                dx[p] += kd[tbase + o] * grad[o];
                                dk[tbase + o] += xd[p] * grad[o];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// The same multiply-add written as unfold, broadcast multiply across the
/// channels of each group, and a sum over the `K·K` taps.
pub fn involution_mac_unfolded(x: &Tensor, kernel: &Tensor, win: Window) -> Result<Tensor> {
    let (b, c, _, _, g, ho, wo) = mac_dims(x, kernel, win)?;
    let (kk, l) = (win.kernel * win.kernel, ho * wo);
    let cols = unfold(x, win)?.reshape(&[b, g, c / g, kk, l])?;
    let k = kernel.reshape(&[b, g, 1, kk, l])?;
    cols.mul_broadcast(&k, 2)?
        .reduce_sum(&[3])?
        .reshape(&[b, c, ho, wo])
}

/// Kernel generation followed by the multiply-add.
pub fn involution(x: &Tensor, spec: &InvolutionSpec) -> Result<Tensor> {
    let kernel = kernel_generate(x, spec)?;
    involution_mac(x, &kernel, spec.window())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_one_hot(b: usize, g: usize, k: usize, h: usize, w: usize) -> Tensor {
        let kk = k * k;
        Tensor::from_fn(&[b, g, kk, h, w], |i| {
            if (i / (h * w)) % kk == kk / 2 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Prng::new(1);
        let x = Tensor::randn(&[2, 6, 5, 4], 1.0, &mut rng).unwrap();
        for (k, g) in [(3, 2), (5, 3), (1, 6)] {
            let kern = center_one_hot(2, g, k, 5, 4);
            let y = involution_mac(&x, &kern, Window::same(k, 1, 1).unwrap()).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn box_filter_kernel() {
        let mut rng = Prng::new(2);
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng).unwrap();
        let kern = Tensor::full(&[1, 1, 9, 4, 4], 1.0 / 9.0).unwrap();
        let y = involution_mac(&x, &kern, Window::same(3, 1, 1).unwrap()).unwrap();
        let p = x.pad_zero(1).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for u in 0..3 {
                        for v in 0..3 {
                            s += p.at(&[0, c, i + u, j + v]);
                        }
                    }
                    assert!((y.at(&[0, c, i, j]) - s / 9.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unfolded_route_agrees() {
        let mut rng = Prng::new(3);
        for (k, s, d) in [(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 1, 1)] {
            let win = Window::same(k, s, d).unwrap();
            let x = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng).unwrap();
            let (ho, wo) = win.out_hw(6, 6).unwrap();
            let kern = Tensor::randn(&[2, 2, k * k, ho, wo], 1.0, &mut rng).unwrap();
            let a = involution_mac(&x, &kern, win).unwrap();
            let b = involution_mac_unfolded(&x, &kern, win).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_span_gives_zero_kernels() {
        let mut rng = Prng::new(4);
        let mut spec = InvolutionSpec::new(8, 3, 1, 2, 2, &mut rng).unwrap();
        spec.span_weight = Tensor::zeros(spec.span_weight.shape()).unwrap();
        let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng).unwrap();
        let k = kernel_generate(&x, &spec).unwrap();
        assert_eq!(k.shape(), &[2, 2, 9, 5, 5]);
        assert!(k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn values_per_position() {
        let mut rng = Prng::new(4);
        let spec = InvolutionSpec::new(16, 3, 1, 2, 4, &mut rng).unwrap();
        assert_eq!(spec.kernel_values(), 18);
        let x = Tensor::randn(&[1, 16, 3, 3], 1.0, &mut rng).unwrap();
        let k = kernel_generate(&x, &spec).unwrap();
        assert_eq!(k.len() / 9, 18);
    }

    #[test]
    fn strided_shapes() {
        let mut rng = Prng::new(5);
        let spec = InvolutionSpec::new(8, 3, 2, 2, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng).unwrap();
        let k = kernel_generate(&x, &spec).unwrap();
        assert_eq!(k.shape(), &[1, 2, 9, 4, 4]);
        let y = involution(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 8, 4, 4]);
        assert_eq!(y, involution_mac(&x, &k, spec.window()).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let mut rng = Prng::new(5);
        assert!(InvolutionSpec::new(8, 4, 1, 2, 2, &mut rng).is_err());
        assert!(InvolutionSpec::new(8, 3, 1, 3, 2, &mut rng).is_err());
        assert!(InvolutionSpec::new(8, 3, 1, 2, 3, &mut rng).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let mut rng = Prng::new(6);
        let spec = InvolutionSpec::new(256, 7, 1, 16, 4, &mut rng).unwrap();
        assert_eq!(spec.param_count(), 16384 + 50176 + 784 + 128);
        assert_eq!(spec.param_count(), 67_472);
    }
}
