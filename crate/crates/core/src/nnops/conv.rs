use crate::error::{mismatch, Error, Result};
use crate::nnops::unfold::{fold, unfold, Window};
use crate::prng::Prng;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Standard (optionally grouped) convolution with zero "same" padding.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    /// `(C_o, C_i / groups, K, K)`
    pub filters: Tensor,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let fan_in = in_channels / groups.max(1) * kernel * kernel;
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let filters = Tensor::randn(
            &[out_channels, in_channels / groups.max(1), kernel, kernel],
            std,
            rng,
        )?;
        Self::from_filters(filters, in_channels, stride, 1, groups)
    }

    pub fn from_filters(
        filters: Tensor,
        in_channels: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let [co, cig, k, k2] = *filters.shape() else {
            return Err(mismatch(
                "ConvSpec",
                format!("filters must be 4-D, got {:?}", filters.shape()),
            ));
        };
        if groups == 0 || in_channels % groups != 0 || co % groups != 0 {
            return Err(Error::Config(format!(
                "channels {in_channels}->{co} not divisible by {groups} groups"
            )));
        }
        if cig != in_channels / groups || k != k2 {
            return Err(mismatch(
                "ConvSpec",
                format!(
                    "filters {:?} for {in_channels} inputs / {groups} groups",
                    filters.shape()
                ),
            ));
        }
        Window::same(k, stride, dilation)?;
        Ok(Self {
            in_channels,
            out_channels: co,
            kernel: k,
            stride,
            dilation,
            groups,
            filters,
        })
    }

    pub fn window(&self) -> Window {
        Window::same(self.kernel, self.stride, self.dilation).expect("validated at construction")
    }
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_raw(x, &spec.filters, spec.window(), spec.groups)
}

/// Per-channel filtering: one `K×K` kernel per channel, `C_o == C_i`.
pub fn depthwise_conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.out_channels != spec.in_channels || spec.groups != spec.in_channels {
        return Err(Error::Config(format!(
            "depthwise convolution needs C_o == C_i == groups, got {} -> {} in {} groups",
            spec.in_channels, spec.out_channels, spec.groups
        )));
    }
    conv2d(x, spec)
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    groups: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, wd) = x.dims4("conv2d")?;
    let [co, cig, k, _] = *w.shape() else {
        return Err(mismatch(
            "conv2d",
            format!("filters must be 4-D, got {:?}", w.shape()),
        ));
    };
    if groups == 0 || c % groups != 0 || co % groups != 0 || cig * groups != c {
        return Err(mismatch(
            "conv2d",
            format!(
                "input has {c} channels, filters {:?}, groups {groups}",
                w.shape()
            ),
        ));
    }
    Ok((b, c, h, wd, co, k))
}

/// im2col convolution: unfold once, then one matrix product per group.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, win: Window, groups: usize) -> Result<Tensor> {
    let (b, c, h, wd, co, k) = conv_dims(x, w, groups)?;
    if k != win.kernel {
        return Err(mismatch("conv2d", "filter size differs from window"));
    }
    let (ho, wo) = win.out_hw(h, wd)?;
    let l = ho * wo;
    let cols = unfold(x, win)?;
    let rows_g = c / groups * k * k;
    let co_g = co / groups;
    let (cd, wdat) = (cols.data(), w.data());
    let mut out = vec![0.0; b * co * l];
    for bi in 0..b {
        for g in 0..groups {
            let a = &wdat[g * co_g * rows_g..][..co_g * rows_g];
            let bm = &cd[(bi * c * k * k + g * rows_g) * l..][..rows_g * l];
            let o = &mut out[(bi * co + g * co_g) * l..][..co_g * l];
            gemm(a, bm, o, co_g, rows_g, l);
        }
    }
    Ok(Tensor::from_parts(vec![b, co, ho, wo], out))
}

/// Returns `(dx, dw)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    win: Window,
    groups: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, wd, co, k) = conv_dims(x, w, groups)?;
    let (ho, wo) = win.out_hw(h, wd)?;
    if dy.shape() != [b, co, ho, wo] {
        return Err(mismatch("conv2d_backward", format!("dy {:?}", dy.shape())));
    }
    let l = ho * wo;
    let cols = unfold(x, win)?;
    let rows_g = c / groups * k * k;
    let co_g = co / groups;
    let (cd, wdat, dd) = (cols.data(), w.data(), dy.data());
    let mut dw = vec![0.0; w.len()];
    let mut dcols = vec![0.0; cols.len()];
    for bi in 0..b {
        for g in 0..groups {
            let dyg = &dd[(bi * co + g * co_g) * l..][..co_g * l];
            let colg = &cd[(bi * c * k * k + g * rows_g) * l..][..rows_g * l];
            gemm_nt(
                dyg,
                colg,
                &mut dw[g * co_g * rows_g..][..co_g * rows_g],
                co_g,
                l,
                rows_g,
            );
            let wg = &wdat[g * co_g * rows_g..][..co_g * rows_g];
            gemm_tn(
                wg,
                dyg,
                &mut dcols[(bi * c * k * k + g * rows_g) * l..][..rows_g * l],
                rows_g,
                co_g,
                l,
            );
        }
    }
    let dcols = Tensor::from_parts(cols.shape().to_vec(), dcols);
    let dx = fold(&dcols, c, h, wd, win)?;
    Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_filters(c: usize, k: usize, depthwise: bool) -> Tensor {
        let cig = if depthwise { 1 } else { c };
        Tensor::from_fn(&[c, cig, k, k], |i| {
            let tap = i % (k * k);
            let ci = (i / (k * k)) % cig;
            let co = i / (k * k * cig);
            let on = if depthwise { true } else { ci == co };
            if on && tap == k * k / 2 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn identity_filters() {
        let mut rng = Prng::new(1);
        let x = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng).unwrap();
        for k in [1, 3] {
            let spec = ConvSpec::from_filters(delta_filters(3, k, false), 3, 1, 1, 1).unwrap();
            assert_eq!(conv2d(&x, &spec).unwrap(), x);
        }
        let dw = ConvSpec::from_filters(delta_filters(3, 3, true), 3, 1, 1, 3).unwrap();
        assert_eq!(depthwise_conv2d(&x, &dw).unwrap(), x);
    }

    #[test]
    fn depthwise_channels_independent() {
        let mut rng = Prng::new(4);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng).unwrap();
        let mut f = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng).unwrap();
        f.data_mut()[..9].iter_mut().for_each(|v| *v = 0.0);
        let spec = ConvSpec::from_filters(f.clone(), 2, 1, 1, 2).unwrap();
        let y = depthwise_conv2d(&x, &spec).unwrap();
        assert!(y.data()[..25].iter().all(|&v| v == 0.0));
        // channel 1 alone gives the same result
        let x1 = Tensor::new(&[1, 1, 5, 5], x.data()[25..].to_vec()).unwrap();
        let f1 = Tensor::new(&[1, 1, 3, 3], f.data()[9..].to_vec()).unwrap();
        let y1 = conv2d(&x1, &ConvSpec::from_filters(f1, 1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(&y.data()[25..], y1.data());
    }

    #[test]
    fn depthwise_rejects_channel_change() {
        let mut rng = Prng::new(4);
        let spec = ConvSpec::new(2, 4, 3, 1, 2, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 2, 3, 3]).unwrap();
        assert!(depthwise_conv2d(&x, &spec).is_err());
    }

    #[test]
    fn divisibility_checked() {
        let mut rng = Prng::new(4);
        assert!(ConvSpec::new(3, 4, 3, 1, 2, &mut rng).is_err());
        assert!(ConvSpec::new(4, 4, 2, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn strided_shape() {
        let mut rng = Prng::new(4);
        let spec = ConvSpec::new(3, 8, 7, 2, 1, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]).unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap().shape(), &[1, 8, 16, 16]);
    }
}
