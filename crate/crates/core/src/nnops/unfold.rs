use crate::error::{mismatch, Error, Result};
use crate::tensor::Tensor;

/// Sliding-window geometry shared by unfold, convolution and involution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Window {
    /// Odd kernel with `⌊K/2⌋·dilation` padding.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Config("stride and dilation must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride,
            dilation,
            padding: same_padding(kernel, dilation),
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_size(h, self.kernel, self.stride, self.dilation, self.padding)?,
            out_size(w, self.kernel, self.stride, self.dilation, self.padding)?,
        ))
    }

    /// Input coordinate touched by output coordinate `o` at kernel tap `t`,
    /// or `None` if it falls in the zero padding.
    #[inline]
    pub(crate) fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    kernel / 2 * dilation
}

/// `⌊(n + 2p − d(K−1) − 1)/s⌋ + 1`.
pub fn out_size(
    n: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<usize> {
    let span = dilation * (kernel - 1) + 1;
    if n + 2 * padding < span {
        return Err(mismatch(
            "window",
            format!("input {n} too small for span {span}"),
        ));
    }
    Ok((n + 2 * padding - span) / stride + 1)
}

/// im2col: `(B, C, H, W)` to `(B, C·K·K, L)`. Row `c·K² + ki·K + kj` of
/// column `ℓ = oy·W_out + ox` holds the (zero-padded) input at tap `(ki, kj)`
/// of the window anchored at output position `(oy, ox)`.
pub fn unfold(x: &Tensor, win: Window) -> Result<Tensor> {
    if win.kernel % 2 == 0 {
        return Err(Error::EvenKernel(win.kernel));
    }
    let (b, c, h, w) = x.dims4("unfold")?;
    let (ho, wo) = win.out_hw(h, w)?;
    let (k, l) = (win.kernel, ho * wo);
    let rows = c * k * k;
    let xd = x.data();
    let mut out = vec![0.0; b * rows * l];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * h * w..][..h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    let dst = &mut out[(bi * rows + row) * l..][..l];
                    for oy in 0..ho {
                        let Some(iy) = win.source(oy, ki, h) else {
                            continue;
                        };
                        for ox in 0..wo {
                            if let Some(ix) = win.source(ox, kj, w) {
                                dst[oy * wo + ox] = plane[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, rows, l], out))
}

/// Adjoint of [`unfold`]: scatters columns back onto a `(B, C, H, W)` map,
/// summing overlapping contributions.
pub fn fold(cols: &Tensor, channels: usize, h: usize, w: usize, win: Window) -> Result<Tensor> {
    let k = win.kernel;
    let (ho, wo) = win.out_hw(h, w)?;
    let l = ho * wo;
    let rows = channels * k * k;
    let b = match *cols.shape() {
        [b, r, ll] if r == rows && ll == l => b,
        _ => {
            return Err(mismatch(
                "fold",
                format!("columns {:?} do not match ({rows}, {l})", cols.shape()),
            ))
        }
    };
    let cd = cols.data();
    let mut out = vec![0.0; b * channels * h * w];
    for bi in 0..b {
        for ci in 0..channels {
            let plane = &mut out[(bi * channels + ci) * h * w..][..h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    let src = &cd[(bi * rows + row) * l..][..l];
                    for oy in 0..ho {
                        let Some(iy) = win.source(oy, ki, h) else {
                            continue;
                        };
                        for ox in 0..wo {
                            if let Some(ix) = win.source(ox, kj, w) {
                                plane[iy * w + ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, channels, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn three_by_three_center_column() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64).unwrap();
        let u = unfold(&x, Window::same(3, 1, 1).unwrap()).unwrap();
        assert_eq!(u.shape(), &[1, 9, 9]);
        let center: Vec<f64> = (0..9).map(|r| u.at(&[0, r, 4])).collect();
        assert_eq!(center, (0..9).map(f64::from).collect::<Vec<_>>());
        // corner window (0,0): top-left taps fall in the padding
        assert_eq!(u.at(&[0, 0, 0]), 0.0);
        assert_eq!(u.at(&[0, 4, 0]), 0.0);
        assert_eq!(u.at(&[0, 8, 0]), 4.0);
    }

    #[test]
    fn one_by_one_is_reshape() {
        let mut rng = Prng::new(2);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng).unwrap();
        let u = unfold(&x, Window::same(1, 1, 1).unwrap()).unwrap();
        assert_eq!(u, x.reshape(&[2, 3, 20]).unwrap());
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(matches!(Window::same(2, 1, 1), Err(Error::EvenKernel(2))));
        let win = Window {
            kernel: 2,
            stride: 1,
            dilation: 1,
            padding: 0,
        };
        assert!(unfold(&x, win).is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(out_size(8, 3, 2, 1, 1).unwrap(), 4);
        assert_eq!(out_size(7, 5, 1, 2, 4).unwrap(), 7);
        assert_eq!(out_size(224, 7, 2, 1, 3).unwrap(), 112);
    }

    #[test]
    fn coverage_counts() {
        // Each element appears once per window covering it; with a ones
        // input, folding the unfolded tensor yields the coverage count.
        let mut rng = Prng::new(5);
        for &(k, s, d) in &[(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 2, 1)] {
            let (h, w) = (7, 6);
            let win = Window::same(k, s, d).unwrap();
            let x = Tensor::randn(&[1, 2, h, w], 1.0, &mut rng).unwrap();
            let cols = unfold(&x, win).unwrap();
            let ones = Tensor::ones(cols.shape()).unwrap();
            let cover = fold(&ones, 2, h, w, win).unwrap();
            let (ho, wo) = win.out_hw(h, w).unwrap();
            for y in 0..h {
                for xx in 0..w {
                    let mut brute = 0.0;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki * d) as isize - win.padding as isize;
                                    let ix = (ox * s + kj * d) as isize - win.padding as isize;
                                    if iy == y as isize && ix == xx as isize {
                                        brute += 1.0;
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(cover.at(&[0, 1, y, xx]), brute);
                }
            }
            // Checksum: Σ cols = Σ_x x · coverage(x)
            let weighted: f64 = x.mul(&fold(&ones, 2, h, w, win).unwrap()).unwrap().sum();
            assert!((cols.sum() - weighted).abs() < 1e-10);
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let mut rng = Prng::new(6);
        let win = Window::same(3, 2, 1).unwrap();
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng).unwrap();
        let cols = unfold(&x, win).unwrap();
        let y = Tensor::randn(cols.shape(), 1.0, &mut rng).unwrap();
        let lhs = cols.mul(&y).unwrap().sum();
        let rhs = x.mul(&fold(&y, 3, 6, 6, win).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
