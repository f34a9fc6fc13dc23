use crate::error::{mismatch, Result};
use crate::nnops::unfold::Window;
use crate::tensor::Tensor;

/// Non-overlapping `s×s` mean. `s = 1` is the identity.
pub fn avg_pool2d(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("avg_pool2d")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(mismatch(
            "avg_pool2d",
            format!("{h}x{w} is not divisible by stride {s}"),
        ));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / s, w / s);
    let xd = x.data();
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; b * c * ho * wo];
    for p in 0..b * c {
        let plane = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / s) * wo + xx / s] += plane[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub fn avg_pool2d_backward(dy: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, ho, wo) = dy.dims4("avg_pool2d_backward")?;
    if s == 1 {
        return Ok(dy.clone());
    }
    let (h, w) = (ho * s, wo * s);
    let inv = 1.0 / (s * s) as f64;
    let dd = dy.data();
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[(p * h + y) * w + xx] = dd[(p * ho + y / s) * wo + xx / s] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

fn max_pool_argmax(x: &Tensor, win: Window) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("max_pool2d")?;
    let (ho, wo) = win.out_hw(h, w)?;
    let xd = x.data();
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<usize> = None;
                for ki in 0..win.kernel {
                    let Some(iy) = win.source(oy, ki, h) else {
                        continue;
                    };
                    for kj in 0..win.kernel {
                        let Some(ix) = win.source(ox, kj, w) else {
                            continue;
                        };
                        let idx = (p * h + iy) * w + ix;
                        if best.is_none_or(|bi| xd[idx] > xd[bi]) {
                            best = Some(idx);
                        }
                    }
                }
                arg.push(best.expect("window always covers one input pixel"));
            }
        }
    }
    Ok((arg, vec![b, c, ho, wo]))
}

/// Sliding max over a `kernel×kernel` window, padding excluded from the max.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let win = Window::same(kernel, stride, 1)?;
    let (arg, shape) = max_pool_argmax(x, win)?;
    let xd = x.data();
    Ok(Tensor::from_parts(
        shape,
        arg.iter().map(|&i| xd[i]).collect(),
    ))
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool2d_backward(
    x: &Tensor,
    dy: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<Tensor> {
    let win = Window::same(kernel, stride, 1)?;
    let (arg, shape) = max_pool_argmax(x, win)?;
    if shape != dy.shape() {
        return Err(mismatch(
            "max_pool2d_backward",
            format!("{shape:?} vs {:?}", dy.shape()),
        ));
    }
    let mut dx = vec![0.0; x.len()];
    for (&i, &g) in arg.iter().zip(dy.data()) {
        dx[i] += g;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// `(B, C, H, W)` to `(B, C)` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("global_avg_pool")?;
    let n = (h * w) as f64;
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / n)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], out))
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c) = dy.dims2("global_avg_pool_backward")?;
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(b * c * h * w);
    for &g in dy.data() {
        out.extend(std::iter::repeat_n(g / n, h * w));
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool2d(&x, 2).unwrap().data(), &[2.5]);
        assert_eq!(avg_pool2d(&x, 1).unwrap(), x);
        let c = Tensor::full(&[2, 3, 4, 4], 1.25).unwrap();
        assert!(avg_pool2d(&c, 2).unwrap().data().iter().all(|&v| v == 1.25));
        assert!(avg_pool2d(&Tensor::zeros(&[1, 1, 3, 3]).unwrap(), 2).is_err());
    }

    #[test]
    fn max_pool_stem_shape() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap();
        let y = max_pool2d(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
        let dx = max_pool2d_backward(&x, &Tensor::ones(&[1, 1, 2, 2]).unwrap(), 3, 2).unwrap();
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx.at(&[0, 0, 1, 1]), 1.0);
    }

    #[test]
    fn global_pool() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5, 5.5]);
    }
}
