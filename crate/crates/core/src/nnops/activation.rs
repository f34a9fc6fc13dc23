use crate::error::{mismatch, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(mismatch(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let m = (0..n).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..n {
                let e = (xd[at(a)] - m).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..n {
                out[at(a)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradient through softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(y.shape(), axis)?;
    let (yd, dd) = (y.data(), dy.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let dot: f64 = (0..n).map(|a| yd[at(a)] * dd[at(a)]).sum();
            for a in 0..n {
                out[at(a)] = yd[at(a)] * (dd[at(a)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

fn check_1x1(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(usize, usize, usize, usize)> {
    let (b, ci, h, wd) = x.dims4("linear_1x1")?;
    let (co, ci2) = w.dims2("linear_1x1")?;
    if ci != ci2 || bias.is_some_and(|bb| bb.len() != co) {
        return Err(mismatch(
            "linear_1x1",
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    }
    Ok((b, ci, co, h * wd))
}

/// Pointwise channel projection `y[:, :, i, j] = W · x[:, :, i, j] (+ b)`.
pub fn linear_1x1(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, ci, co, hw) = check_1x1(x, w, bias)?;
    let mut out = vec![0.0; b * co * hw];
    for bi in 0..b {
        let o = &mut out[bi * co * hw..][..co * hw];
        if let Some(bias) = bias {
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bias.data()[c]);
            }
        }
        gemm(
            w.data(),
            &x.data()[bi * ci * hw..][..ci * hw],
            o,
            co,
            ci,
            hw,
        );
    }
    let s = x.shape();
    Ok(Tensor::from_parts(vec![b, co, s[2], s[3]], out))
}

/// Returns `(dx, dw, db)`; `db` is present when `with_bias`.
pub fn linear_1x1_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (b, ci, co, hw) = check_1x1(x, w, None)?;
    if dy.len() != b * co * hw {
        return Err(mismatch(
            "linear_1x1_backward",
            format!("dy {:?}", dy.shape()),
        ));
    }
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for bi in 0..b {
        let dyb = &dy.data()[bi * co * hw..][..co * hw];
        let xb = &x.data()[bi * ci * hw..][..ci * hw];
        gemm_nt(dyb, xb, &mut dw, co, hw, ci);
        gemm_tn(
            w.data(),
            dyb,
            &mut dx[bi * ci * hw..][..ci * hw],
            ci,
            co,
            hw,
        );
        if with_bias {
            for (c, chunk) in dyb.chunks(hw).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        with_bias.then(|| Tensor::from_parts(vec![co], db)),
    ))
}

/// Fully connected layer: `x (B, C)`, `w (O, C)`, `b (O)`.
pub fn dense(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c) = x.dims2("dense")?;
    let (o, c2) = w.dims2("dense")?;
    if c != c2 || bias.len() != o {
        return Err(mismatch(
            "dense",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    gemm_nt(x.data(), w.data(), &mut out, b, c, o);
    Ok(Tensor::from_parts(vec![b, o], out))
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c) = x.dims2("dense_backward")?;
    let (o, _) = w.dims2("dense_backward")?;
    let mut dx = vec![0.0; b * c];
    gemm(dy.data(), w.data(), &mut dx, b, o, c);
    let mut dw = vec![0.0; o * c];
    gemm_tn(dy.data(), x.data(), &mut dw, o, b, c);
    let db = dy.reduce_sum(&[0])?;
    Ok((
        Tensor::from_parts(vec![b, c], dx),
        Tensor::from_parts(vec![o, c], dw),
        db,
    ))
}

fn smoothed_target(label: usize, class: usize, classes: usize, smoothing: f64) -> f64 {
    let on = if class == label { 1.0 - smoothing } else { 0.0 };
    on + smoothing / classes as f64
}

/// Mean cross-entropy of `logits (B, classes)` against integer labels, with
/// optional label smoothing.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(mismatch(
            "cross_entropy",
            format!("{} labels for {b}x{k} logits", labels.len()),
        ));
    }
    let p = softmax(logits, 1)?;
    let mut loss = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        for c in 0..k {
            let t = smoothed_target(label, c, k, smoothing);
            if t > 0.0 {
                loss -= t * p.data()[bi * k + c].max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(loss / b as f64)
}

pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (b, k) = logits.dims2("cross_entropy_backward")?;
    let p = softmax(logits, 1)?;
    let mut g = p.into_data();
    for (bi, &label) in labels.iter().enumerate() {
        for c in 0..k {
            g[bi * k + c] = (g[bi * k + c] - smoothed_target(label, c, k, smoothing)) / b as f64;
        }
    }
    Ok(Tensor::from_parts(vec![b, k], g))
}
