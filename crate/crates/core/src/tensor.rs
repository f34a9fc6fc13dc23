//! Dense row-major `f64` tensors.
//!
//! Feature maps use the `(B, C, H, W)` layout throughout the crate. Shapes are
//! never broadcast implicitly; the only broadcasting entry point is
//! [`Tensor::mul_broadcast`], which repeats one size-1 axis.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{mismatch, Error, Result};
use crate::prng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(mismatch(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape is known to be valid. Panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Fills element `i` (flat row-major index) with `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Prng) -> Result<Self> {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> Result<Self> {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let s = strides(&self.shape);
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    /// Splits a 4-D shape into `(B, C, H, W)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(mismatch(
                op,
                format!("expected 4-D tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [m, n] => Ok((m, n)),
            _ => Err(mismatch(
                op,
                format!("expected 2-D tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = check_shape(dims)?;
        if n != self.data.len() {
            return Err(mismatch(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.shape),
            ));
        }
        Ok(Tensor::from_parts(dims.to_vec(), self.data.clone()))
    }

    /// Reorders axes so that output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if order.len() != nd
            || order
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(mismatch(
                "permute",
                format!("{order:?} is not a permutation of {nd} axes"),
            ));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Sums over `axes`, removing them from the shape. Reducing every axis
    /// yields shape `[1]`.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape.len();
        if axes.iter().any(|&a| a >= nd) {
            return Err(mismatch(
                "reduce_sum",
                format!("axes {axes:?} out of range for {nd}-D"),
            ));
        }
        let keep: Vec<usize> = (0..nd).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| self.shape[a]).collect()
        };
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut idx = vec![0usize; nd];
        for &v in &self.data {
            let off: usize = keep
                .iter()
                .zip(&out_strides)
                .map(|(&a, s)| idx[a] * s)
                .sum();
            out[off] += v;
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Multiplies `self` elementwise with `other`, where `other` has the same
    /// shape except for a size-1 `axis` that is repeated across `self`.
    pub fn mul_broadcast(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let ok = other.shape.len() == self.shape.len()
            && axis < self.shape.len()
            && other.shape[axis] == 1
            && self
                .shape
                .iter()
                .zip(&other.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(mismatch(
                "mul_broadcast",
                format!(
                    "{:?} cannot broadcast {:?} along axis {axis}",
                    self.shape, other.shape
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            let row = &other.data[o * inner..(o + 1) * inner];
            for a in 0..n {
                let base = (o * n + a) * inner;
                out.extend(
                    self.data[base..base + inner]
                        .iter()
                        .zip(row)
                        .map(|(x, k)| x * k),
                );
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("({m},{k}) x ({k2},{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Zero-pads the two spatial axes of a `(B, C, H, W)` tensor by `pad` on
    /// every side.
    pub fn pad_zero(&self, pad: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4("pad_zero")?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; b * c * hp * wp];
        for plane in 0..b * c {
            for y in 0..h {
                let src = (plane * h + y) * w;
                let dst = (plane * hp + y + pad) * wp + pad;
                out[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(Tensor::from_parts(vec![b, c, hp, wp], out))
    }

    /// Text dump: the shape on the first line, then one value per line with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = self
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        s.push('\n');
        for v in &self.data {
            let _ = writeln!(s, "{v:.16e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Tensor> {
        Self::read_text(text.as_bytes())
    }

    pub fn read_text(reader: impl BufRead) -> Result<Tensor> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor dump".into()))??;
        let shape = header
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("shape `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            data.push(
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("value `{t}`: {e}")))?,
            );
        }
        Tensor::new(&shape, data)
    }
}

/// `out += a (m×k) · b (k×n)`, row-major.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}
