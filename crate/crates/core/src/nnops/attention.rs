use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::nnops::activation::{linear_1x1, softmax};
use crate::nnops::involution::involution_mac;
use crate::nnops::unfold::Window;
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Query-key dot products inside the window.
    Content,
    /// Query against a table indexed by relative offset.
    Position,
}

/// Multi-head attention restricted to a `K×K` neighbourhood.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `(K·K, C/heads)`
    pub position: Option<Tensor>,
    /// Normalise affinities over the window. Off by default.
    pub softmax: bool,
}

impl AttentionSpec {
    pub fn new(channels: usize, window: usize, heads: usize, rng: &mut Prng) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::EvenKernel(window));
        }
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let std = (1.0 / channels as f64).sqrt();
        Ok(Self {
            channels,
            window,
            heads,
            wq: Tensor::randn(&[channels, channels], std, rng)?,
            wk: Tensor::randn(&[channels, channels], std, rng)?,
            wv: Tensor::randn(&[channels, channels], std, rng)?,
            position: Some(Tensor::randn(
                &[window * window, channels / heads],
                1.0,
                rng,
            )?),
            softmax: false,
        })
    }

    pub fn win(&self) -> Window {
        Window::same(self.window, 1, 1).expect("validated at construction")
    }

    /// Affinity tensor `(B, heads, K·K, H, W)` for the chosen mode,
    /// softmax-normalised over the window when enabled.
    pub fn affinity(&self, x: &Tensor, mode: AttentionMode) -> Result<Tensor> {
        let q = linear_1x1(x, &self.wq, None)?;
        let a = match mode {
            AttentionMode::Content => {
                let k = linear_1x1(x, &self.wk, None)?;
                content_affinity(&q, &k, self.heads, self.win())?
            }
            AttentionMode::Position => {
                let r = self
                    .position
                    .as_ref()
                    .ok_or_else(|| Error::Config("position mode needs a position table".into()))?;
                position_affinity(&q, r, self.heads, self.window)?
            }
        };
        if self.softmax {
            softmax(&a, 2)
        } else {
            Ok(a)
        }
    }
}

/// Pools the value projection with the affinities used as involution kernels,
/// one kernel per head.
pub fn local_self_attention(
    x: &Tensor,
    spec: &AttentionSpec,
    mode: AttentionMode,
) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4("local_self_attention")?;
    if c != spec.channels {
        return Err(mismatch(
            "local_self_attention",
            format!("{c} channels, spec has {}", spec.channels),
        ));
    }
    let a = spec.affinity(x, mode)?;
    let v = linear_1x1(x, &spec.wv, None)?;
    involution_mac(&v, &a, spec.win())
}

fn head_dims(q: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = q.dims4("affinity")?;
    if heads == 0 || c % heads != 0 {
        return Err(mismatch("affinity", format!("{c} channels, {heads} heads")));
    }
    Ok((b, c, h, w, c / heads))
}

/// `A[b, h, t, i, j] = Σ_{c ∈ head h} q[b, c, i, j] · k[b, c, (i, j) + offset(t)]`,
/// zero where the offset leaves the map.
pub fn content_affinity(q: &Tensor, k: &Tensor, heads: usize, win: Window) -> Result<Tensor> {
    let (b, c, h, w, dh) = head_dims(q, heads)?;
    if k.shape() != q.shape() || win.stride != 1 {
        return Err(mismatch(
            "content_affinity",
            format!("q {:?}, k {:?}", q.shape(), k.shape()),
        ));
    }
    let kw = win.kernel;
    let l = h * w;
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; b * heads * kw * kw * l];
    for bi in 0..b {
        for hd in 0..heads {
            for ti in 0..kw {
                for tj in 0..kw {
                    let dst = &mut out[((bi * heads + hd) * kw * kw + ti * kw + tj) * l..][..l];
                    for cc in 0..dh {
                        let ch = (bi * c + hd * dh + cc) * l;
                        for i in 0..h {
                            let Some(si) = win.source(i, ti, h) else {
                                continue;
                            };
                            for j in 0..w {
                                if let Some(sj) = win.source(j, tj, w) {
                                    dst[i * w + j] += qd[ch + i * w + j] * kd[ch + si * w + sj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, heads, kw * kw, h, w], out))
}

/// Returns `(dq, dk)`.
pub fn content_affinity_backward(
    q: &Tensor,
    k: &Tensor,
    da: &Tensor,
    heads: usize,
    win: Window,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w, dh) = head_dims(q, heads)?;
    let kw = win.kernel;
    let l = h * w;
    if da.shape() != [b, heads, kw * kw, h, w] {
        return Err(mismatch(
            "content_affinity_backward",
            format!("{:?}", da.shape()),
        ));
    }
    let (qd, kd, dd) = (q.data(), k.data(), da.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    for bi in 0..b {
        for hd in 0..heads {
            for ti in 0..kw {
                for tj in 0..kw {
                    let g = &dd[((bi * heads + hd) * kw * kw + ti * kw + tj) * l..][..l];
                    for cc in 0..dh {
                        let ch = (bi * c + hd * dh + cc) * l;
                        for i in 0..h {
                            let Some(si) = win.source(i, ti, h) else {
                                continue;
                            };
                            for j in 0..w {
                                if let Some(sj) = win.source(j, tj, w) {
                                    let (o, s) = (ch + i * w + j, ch + si * w + sj);
                                    dq[o] += g[i * w + j] * kd[s];
                                    dk[s] += g[i * w + j] * qd[o];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
    ))
}

/// `A[b, h, t, i, j] = Σ_c q[b, h·dh + c, i, j] · R[t, c]`.
pub fn position_affinity(
    q: &Tensor,
    table: &Tensor,
    heads: usize,
    window: usize,
) -> Result<Tensor> {
    let (b, c, h, w, dh) = head_dims(q, heads)?;
    let taps = window * window;
    if table.shape() != [taps, dh] {
        return Err(mismatch(
            "position_affinity",
            format!("table {:?}, expected ({taps}, {dh})", table.shape()),
        ));
    }
    let l = h * w;
    let (qd, rd) = (q.data(), table.data());
    let mut out = vec![0.0; b * heads * taps * l];
    for bi in 0..b {
        for hd in 0..heads {
            for t in 0..taps {
                let dst = &mut out[((bi * heads + hd) * taps + t) * l..][..l];
                for cc in 0..dh {
                    let r = rd[t * dh + cc];
                    let src = &qd[(bi * c + hd * dh + cc) * l..][..l];
                    for (o, &qv) in dst.iter_mut().zip(src) {
                        *o += qv * r;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, heads, taps, h, w], out))
}

/// Returns `(dq, dtable)`.
pub fn position_affinity_backward(
    q: &Tensor,
    table: &Tensor,
    da: &Tensor,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w, dh) = head_dims(q, heads)?;
    let taps = table.shape()[0];
    let l = h * w;
    let (qd, rd, dd) = (q.data(), table.data(), da.data());
    let mut dq = vec![0.0; q.len()];
    let mut dr = vec![0.0; table.len()];
    for bi in 0..b {
        for hd in 0..heads {
            for t in 0..taps {
                let g = &dd[((bi * heads + hd) * taps + t) * l..][..l];
                for cc in 0..dh {
                    let ch = (bi * c + hd * dh + cc) * l;
                    let r = rd[t * dh + cc];
                    let mut acc = 0.0;
                    for p in 0..l {
                        dq[ch + p] += g[p] * r;
                        acc += g[p] * qd[ch + p];
                    }
                    dr[t * dh + cc] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(table.shape().to_vec(), dr),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_head_unit_window() {
        let mut rng = Prng::new(1);
        let spec = AttentionSpec::new(3, 1, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng).unwrap();
        let y = local_self_attention(&x, &spec, AttentionMode::Content).unwrap();
        let q = linear_1x1(&x, &spec.wq, None).unwrap();
        let k = linear_1x1(&x, &spec.wk, None).unwrap();
        let v = linear_1x1(&x, &spec.wv, None).unwrap();
        for p in 0..4 {
            let qk: f64 = (0..3)
                .map(|c| q.data()[c * 4 + p] * k.data()[c * 4 + p])
                .sum();
            for c in 0..3 {
                assert!((y.data()[c * 4 + p] - qk * v.data()[c * 4 + p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_center_affinity_with_identity_values() {
        let mut rng = Prng::new(2);
        let mut spec = AttentionSpec::new(4, 3, 2, &mut rng).unwrap();
        spec.wv = Tensor::eye(4).unwrap();
        let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng).unwrap();
        let a = Tensor::from_fn(
            &[2, 2, 9, 3, 3],
            |i| if (i / 9) % 9 == 4 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let v = linear_1x1(&x, &spec.wv, None).unwrap();
        assert_eq!(involution_mac(&v, &a, spec.win()).unwrap(), x);
    }

    #[test]
    fn softmax_flag_normalises_window() {
        let mut rng = Prng::new(3);
        let mut spec = AttentionSpec::new(4, 3, 2, &mut rng).unwrap();
        spec.softmax = true;
        let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng).unwrap();
        for mode in [AttentionMode::Content, AttentionMode::Position] {
            let a = spec.affinity(&x, mode).unwrap();
            let s = a.reduce_sum(&[2]).unwrap();
            assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn bad_heads() {
        let mut rng = Prng::new(3);
        assert!(AttentionSpec::new(6, 3, 4, &mut rng).is_err());
        assert!(AttentionSpec::new(6, 2, 2, &mut rng).is_err());
    }
}
