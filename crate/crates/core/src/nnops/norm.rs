use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalisation over `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: 1e-5,
            momentum: 0.1,
            mode: BnMode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates. `var` is the
    /// biased batch variance; the running estimate stores the unbiased one.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }

    fn fixed_stats(&self) -> Option<(&[f64], &[f64])> {
        (self.mode == BnMode::Eval).then(|| (self.running_mean.data(), self.running_var.data()))
    }
}

/// Per-channel mean and biased variance over `(B, H, W)`.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4("batch_norm")?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += xd[(bi * c + ci) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            v += xd[(bi * c + ci) * hw..][..hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = v / n;
    }
    Ok((mean, var))
}

/// Normalises with batch statistics when `fixed` is `None`, otherwise with
/// the given `(mean, var)`. Returns the output and the statistics used.
pub fn norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    fixed: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4("batch_norm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch(
            "batch_norm",
            format!("{c} channels, gamma {:?}", gamma.shape()),
        ));
    }
    let (mean, var) = match fixed {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => channel_stats(x)?,
    };
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let scale = gamma.data()[ci] / (var[ci] + eps).sqrt();
            let shift = beta.data()[ci];
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                out[i] = (xd[i] - mean[ci]) * scale + shift;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), mean, var))
}

/// Normalises without touching running statistics.
pub fn batch_norm_apply(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    Ok(norm_forward(x, &state.gamma, &state.beta, state.eps, state.fixed_stats())?.0)
}

/// Normalises and, in train mode, updates the running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState) -> Result<Tensor> {
    let (y, mean, var) =
        norm_forward(x, &state.gamma, &state.beta, state.eps, state.fixed_stats())?;
    if state.mode == BnMode::Train {
        let (b, _, h, w) = x.dims4("batch_norm")?;
        state.update_running(&mean, &var, b * h * w);
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`. With `fixed = None` this is the
/// batch-statistics gradient, which propagates through the mean and variance.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    eps: f64,
    fixed: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4("batch_norm_backward")?;
    let (mean, var) = match fixed {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => channel_stats(x)?,
    };
    let hw = h * w;
    let n = (b * hw) as f64;
    let (xd, dd, gd) = (x.data(), dy.data(), gamma.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - mean[ci]) * inv_std;
                sum_dy += dd[i];
                sum_dy_xhat += dd[i] * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let g = gd[ci] * inv_std;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = if fixed.is_some() {
                    g * dd[i]
                } else {
                    let xhat = (xd[i] - mean[ci]) * inv_std;
                    g * (dd[i] - sum_dy / n - xhat * sum_dy_xhat / n)
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn train_mode_normalises() {
        let mut rng = Prng::new(8);
        let x = Tensor::randn(&[3, 4, 5, 5], 2.5, &mut rng)
            .unwrap()
            .map(|v| v + 1.7);
        let mut st = BatchNormState::new(4).unwrap();
        let y = batch_norm(&x, &mut st).unwrap();
        let (mean, var) = channel_stats(&y).unwrap();
        for c in 0..4 {
            assert!(mean[c].abs() < 1e-10);
            // eps shrinks the variance slightly below one
            let (_, xv) = channel_stats(&x).unwrap();
            let expected = xv[c] / (xv[c] + 1e-5);
            assert!((var[c] - expected).abs() < 1e-10);
            assert!((var[c] - 1.0).abs() < 1e-5);
        }
        assert!(st.running_mean.data().iter().all(|&m| m.abs() > 0.0));
        assert!(st.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn eval_before_update_uses_init() {
        let mut rng = Prng::new(8);
        let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng).unwrap();
        let mut st = BatchNormState::new(2).unwrap();
        st.mode = BnMode::Eval;
        let y = batch_norm(&x, &mut st).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.sub(&x.scale(s)).unwrap().max_abs() < 1e-15);
        assert_eq!(st.running_mean.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_element_statistics_are_guarded() {
        let x = Tensor::full(&[1, 1, 1, 1], 3.0).unwrap();
        let mut st = BatchNormState::new(1).unwrap();
        let y = batch_norm(&x, &mut st).unwrap();
        assert_eq!(y.data(), &[0.0]);
        assert!(y.data()[0].is_finite());
    }
}
