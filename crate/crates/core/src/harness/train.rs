use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::harness::data::SyntheticDataset;
use crate::nnops::BnMode;
use crate::prng::Prng;
use crate::rednet::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cross-entropy label smoothing; 0 disables it.
    pub label_smoothing: f64,
    /// Draw a fresh sample order every epoch. When off, one seeded order is
    /// reused, so the batches are identical from epoch to epoch.
    pub reshuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            label_smoothing: 0.0,
            reshuffle: false,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted and freezes every weight.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π·t/T)) / 2`
pub fn half_cosine(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()) / 2.0
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &ParamStore) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.data().to_vec();
            for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Fraction of training samples classified correctly while training.
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub model: String,
    pub epochs: Vec<EpochMetrics>,
    /// Accuracy on the training set after the last epoch, inference mode.
    pub final_train_acc: f64,
    pub test_acc: Option<f64>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,train_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for m in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e}",
                m.epoch, m.lr, m.loss, m.train_acc
            );
        }
        out
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..][..k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

/// Anything trainable by [`train`]: records logits for a batch and exposes
/// its parameters.
pub trait Classifier {
    fn record_batch(&mut self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn predict(&mut self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    /// Running statistics are folded in immediately; a training-mode pass
    /// never reads them.
    fn record_batch(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let out = self.record(tape, x)?;
        self.apply_bn_updates(&out.bn_updates);
        Ok(out.logits)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Model::params_mut(self)
    }

    /// Inference-mode logits.
    fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let prev = self.mode();
        self.set_mode(BnMode::Eval);
        let y = self.forward(x);
        self.set_mode(prev);
        y
    }
}

/// Multinomial logistic regression on flattened pixels.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl LinearClassifier {
    pub fn new(inputs: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let w = params.add(
            "linear.weight",
            Tensor::randn(&[classes, inputs], 0.01, &mut Prng::new(seed))?,
        );
        let b = params.add("linear.bias", Tensor::zeros(&[classes])?);
        Ok(Self { params, w, b })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl Classifier for LinearClassifier {
    fn record_batch(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let n = shape[0];
        let flat = tape.reshape(x, &[n, shape[1..].iter().product()])?;
        let (w, b) = (
            tape.param(&self.params, self.w),
            tape.param(&self.params, self.b),
        );
        tape.dense(flat, w, b)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.record_batch(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Accuracy of `predict` over `data`.
pub fn evaluate(
    net: &mut dyn Classifier,
    data: &SyntheticDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let (x, labels) = data.batch(start, batch_size)?;
        hits += correct(&net.predict(&x)?, labels);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Minibatch SGD over `train` in a seeded order with a half-cosine schedule
/// stepped per batch. Stops with [`Error::Diverged`] on a non-finite loss.
pub fn train(
    net: &mut dyn Classifier,
    name: &str,
    train: &SyntheticDataset,
    test: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay, net.params_mut());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Prng::new(cfg.seed);
    rng.shuffle(&mut order);
    for epoch in 0..cfg.epochs {
        if cfg.reshuffle && epoch > 0 {
            rng.shuffle(&mut order);
        }
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.gather(idx)?;
            let labels = &labels[..];
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let logits = net.record_batch(&mut tape, xv)?;
            let loss = tape.cross_entropy(logits, labels, cfg.label_smoothing)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: lv,
                });
            }
            loss_sum += lv;
            hits += correct(tape.value(logits), labels);
            let params = net.params_mut();
            params.zero_grad();
            tape.backward_into(loss, params)?;
            sgd.step(params, half_cosine(cfg.lr, epoch * batches + bi, total));
        }
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            lr: half_cosine(cfg.lr, epoch * batches, total),
            loss: loss_sum / batches as f64,
            train_acc: hits as f64 / train.len() as f64,
        });
    }
    Ok(TrainReport {
        model: name.to_string(),
        epochs,
        final_train_acc: evaluate(net, train, cfg.batch_size)?,
        test_acc: test.map(|t| evaluate(net, t, cfg.batch_size)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(half_cosine(0.4, 0, 10), 0.4);
        assert!((half_cosine(0.4, 5, 10) - 0.2).abs() < 1e-15);
        assert!(half_cosine(0.4, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.9, 0.1, &ps);
        ps.accumulate(id, &Tensor::new(&[1], vec![0.5]).unwrap())
            .unwrap();
        opt.step(&mut ps, 0.1);
        // v = 0.5 + 0.1 = 0.6, w = 1 - 0.06
        assert!((ps.value(id).data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut ps, 0.1);
        // v = 0.54 + 0.5 + 0.094 = 1.134
        assert!((ps.value(id).data()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_ok());
        for bad in [
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn linear_baseline_learns_something() {
        let data = SyntheticDataset::generate(64, 4, 16, 1).unwrap();
        let mut lin = LinearClassifier::new(3 * 16 * 16, 4, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            ..Default::default()
        };
        let rep = train(&mut lin, "linear", &data, None, &cfg).unwrap();
        assert!(rep.epochs.last().unwrap().loss < rep.epochs[0].loss);
    }
}
