use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{mismatch, Error, Result};
use crate::nnops::{self, Window};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Input order is fixed per variant and noted on
/// each one.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Recorded input or parameter, no inputs.
    Leaf,
    /// `[a, b]`
    Add,
    /// `[a, b]`
    Sub,
    /// `[a, b]`, elementwise.
    Mul,
    /// `[x]`
    Scale(f64),
    /// `[x]`
    Relu,
    /// `[x]` to a one-element tensor.
    Sum,
    /// `[a, b]`
    MatMul,
    /// `[x]`
    Reshape(Vec<usize>),
    /// `[x]`
    Permute(Vec<usize>),
    /// `[x, filters]`
    Conv2d { window: Window, groups: usize },
    /// `[x]`
    Unfold(Window),
    /// `[x]`
    AvgPool(usize),
    /// `[x]`
    MaxPool { kernel: usize, stride: usize },
    /// `[x]`
    GlobalAvgPool,
    /// `[x, w]` or `[x, w, bias]`
    Linear1x1 { bias: bool },
    /// `[x, gamma, beta]`. `fixed` holds `(mean, var)` in eval mode; batch
    /// statistics are used otherwise.
    BatchNorm {
        eps: f64,
        fixed: Option<(Vec<f64>, Vec<f64>)>,
    },
    /// `[x, kernel]`
    InvolutionMac(Window),
    /// `[q, k]`
    ContentAffinity { heads: usize, window: Window },
    /// `[q, table]`
    PositionAffinity { heads: usize, window: usize },
    /// `[x]`
    Softmax(usize),
    /// `[x, w, bias]`
    Dense,
    /// `[logits]` to the mean loss.
    CrossEntropy { labels: Vec<usize>, smoothing: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::MatMul => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Conv2d { .. } => "conv2d",
            Op::Unfold(_) => "unfold",
            Op::AvgPool(_) => "avg_pool2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear1x1 { .. } => "linear_1x1",
            Op::BatchNorm { .. } => "batch_norm",
            Op::InvolutionMac(_) => "involution_mac",
            Op::ContentAffinity { .. } => "content_affinity",
            Op::PositionAffinity { .. } => "position_affinity",
            Op::Softmax(_) => "softmax",
            Op::Dense => "dense",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Looks up an op that needs no configuration by name.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "relu" => Op::Relu,
            "sum" => Op::Sum,
            "matmul" => Op::MatMul,
            "global_avg_pool" => Op::GlobalAvgPool,
            "dense" => Op::Dense,
            _ => return Err(Error::UnregisteredOp(name.to_string())),
        })
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Leaf => 0..=0,
            Op::Scale(_)
            | Op::Relu
            | Op::Sum
            | Op::Reshape(_)
            | Op::Permute(_)
            | Op::Unfold(_)
            | Op::AvgPool(_)
            | Op::MaxPool { .. }
            | Op::GlobalAvgPool
            | Op::Softmax(_)
            | Op::CrossEntropy { .. } => 1..=1,
            Op::Linear1x1 { bias: true } | Op::BatchNorm { .. } | Op::Dense => 3..=3,
            _ => 2..=2,
        }
    }

    fn eval(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(match self {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Add => x[0].add(x[1])?,
            Op::Sub => x[0].sub(x[1])?,
            Op::Mul => x[0].mul(x[1])?,
            Op::Scale(k) => x[0].scale(*k),
            Op::Relu => nnops::relu(x[0]),
            Op::Sum => Tensor::scalar(x[0].sum()),
            Op::MatMul => x[0].matmul(x[1])?,
            Op::Reshape(d) => x[0].reshape(d)?,
            Op::Permute(o) => x[0].permute(o)?,
            Op::Conv2d { window, groups } => nnops::conv2d_raw(x[0], x[1], *window, *groups)?,
            Op::Unfold(w) => nnops::unfold(x[0], *w)?,
            Op::AvgPool(s) => nnops::avg_pool2d(x[0], *s)?,
            Op::MaxPool { kernel, stride } => nnops::max_pool2d(x[0], *kernel, *stride)?,
            Op::GlobalAvgPool => nnops::global_avg_pool(x[0])?,
            Op::Linear1x1 { bias } => nnops::linear_1x1(x[0], x[1], bias.then(|| x[2]))?,
            Op::BatchNorm { eps, fixed } => {
                let f = fixed.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()));
                nnops::norm_forward(x[0], x[1], x[2], *eps, f)?.0
            }
            Op::InvolutionMac(w) => nnops::involution_mac(x[0], x[1], *w)?,
            Op::ContentAffinity { heads, window } => {
                nnops::content_affinity(x[0], x[1], *heads, *window)?
            }
            Op::PositionAffinity { heads, window } => {
                nnops::position_affinity(x[0], x[1], *heads, *window)?
            }
            Op::Softmax(a) => nnops::softmax(x[0], *a)?,
            Op::Dense => nnops::dense(x[0], x[1], x[2])?,
            Op::CrossEntropy { labels, smoothing } => {
                Tensor::scalar(nnops::cross_entropy(x[0], labels, *smoothing)?)
            }
        })
    }

    /// Gradients with respect to each input given the output gradient.
    fn backward(&self, x: &[&Tensor], out: &Tensor, dy: &Tensor) -> Result<Vec<Tensor>> {
        Ok(match self {
            Op::Leaf => vec![],
            Op::Add => vec![dy.clone(), dy.clone()],
            Op::Sub => vec![dy.clone(), dy.scale(-1.0)],
            Op::Mul => vec![dy.mul(x[1])?, dy.mul(x[0])?],
            Op::Scale(k) => vec![dy.scale(*k)],
            Op::Relu => vec![nnops::relu_backward(x[0], dy)?],
            Op::Sum => {
                let g = dy.data()[0];
                vec![Tensor::from_parts(
                    x[0].shape().to_vec(),
                    vec![g; x[0].len()],
                )]
            }
            Op::MatMul => vec![
                dy.matmul(&x[1].transpose()?)?,
                x[0].transpose()?.matmul(dy)?,
            ],
            Op::Reshape(_) => vec![dy.reshape(x[0].shape())?],
            Op::Permute(order) => {
                let mut inv = vec![0; order.len()];
                for (i, &a) in order.iter().enumerate() {
                    inv[a] = i;
                }
                vec![dy.permute(&inv)?]
            }
            Op::Conv2d { window, groups } => {
                let (dx, dw) = nnops::conv2d_backward(x[0], x[1], dy, *window, *groups)?;
                vec![dx, dw]
            }
            Op::Unfold(w) => {
                let (_, c, h, wd) = x[0].dims4("unfold")?;
                vec![nnops::fold(dy, c, h, wd, *w)?]
            }
            Op::AvgPool(s) => vec![nnops::avg_pool2d_backward(dy, *s)?],
            Op::MaxPool { kernel, stride } => {
                vec![nnops::max_pool2d_backward(x[0], dy, *kernel, *stride)?]
            }
            Op::GlobalAvgPool => {
                let (_, _, h, w) = x[0].dims4("global_avg_pool")?;
                vec![nnops::global_avg_pool_backward(dy, h, w)?]
            }
            Op::Linear1x1 { bias } => {
                let (dx, dw, db) = nnops::linear_1x1_backward(x[0], x[1], dy, *bias)?;
                let mut v = vec![dx, dw];
                v.extend(db);
                v
            }
            Op::BatchNorm { eps, fixed } => {
                let f = fixed.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()));
                let (dx, dg, db) = nnops::batch_norm_backward(x[0], x[1], dy, *eps, f)?;
                vec![dx, dg, db]
            }
            Op::InvolutionMac(w) => {
                let (dx, dk) = nnops::involution_mac_backward(x[0], x[1], dy, *w)?;
                vec![dx, dk]
            }
            Op::ContentAffinity { heads, window } => {
                let (dq, dk) = nnops::content_affinity_backward(x[0], x[1], dy, *heads, *window)?;
                vec![dq, dk]
            }
            Op::PositionAffinity { heads, .. } => {
                let (dq, dr) = nnops::position_affinity_backward(x[0], x[1], dy, *heads)?;
                vec![dq, dr]
            }
            Op::Softmax(a) => vec![nnops::softmax_backward(out, dy, *a)?],
            Op::Dense => {
                let (dx, dw, db) = nnops::dense_backward(x[0], x[1], dy)?;
                vec![dx, dw, db]
            }
            Op::CrossEntropy { labels, smoothing } => {
                vec![nnops::cross_entropy_backward(x[0], labels, *smoothing)?.scale(dy.data()[0])]
            }
        })
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    param: Option<ParamId>,
}

/// Ordered record of forward computations. Inputs always precede the nodes
/// that consume them.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Records a constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, None)
    }

    /// Records the current value of a parameter; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Leaf, vec![], store.value(id).clone(), Some(id))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn forward(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if op == Op::Leaf {
            return Err(Error::UnregisteredOp("leaf".into()));
        }
        if !op.arity().contains(&inputs.len()) || inputs.iter().any(|v| v.0 >= self.nodes.len()) {
            return Err(mismatch(op.name(), format!("bad input list {inputs:?}")));
        }
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.eval(&xs)?
        };
        Ok(self.push(op, inputs.to_vec(), value, None))
    }

    /// Records an op given by name; see [`Op::from_name`].
    pub fn forward_named(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        self.forward(Op::from_name(name)?, inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.forward(Op::Scale(k), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.forward(Op::Relu, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.forward(Op::Sum, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Op::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.forward(Op::Reshape(dims.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        self.forward(Op::Permute(order.to_vec()), &[x])
    }

    pub fn conv2d(&mut self, x: Var, filters: Var, window: Window, groups: usize) -> Result<Var> {
        self.forward(Op::Conv2d { window, groups }, &[x, filters])
    }

    pub fn unfold(&mut self, x: Var, window: Window) -> Result<Var> {
        self.forward(Op::Unfold(window), &[x])
    }

    pub fn avg_pool(&mut self, x: Var, s: usize) -> Result<Var> {
        if s == 1 {
            return Ok(x);
        }
        self.forward(Op::AvgPool(s), &[x])
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.forward(Op::MaxPool { kernel, stride }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.forward(Op::GlobalAvgPool, &[x])
    }

    pub fn linear_1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.forward(Op::Linear1x1 { bias: true }, &[x, w, b]),
            None => self.forward(Op::Linear1x1 { bias: false }, &[x, w]),
        }
    }

    /// Batch norm over `(B, H, W)`. Returns the output and the per-channel
    /// `(mean, biased variance)` that were applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        fixed: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (value, mean, var) = {
            let f = fixed.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()));
            nnops::norm_forward(self.value(x), self.value(gamma), self.value(beta), eps, f)?
        };
        let v = self.push(
            Op::BatchNorm { eps, fixed },
            vec![x, gamma, beta],
            value,
            None,
        );
        Ok((v, mean, var))
    }

    pub fn involution_mac(&mut self, x: Var, kernel: Var, window: Window) -> Result<Var> {
        self.forward(Op::InvolutionMac(window), &[x, kernel])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward(Op::Softmax(axis), &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.forward(Op::Dense, &[x, w, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        self.forward(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                smoothing,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Nodes after `loss` are ignored and
    /// each earlier node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.inputs.is_empty() {
                let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = node.op.backward(&xs, &node.value, &dy)?;
                for (v, g) in node.inputs.iter().zip(gs) {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate(id, g)?;
            }
        }
        Ok(grads)
    }

    /// Smallest |input| over every relu on the tape.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Relu)
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn records_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap());
        let y = tape.leaf(Tensor::full(&[2], 2.0).unwrap());
        let s = tape.add(x, y).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 3.0]);
        assert_eq!(tape.len(), 3);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::ones(&[3, 2]).unwrap());
        let before = tape.len();
        let m = tape.matmul(a, b).unwrap();
        tape.relu(m).unwrap();
        assert_eq!(tape.len() - before, 2);
    }

    #[test]
    fn unregistered_names() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap());
        assert!(matches!(
            tape.forward_named("frobnicate", &[x]),
            Err(Error::UnregisteredOp(_))
        ));
        assert!(tape.forward_named("relu", &[x]).is_ok());
        assert!(tape.forward(Op::Leaf, &[]).is_err());
        assert!(tape.forward(Op::Add, &[x]).is_err());
    }

    #[test]
    fn basic_gradients() {
        let mut rng = Prng::new(1);
        let xv = Tensor::randn(&[3, 2], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[3, 2]).unwrap());

        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_participating_param_stays_zero() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::ones(&[2]).unwrap());
        let q = store.add("q", Tensor::ones(&[2]).unwrap());
        let mut tape = Tape::new();
        let pv = tape.param(&store, p);
        let _qv = tape.param(&store, q);
        let s = tape.sum(pv).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(q).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_repeatable_and_linear() {
        let mut rng = Prng::new(2);
        let av = Tensor::randn(&[3, 4], 1.0, &mut rng).unwrap();
        let bv = Tensor::randn(&[4, 2], 1.0, &mut rng).unwrap();
        let build = |which: u8| {
            let mut tape = Tape::new();
            let a = tape.leaf(av.clone());
            let b = tape.leaf(bv.clone());
            let m = tape.matmul(a, b).unwrap();
            let r = tape.relu(m).unwrap();
            let l1 = tape.sum(r).unwrap();
            let sq = tape.mul(m, m).unwrap();
            let l2 = tape.sum(sq).unwrap();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            let again = tape.backward(loss).unwrap();
            assert_eq!(g.get(a), again.get(a));
            g.get(a).unwrap().clone()
        };
        let sum = build(1).add(&build(2)).unwrap();
        assert!(build(0).max_abs_diff(&sum).unwrap() < 1e-12);
    }

    #[test]
    fn replay_is_deterministic() {
        let mut rng = Prng::new(3);
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng).unwrap();
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = tape
                .conv2d(xv, wv, Window::same(3, 1, 1).unwrap(), 1)
                .unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
