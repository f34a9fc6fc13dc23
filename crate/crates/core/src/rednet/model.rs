use crate::autodiff::graph::{
    attention_on_tape, involution_on_tape, AttentionVars, InvolutionGeom, InvolutionVars,
    ReduceVars,
};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::nnops::{
    AttentionMode, AttentionSpec, BatchNormState, BnMode, ConvSpec, InvolutionSpec, KernelGenForm,
    ReduceStage, Window,
};
use crate::prng::Prng;
use crate::tensor::Tensor;

use super::arch::{ArchSpec, BlockSpec, GroupChannels, MiddleOp, StemVariant};

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    window: Window,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    /// Index into `Model::running`.
    state: usize,
}

#[derive(Clone, Debug)]
struct Inv {
    name: String,
    geom: InvolutionGeom,
    reduce: Option<(ParamId, Bn)>,
    span_w: ParamId,
    span_b: ParamId,
}

#[derive(Clone, Debug)]
struct Attn {
    window: usize,
    heads: usize,
    mode: AttentionMode,
    softmax: bool,
    stride: usize,
    wq: ParamId,
    wk: Option<ParamId>,
    wv: ParamId,
    table: Option<ParamId>,
}

#[derive(Clone, Debug)]
enum Middle {
    Conv(Conv),
    Inv(Inv),
    Attn(Attn),
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    conv1: Conv,
    bn1: Bn,
    middle: Middle,
    bn2: Bn,
    conv3: Conv,
    bn3: Bn,
    shortcut: Option<(Conv, Bn)>,
}

#[derive(Clone, Debug)]
enum Stem {
    Conv7 {
        conv: Conv,
        bn: Bn,
    },
    Inv {
        conv1: Conv,
        bn1: Bn,
        inv: Inv,
        bn2: Bn,
        conv2: Conv,
        bn3: Bn,
    },
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    state: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Running-stat updates to apply with [`Model::apply_bn_updates`];
    /// empty in eval mode.
    pub bn_updates: Vec<BnUpdate>,
    /// Generated kernels per involution layer, in execution order.
    pub kernels: Vec<(String, Var)>,
}

/// An instantiated architecture: parameters, batch-norm running statistics
/// and a differentiable forward pass recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Model {
    arch: ArchSpec,
    params: ParamStore,
    running: Vec<BatchNormState>,
    bn_names: Vec<String>,
    mode: BnMode,
    stem: Stem,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

struct Builder {
    params: ParamStore,
    running: Vec<BatchNormState>,
    bn_names: Vec<String>,
    rng: Prng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Conv> {
        let spec = ConvSpec::new(ci, co, k, stride, groups, &mut self.rng)?;
        let window = spec.window();
        Ok(Conv {
            w: self.params.add(format!("{name}.weight"), spec.filters),
            window,
            groups,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        let state = BatchNormState::new(c)?;
        let bn = Bn {
            gamma: self
                .params
                .add(format!("{name}.gamma"), state.gamma.clone()),
            beta: self.params.add(format!("{name}.beta"), state.beta.clone()),
            state: self.running.len(),
        };
        self.running.push(state);
        self.bn_names.push(name.to_string());
        Ok(bn)
    }

    #[allow(clippy::too_many_arguments)]
    fn inv(
        &mut self,
        name: &str,
        c: usize,
        k: usize,
        stride: usize,
        groups: usize,
        reduction: usize,
        form: KernelGenForm,
    ) -> Result<Inv> {
        let spec =
            InvolutionSpec::with_form(c, k, stride, 1, groups, reduction, form, &mut self.rng)?;
        let reduce = match spec.reduce {
            Some(r) => {
                let w = self.params.add(format!("{name}.reduce.weight"), r.weight);
                Some((w, self.bn(&format!("{name}.reduce_bn"), r.bn.channels())?))
            }
            None => None,
        };
        Ok(Inv {
            name: name.to_string(),
            geom: InvolutionGeom {
                kernel: k,
                stride,
                dilation: 1,
                groups,
            },
            reduce,
            span_w: self
                .params
                .add(format!("{name}.span.weight"), spec.span_weight),
            span_b: self.params.add(format!("{name}.span.bias"), spec.span_bias),
        })
    }

    fn attn(&mut self, name: &str, c: usize, op: MiddleOp, stride: usize) -> Result<Attn> {
        let MiddleOp::Attention {
            window,
            heads,
            mode,
            softmax,
        } = op
        else {
            unreachable!("called for attention middles only")
        };
        let spec = AttentionSpec::new(c, window, heads, &mut self.rng)?;
        let wq = self.params.add(format!("{name}.q.weight"), spec.wq);
        let (wk, table) = match mode {
            AttentionMode::Content => (
                Some(self.params.add(format!("{name}.k.weight"), spec.wk)),
                None,
            ),
            AttentionMode::Position => {
                let t = spec.position.expect("constructed with a table");
                (None, Some(self.params.add(format!("{name}.position"), t)))
            }
        };
        Ok(Attn {
            window,
            heads,
            mode,
            softmax,
            stride,
            wq,
            wk,
            wv: self.params.add(format!("{name}.v.weight"), spec.wv),
            table,
        })
    }

    fn block(&mut self, b: &BlockSpec) -> Result<Block> {
        let n = &b.name;
        let mid = b.mid_ch;
        let conv1 = self.conv(&format!("{n}.conv1"), b.in_ch, mid, 1, 1, 1)?;
        let bn1 = self.bn(&format!("{n}.bn1"), mid)?;
        let mname = format!("{n}.conv2");
        let middle = match b.middle {
            MiddleOp::Conv3x3 => Middle::Conv(self.conv(&mname, mid, mid, 3, b.stride, 1)?),
            MiddleOp::Depthwise3x3 => Middle::Conv(self.conv(&mname, mid, mid, 3, b.stride, mid)?),
            MiddleOp::Involution {
                kernel,
                group_channels,
                reduction,
                form,
            } => Middle::Inv(self.inv(
                &mname,
                mid,
                kernel,
                b.stride,
                group_channels.groups(mid),
                reduction,
                form,
            )?),
            op @ MiddleOp::Attention { .. } => Middle::Attn(self.attn(&mname, mid, op, b.stride)?),
        };
        let bn2 = self.bn(&format!("{n}.bn2"), mid)?;
        let conv3 = self.conv(&format!("{n}.conv3"), mid, b.out_ch, 1, 1, 1)?;
        let bn3 = self.bn(&format!("{n}.bn3"), b.out_ch)?;
        let shortcut = if b.projection {
            Some((
                self.conv(
                    &format!("{n}.downsample"),
                    b.in_ch,
                    b.out_ch,
                    1,
                    b.stride,
                    1,
                )?,
                self.bn(&format!("{n}.downsample_bn"), b.out_ch)?,
            ))
        } else {
            None
        };
        Ok(Block {
            name: n.clone(),
            conv1,
            bn1,
            middle,
            bn2,
            conv3,
            bn3,
            shortcut,
        })
    }
}

/// Per-pass recording state.
struct Pass<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    running: &'a [BatchNormState],
    mode: BnMode,
    updates: Vec<BnUpdate>,
    kernels: Vec<(String, Var)>,
    stop_at: Option<&'a str>,
}

impl Pass<'_> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    fn fixed(&self, bn: &Bn) -> Option<(Vec<f64>, Vec<f64>)> {
        let s = &self.running[bn.state];
        (self.mode == BnMode::Eval).then(|| {
            (
                s.running_mean.data().to_vec(),
                s.running_var.data().to_vec(),
            )
        })
    }

    fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let w = self.p(c.w);
        self.tape.conv2d(x, w, c.window, c.groups)
    }

    fn bn(&mut self, x: Var, bn: &Bn) -> Result<Var> {
        let (g, b) = (self.p(bn.gamma), self.p(bn.beta));
        let fixed = self.fixed(bn);
        let (y, mean, var) = self
            .tape
            .batch_norm(x, g, b, self.running[bn.state].eps, fixed)?;
        if self.mode == BnMode::Train {
            let (b, _, h, w) = self.tape.value(x).dims4("batch_norm")?;
            self.updates.push(BnUpdate {
                state: bn.state,
                mean,
                var,
                count: b * h * w,
            });
        }
        Ok(y)
    }

    fn bn_relu(&mut self, x: Var, bn: &Bn) -> Result<Var> {
        let y = self.bn(x, bn)?;
        self.tape.relu(y)
    }

    /// True once the requested layer has been captured.
    fn inv(&mut self, x: Var, inv: &Inv) -> Result<(Var, bool)> {
        let reduce = inv.reduce.as_ref().map(|(w, bn)| ReduceVars {
            weight: self.p(*w),
            gamma: self.p(bn.gamma),
            beta: self.p(bn.beta),
        });
        let vars = InvolutionVars {
            reduce,
            span_weight: self.p(inv.span_w),
            span_bias: self.p(inv.span_b),
        };
        let (eps, fixed) = match &inv.reduce {
            Some((_, bn)) => (self.running[bn.state].eps, self.fixed(bn)),
            None => (1e-5, None),
        };
        let trace = involution_on_tape(self.tape, x, inv.geom, vars, eps, fixed)?;
        if let (Some((_, bn)), Some((mean, var, count))) = (&inv.reduce, trace.bn_stats) {
            self.updates.push(BnUpdate {
                state: bn.state,
                mean,
                var,
                count,
            });
        }
        self.kernels.push((inv.name.clone(), trace.kernel));
        Ok((trace.output, self.stop_at == Some(inv.name.as_str())))
    }

    fn attn(&mut self, x: Var, a: &Attn) -> Result<Var> {
        let wq = self.p(a.wq);
        let vars = AttentionVars {
            wq,
            wk: a.wk.map_or(wq, |id| self.p(id)),
            wv: self.p(a.wv),
            table: a.table.map(|id| self.p(id)),
        };
        let (_, out) = attention_on_tape(self.tape, x, a.window, a.heads, a.mode, a.softmax, vars)?;
        self.tape.avg_pool(out, a.stride)
    }

    fn stem(&mut self, x: Var, stem: &Stem) -> Result<(Var, bool)> {
        let y = match stem {
            Stem::Conv7 { conv, bn } => {
                let y = self.conv(x, conv)?;
                self.bn_relu(y, bn)?
            }
            Stem::Inv {
                conv1,
                bn1,
                inv,
                bn2,
                conv2,
                bn3,
            } => {
                let y = self.conv(x, conv1)?;
                let y = self.bn_relu(y, bn1)?;
                let (y, done) = self.inv(y, inv)?;
                if done {
                    return Ok((y, true));
                }
                let y = self.bn_relu(y, bn2)?;
                let y = self.conv(y, conv2)?;
                self.bn_relu(y, bn3)?
            }
        };
        Ok((self.tape.max_pool(y, 3, 2)?, false))
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<(Var, bool)> {
        let y = self.conv(x, &b.conv1)?;
        let y = self.bn_relu(y, &b.bn1)?;
        let y = match &b.middle {
            Middle::Conv(c) => self.conv(y, c)?,
            Middle::Inv(inv) => {
                let (y, done) = self.inv(y, inv)?;
                if done {
                    return Ok((y, true));
                }
                y
            }
            Middle::Attn(a) => self.attn(y, a)?,
        };
        let y = self.bn_relu(y, &b.bn2)?;
        let y = self.conv(y, &b.conv3)?;
        let y = self.bn(y, &b.bn3)?;
        let skip = match &b.shortcut {
            Some((c, bn)) => {
                let s = self.conv(x, c)?;
                self.bn(s, bn)?
            }
            None => x,
        };
        let sum = self.tape.add(y, skip)?;
        Ok((self.tape.relu(sum)?, false))
    }
}

impl Model {
    /// Instantiates every parameter from `seed`: Kaiming-normal convolutions,
    /// unit/zero batch norms and a small-normal classifier.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            running: Vec::new(),
            bn_names: Vec::new(),
            rng: Prng::new(seed),
        };
        let st = &arch.stem;
        let stem = match st.variant {
            StemVariant::Conv7 => Stem::Conv7 {
                conv: b.conv("stem.conv1", st.in_channels, st.out_channels, 7, 2, 1)?,
                bn: b.bn("stem.bn1", st.out_channels)?,
            },
            StemVariant::InvStem => {
                let h = st.hidden_channels();
                let g = GroupChannels::Channels(st.group_channels).groups(h);
                Stem::Inv {
                    conv1: b.conv("stem.conv1", st.in_channels, h, 3, 2, 1)?,
                    bn1: b.bn("stem.bn1", h)?,
                    inv: b.inv(
                        "stem.inv",
                        h,
                        3,
                        1,
                        g,
                        st.reduction,
                        KernelGenForm::Bottleneck,
                    )?,
                    bn2: b.bn("stem.bn2", h)?,
                    conv2: b.conv("stem.conv2", h, st.out_channels, 3, 1, 1)?,
                    bn3: b.bn("stem.bn3", st.out_channels)?,
                }
            }
        };
        let blocks = arch
            .blocks()
            .iter()
            .map(|s| b.block(s))
            .collect::<Result<Vec<_>>>()?;
        let f = arch.feature_channels();
        let fc_w = b.params.add(
            "fc.weight",
            Tensor::randn(&[arch.num_classes, f], 0.01, &mut b.rng)?,
        );
        let fc_b = b.params.add("fc.bias", Tensor::zeros(&[arch.num_classes])?);
        Ok(Self {
            arch: arch.clone(),
            params: b.params,
            running: b.running,
            bn_names: b.bn_names,
            mode: BnMode::Train,
            stem,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
        for s in &mut self.running {
            s.mode = mode;
        }
    }

    /// Batch-norm running statistics as `(name, mean, var)`.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.bn_names
            .iter()
            .zip(&self.running)
            .map(|(n, s)| (n.as_str(), &s.running_mean, &s.running_var))
    }

    pub fn set_running_stats(&mut self, name: &str, mean: Tensor, var: Tensor) -> Result<()> {
        let i = self
            .bn_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::LayerNotFound(name.into()))?;
        let s = &mut self.running[i];
        if mean.shape() != s.running_mean.shape() || var.shape() != s.running_var.shape() {
            return Err(mismatch(
                "set_running_stats",
                format!("{name}: wrong statistics shape"),
            ));
        }
        s.running_mean = mean;
        s.running_var = var;
        Ok(())
    }

    /// Names of every involution layer, in execution order.
    pub fn involution_layers(&self) -> Vec<&str> {
        let stem = match &self.stem {
            Stem::Inv { inv, .. } => Some(inv.name.as_str()),
            Stem::Conv7 { .. } => None,
        };
        stem.into_iter()
            .chain(self.blocks.iter().filter_map(|b| match &b.middle {
                Middle::Inv(inv) => Some(inv.name.as_str()),
                _ => None,
            }))
            .collect()
    }

    /// Resolves a block name such as `conv3_4` to its middle layer, and checks
    /// that the layer is an involution.
    pub fn resolve_involution(&self, layer: &str) -> Result<String> {
        let full = if self.blocks.iter().any(|b| b.name == layer) {
            format!("{layer}.conv2")
        } else {
            layer.to_string()
        };
        if self.involution_layers().contains(&full.as_str()) {
            return Ok(full);
        }
        let known = self.params.iter().any(|(_, p)| {
            p.name
                .strip_prefix(full.as_str())
                .is_some_and(|s| s.starts_with('.'))
        });
        if known {
            Err(Error::NotInvolution(layer.into()))
        } else {
            Err(Error::LayerNotFound(layer.into()))
        }
    }

    fn find_inv(&self, full: &str) -> Option<&Inv> {
        if let Stem::Inv { inv, .. } = &self.stem {
            if inv.name == full {
                return Some(inv);
            }
        }
        self.blocks.iter().find_map(|b| match &b.middle {
            Middle::Inv(inv) if inv.name == full => Some(inv),
            _ => None,
        })
    }

    /// A standalone copy of one involution layer's current weights, usable
    /// with the tape-free operators in [`crate::nnops`].
    pub fn involution_spec(&self, layer: &str) -> Result<InvolutionSpec> {
        let full = self.resolve_involution(layer)?;
        let inv = self.find_inv(&full).expect("resolved above");
        let v = |id| self.params.value(id).clone();
        let reduce = inv.reduce.as_ref().map(|(w, bn)| {
            let mut state = self.running[bn.state].clone();
            state.gamma = v(bn.gamma);
            state.beta = v(bn.beta);
            ReduceStage {
                weight: v(*w),
                bn: state,
            }
        });
        let span_weight = v(inv.span_w);
        let channels = match &reduce {
            Some(r) => r.weight.shape()[1],
            None => span_weight.shape()[1],
        };
        let hidden = span_weight.shape()[1];
        Ok(InvolutionSpec {
            channels,
            kernel_size: inv.geom.kernel,
            stride: inv.geom.stride,
            dilation: inv.geom.dilation,
            groups: inv.geom.groups,
            reduction: if reduce.is_some() {
                channels / hidden
            } else {
                1
            },
            reduce,
            span_weight,
            span_bias: v(inv.span_b),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4("forward")?;
        let f = self.arch.reduction_factor();
        if c != self.arch.stem.in_channels || h % f != 0 || w % f != 0 {
            return Err(mismatch(
                "forward",
                format!(
                    "input {:?}: need {} channels and spatial size divisible by {f}",
                    x.shape(),
                    self.arch.stem.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass for input `x` on `tape` using the current
    /// batch-norm mode. Running statistics are left untouched.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        let mut pass = Pass {
            tape,
            params: &self.params,
            running: &self.running,
            mode: self.mode,
            updates: Vec::new(),
            kernels: Vec::new(),
            stop_at: None,
        };
        let logits = self.trunk(&mut pass, x)?.expect("no stop requested");
        Ok(ForwardOutput {
            logits,
            bn_updates: pass.updates,
            kernels: pass.kernels,
        })
    }

    /// Runs layers until the end, or until `pass.stop_at` is captured (None).
    fn trunk(&self, pass: &mut Pass<'_>, x: Var) -> Result<Option<Var>> {
        let (mut y, done) = pass.stem(x, &self.stem)?;
        if done {
            return Ok(None);
        }
        for b in &self.blocks {
            let (next, done) = pass.block(y, b)?;
            if done {
                return Ok(None);
            }
            y = next;
        }
        let pooled = pass.tape.global_avg_pool(y)?;
        let (w, b) = (pass.p(self.fc_w), pass.p(self.fc_b));
        Ok(Some(pass.tape.dense(pooled, w, b)?))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            self.running[u.state].update_running(&u.mean, &u.var, u.count);
        }
    }

    /// Logits for `x`. In train mode the batch statistics are folded into the
    /// running estimates.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.record(&mut tape, xv)?;
        self.apply_bn_updates(&out.bn_updates);
        Ok(tape.value(out.logits).clone())
    }

    /// Generated kernels `(B, G, K·K, H', W')` of one involution layer. The
    /// pass stops at that layer and running statistics are not updated.
    pub fn extract_kernels(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let full = self.resolve_involution(layer)?;
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut pass = Pass {
            tape: &mut tape,
            params: &self.params,
            running: &self.running,
            mode: self.mode,
            updates: Vec::new(),
            kernels: Vec::new(),
            stop_at: Some(&full),
        };
        self.trunk(&mut pass, xv)?;
        let (_, k) = pass
            .kernels
            .into_iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| Error::LayerNotFound(layer.into()))?;
        Ok(tape.value(k).clone())
    }
}
