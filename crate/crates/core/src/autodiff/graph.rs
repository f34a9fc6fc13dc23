//! Composite subgraphs recorded from primitive tape ops.

use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::nnops::{AttentionMode, Window};

#[derive(Clone, Copy, Debug)]
pub struct ReduceVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles for an involution's generation weights.
#[derive(Clone, Copy, Debug)]
pub struct InvolutionVars {
    pub reduce: Option<ReduceVars>,
    pub span_weight: Var,
    pub span_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct InvolutionGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct InvolutionTrace {
    /// `(B, G, K·K, H_out, W_out)`
    pub kernel: Var,
    pub output: Var,
    /// Batch statistics applied by the generator's batch norm, with the
    /// element count per channel.
    pub bn_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

/// Records pool → reduce → BN → relu → span → multiply-add.
pub fn involution_on_tape(
    tape: &mut Tape,
    x: Var,
    geom: InvolutionGeom,
    vars: InvolutionVars,
    bn_eps: f64,
    bn_fixed: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<InvolutionTrace> {
    let window = Window::same(geom.kernel, geom.stride, geom.dilation)?;
    let (b, _, _, _) = tape.value(x).dims4("involution")?;
    let pooled = tape.avg_pool(x, geom.stride)?;
    let (hidden, bn_stats) = match vars.reduce {
        Some(r) => {
            let z = tape.linear_1x1(pooled, r.weight, None)?;
            let train = bn_fixed.is_none();
            let (n, mean, var) = tape.batch_norm(z, r.gamma, r.beta, bn_eps, bn_fixed)?;
            let (zb, _, zh, zw) = tape.value(z).dims4("involution")?;
            (tape.relu(n)?, train.then_some((mean, var, zb * zh * zw)))
        }
        None => (pooled, None),
    };
    let flat = tape.linear_1x1(hidden, vars.span_weight, Some(vars.span_bias))?;
    let (_, _, ho, wo) = tape.value(flat).dims4("involution")?;
    let kernel = tape.reshape(flat, &[b, geom.groups, geom.kernel * geom.kernel, ho, wo])?;
    let output = tape.involution_mac(x, kernel, window)?;
    Ok(InvolutionTrace {
        kernel,
        output,
        bn_stats,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub table: Option<Var>,
}

/// Records Q/K/V projections, affinities and the multiply-add over values.
/// Returns `(affinity, output)`.
pub fn attention_on_tape(
    tape: &mut Tape,
    x: Var,
    window: usize,
    heads: usize,
    mode: AttentionMode,
    softmax: bool,
    vars: AttentionVars,
) -> Result<(Var, Var)> {
    let win = Window::same(window, 1, 1)?;
    let q = tape.linear_1x1(x, vars.wq, None)?;
    let mut a = match (mode, vars.table) {
        (AttentionMode::Content, _) => {
            let k = tape.linear_1x1(x, vars.wk, None)?;
            tape.forward(
                crate::autodiff::Op::ContentAffinity { heads, window: win },
                &[q, k],
            )?
        }
        (AttentionMode::Position, Some(t)) => tape.forward(
            crate::autodiff::Op::PositionAffinity { heads, window },
            &[q, t],
        )?,
        (AttentionMode::Position, None) => {
            return Err(crate::Error::Config(
                "position mode needs a position table".into(),
            ))
        }
    };
    if softmax {
        a = tape.softmax(a, 2)?;
    }
    let v = tape.linear_1x1(x, vars.wv, None)?;
    let out = tape.involution_mac(v, a, win)?;
    Ok((a, out))
}
