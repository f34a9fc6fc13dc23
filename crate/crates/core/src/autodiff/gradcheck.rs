//! Central-difference certification of gradient rules.
//!
//! Each check draws random inputs, projects the op output onto a random
//! direction `w` so the loss is `Σ w ⊙ f(x)`, and compares the analytic
//! gradient of every input element against
//! `(L(x + ε) − L(x − ε)) / 2ε`. The error for one element is
//! `|analytic − numeric| / max(1, |analytic|, |numeric|)`.

use crate::autodiff::graph::{
    attention_on_tape, involution_on_tape, AttentionVars, InvolutionGeom, InvolutionVars,
    ReduceVars,
};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::nnops::{AttentionMode, Window};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Smallest distance from a relu kink accepted when sampling inputs.
const KINK_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub input: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub const CSV_HEADER: &'static str = "op,input,max_rel_err,pass";

    /// One `op,input,max_rel_err,pass` row per input.
    pub fn csv_rows(&self) -> String {
        self.inputs
            .iter()
            .map(|i| format!("{},{},{:.3e},{}\n", self.op, i.input, i.max_rel_err, i.pass))
            .collect()
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<(String, Tensor)>,
    build: Build,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn projected_loss(build: &Build, inputs: &[Tensor], w: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).mul(w)?.sum())
}

/// Checks an arbitrary graph built by `build` from leaves holding `inputs`.
pub fn check_closure(
    op: &str,
    inputs: Vec<(String, Tensor)>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    eps: f64,
    tol: f64,
    rng: &mut Prng,
) -> Result<GradCheckReport> {
    run_case(
        op,
        Case {
            inputs,
            build: Box::new(build),
        },
        eps,
        tol,
        rng,
    )
}

fn run_case(op: &str, case: Case, eps: f64, tol: f64, rng: &mut Prng) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let values: Vec<Tensor> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let w = Tensor::randn(tape.value(out).shape(), 1.0, rng)?;
    let wv = tape.leaf(w.clone());
    let proj = tape.mul(out, wv)?;
    let loss = tape.sum(proj)?;
    let grads = tape.backward(loss)?;

    let mut reports = Vec::with_capacity(values.len());
    for (i, (name, _)) in case.inputs.iter().enumerate() {
        let zero = Tensor::zeros(values[i].shape())?;
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        let mut worst: f64 = 0.0;
        for j in 0..values[i].len() {
            let mut probe = values.clone();
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = projected_loss(&case.build, &probe, &w)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = projected_loss(&case.build, &probe, &w)?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
        reports.push(InputReport {
            input: name.clone(),
            max_rel_err: worst,
            pass: worst < tol,
        });
    }
    let max_rel_err = reports.iter().fold(0.0, |m: f64, r| m.max(r.max_rel_err));
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err,
        tol,
        pass: max_rel_err < tol,
        inputs: reports,
    })
}

/// Names accepted by [`grad_check`].
pub fn registered_checks() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "scale",
        "relu",
        "sum",
        "matmul",
        "reshape",
        "permute",
        "conv2d",
        "conv2d_strided_grouped",
        "depthwise_conv2d",
        "unfold",
        "avg_pool2d",
        "max_pool2d",
        "global_avg_pool",
        "linear_1x1",
        "batch_norm",
        "batch_norm_eval",
        "softmax",
        "dense",
        "cross_entropy",
        "involution_mac",
        "kernel_generate",
        "involution",
        "involution_strided",
        "involution_linear",
        "content_affinity",
        "position_affinity",
        "local_self_attention",
        "local_self_attention_position",
    ]
}

fn default_shapes(op: &str) -> Vec<Vec<usize>> {
    let v = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect();
    match op {
        "add" | "sub" | "mul" => v(&[&[2, 3], &[2, 3]]),
        "scale" | "sum" => v(&[&[4, 3]]),
        "relu" => v(&[&[3, 4]]),
        "matmul" => v(&[&[3, 4], &[4, 2]]),
        "reshape" => v(&[&[2, 6]]),
        "permute" => v(&[&[2, 3, 4]]),
        "conv2d" => v(&[&[2, 3, 5, 5], &[4, 3, 3, 3]]),
        "conv2d_strided_grouped" => v(&[&[1, 4, 6, 6], &[4, 2, 3, 3]]),
        "depthwise_conv2d" => v(&[&[1, 3, 5, 5], &[3, 1, 3, 3]]),
        "unfold" => v(&[&[1, 2, 5, 5]]),
        "avg_pool2d" => v(&[&[1, 2, 4, 4]]),
        "max_pool2d" => v(&[&[1, 2, 6, 6]]),
        "global_avg_pool" => v(&[&[2, 3, 3, 3]]),
        "linear_1x1" => v(&[&[2, 3, 3, 3], &[4, 3], &[4]]),
        "batch_norm" | "batch_norm_eval" => v(&[&[2, 3, 3, 3]]),
        "softmax" => v(&[&[2, 5, 3]]),
        "dense" => v(&[&[3, 5], &[4, 5], &[4]]),
        "cross_entropy" => v(&[&[3, 4]]),
        "involution_mac" => v(&[&[1, 4, 5, 5], &[1, 2, 9, 5, 5]]),
        "kernel_generate" | "involution" | "involution_linear" => v(&[&[1, 8, 5, 5]]),
        "involution_strided" => v(&[&[1, 8, 6, 6]]),
        "content_affinity" => v(&[&[1, 4, 4, 4], &[1, 4, 4, 4]]),
        "position_affinity" => v(&[&[1, 4, 4, 4], &[9, 2]]),
        "local_self_attention" | "local_self_attention_position" => v(&[&[1, 4, 4, 4]]),
        _ => vec![],
    }
}

fn named(names: &[&str], tensors: Vec<Tensor>) -> Vec<(String, Tensor)> {
    names.iter().map(|n| n.to_string()).zip(tensors).collect()
}

/// Values of magnitude in `[0.1, 1)` with random sign.
fn away_from_zero(shape: &[usize], rng: &mut Prng) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 1.0);
        if rng.next_f64() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// A shuffled grid with spacing 0.05, so no max-pool window has ties.
fn distinct_values(shape: &[usize], rng: &mut Prng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape, vals)
}

fn involution_case(
    x_shape: &[usize],
    stride: usize,
    linear: bool,
    with_mac: bool,
    rng: &mut Prng,
) -> Result<Case> {
    let (c, k, g, r) = (x_shape[1], 3, 2, 2);
    let hidden = c / r;
    let span_in = if linear { c } else { hidden };
    let mut names = vec!["x"];
    let mut tensors = vec![Tensor::randn(x_shape, 1.0, rng)?];
    if !linear {
        names.extend(["reduce_weight", "bn_gamma", "bn_beta"]);
        tensors.push(Tensor::randn(&[hidden, c], 0.5, rng)?);
        tensors.push(Tensor::uniform(&[hidden], 0.5, 1.5, rng)?);
        tensors.push(Tensor::randn(&[hidden], 0.3, rng)?);
    }
    names.extend(["span_weight", "span_bias"]);
    tensors.push(Tensor::randn(&[k * k * g, span_in], 0.5, rng)?);
    tensors.push(Tensor::randn(&[k * k * g], 0.3, rng)?);
    let geom = InvolutionGeom {
        kernel: k,
        stride,
        dilation: 1,
        groups: g,
    };
    let build: Build = Box::new(move |t: &mut Tape, v: &[Var]| {
        let vars = if linear {
            InvolutionVars {
                reduce: None,
                span_weight: v[1],
                span_bias: v[2],
            }
        } else {
            InvolutionVars {
                reduce: Some(ReduceVars {
                    weight: v[1],
                    gamma: v[2],
                    beta: v[3],
                }),
                span_weight: v[4],
                span_bias: v[5],
            }
        };
        let trace = involution_on_tape(t, v[0], geom, vars, 1e-5, None)?;
        Ok(if with_mac { trace.output } else { trace.kernel })
    });
    Ok(Case {
        inputs: named(&names, tensors),
        build,
    })
}

fn attention_case(x_shape: &[usize], mode: AttentionMode, rng: &mut Prng) -> Result<Case> {
    let c = x_shape[1];
    let (heads, window) = (2, 3);
    let mut names = vec!["x", "wq", "wk", "wv"];
    let mut tensors = vec![
        Tensor::randn(x_shape, 1.0, rng)?,
        Tensor::randn(&[c, c], 0.5, rng)?,
        Tensor::randn(&[c, c], 0.5, rng)?,
        Tensor::randn(&[c, c], 0.5, rng)?,
    ];
    if mode == AttentionMode::Position {
        names.push("position_table");
        tensors.push(Tensor::randn(&[window * window, c / heads], 0.5, rng)?);
    }
    let build: Build = Box::new(move |t: &mut Tape, v: &[Var]| {
        let vars = AttentionVars {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            table: v.get(4).copied(),
        };
        Ok(attention_on_tape(t, v[0], window, heads, mode, true, vars)?.1)
    });
    Ok(Case {
        inputs: named(&names, tensors),
        build,
    })
}

fn make_case(op: &str, s: &[Vec<usize>], rng: &mut Prng) -> Result<Case> {
    let need = |n: usize| -> Result<()> {
        if s.len() < n {
            return Err(Error::Config(format!("{op} needs {n} input shapes")));
        }
        Ok(())
    };
    need(default_shapes(op).len())?;
    let randn = |shape: &[usize], rng: &mut Prng| Tensor::randn(shape, 1.0, rng);
    let simple = |names: &[&str], tensors: Vec<Tensor>, build: Build| Case {
        inputs: named(names, tensors),
        build,
    };
    Ok(match op {
        "add" | "sub" | "mul" => {
            let name = op.to_string();
            simple(
                &["a", "b"],
                vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
                Box::new(move |t, v| t.forward_named(&name, &[v[0], v[1]])),
            )
        }
        "scale" => simple(
            &["x"],
            vec![randn(&s[0], rng)?],
            Box::new(|t, v| t.scale(v[0], -2.5)),
        ),
        "relu" => simple(
            &["x"],
            vec![away_from_zero(&s[0], rng)?],
            Box::new(|t, v| t.relu(v[0])),
        ),
        "sum" => simple(
            &["x"],
            vec![randn(&s[0], rng)?],
            Box::new(|t, v| t.sum(v[0])),
        ),
        "matmul" => simple(
            &["a", "b"],
            vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "reshape" => {
            let n: usize = s[0].iter().product();
            simple(
                &["x"],
                vec![randn(&s[0], rng)?],
                Box::new(move |t, v| t.reshape(v[0], &[n])),
            )
        }
        "permute" => {
            let order: Vec<usize> = (0..s[0].len()).rev().collect();
            simple(
                &["x"],
                vec![randn(&s[0], rng)?],
                Box::new(move |t, v| t.permute(v[0], &order)),
            )
        }
        "conv2d" | "conv2d_strided_grouped" | "depthwise_conv2d" => {
            let (stride, groups) = match op {
                "conv2d" => (1, 1),
                "conv2d_strided_grouped" => (2, s[0][1] / s[1][1]),
                _ => (1, s[0][1]),
            };
            let win = Window::same(s[1][2], stride, 1)?;
            simple(
                &["x", "filters"],
                vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
                Box::new(move |t, v| t.conv2d(v[0], v[1], win, groups)),
            )
        }
        "unfold" => {
            let win = Window::same(3, 2, 1)?;
            simple(
                &["x"],
                vec![randn(&s[0], rng)?],
                Box::new(move |t, v| t.unfold(v[0], win)),
            )
        }
        "avg_pool2d" => simple(
            &["x"],
            vec![randn(&s[0], rng)?],
            Box::new(|t, v| t.avg_pool(v[0], 2)),
        ),
        "max_pool2d" => simple(
            &["x"],
            vec![distinct_values(&s[0], rng)?],
            Box::new(|t, v| t.max_pool(v[0], 3, 2)),
        ),
        "global_avg_pool" => simple(
            &["x"],
            vec![randn(&s[0], rng)?],
            Box::new(|t, v| t.global_avg_pool(v[0])),
        ),
        "linear_1x1" => simple(
            &["x", "w", "bias"],
            vec![randn(&s[0], rng)?, randn(&s[1], rng)?, randn(&s[2], rng)?],
            Box::new(|t, v| t.linear_1x1(v[0], v[1], Some(v[2]))),
        ),
        "batch_norm" | "batch_norm_eval" => {
            let c = s[0][1];
            let fixed = (op == "batch_norm_eval").then(|| {
                let mean: Vec<f64> = (0..c).map(|_| rng.normal() * 0.3).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
                (mean, var)
            });
            simple(
                &["x", "gamma", "beta"],
                vec![
                    randn(&s[0], rng)?.map(|v| 2.0 * v + 0.5),
                    Tensor::uniform(&[c], 0.5, 1.5, rng)?,
                    randn(&[c], rng)?,
                ],
                Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, fixed.clone())?.0)),
            )
        }
        "softmax" => simple(
            &["x"],
            vec![randn(&s[0], rng)?],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        "dense" => simple(
            &["x", "w", "bias"],
            vec![randn(&s[0], rng)?, randn(&s[1], rng)?, randn(&s[2], rng)?],
            Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        ),
        "cross_entropy" => {
            let (b, k) = (s[0][0], s[0][1]);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            simple(
                &["logits"],
                vec![randn(&s[0], rng)?],
                Box::new(move |t, v| t.cross_entropy(v[0], &labels, 0.1)),
            )
        }
        "involution_mac" => {
            let k = (s[1][2] as f64).sqrt() as usize;
            let win = Window::same(k, 1, 1)?;
            simple(
                &["x", "kernel"],
                vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
                Box::new(move |t, v| t.involution_mac(v[0], v[1], win)),
            )
        }
        "kernel_generate" => involution_case(&s[0], 1, false, false, rng)?,
        "involution" => involution_case(&s[0], 1, false, true, rng)?,
        "involution_strided" => involution_case(&s[0], 2, false, true, rng)?,
        "involution_linear" => involution_case(&s[0], 1, true, true, rng)?,
        "content_affinity" => {
            let win = Window::same(3, 1, 1)?;
            let heads = 2;
            simple(
                &["q", "k"],
                vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
                Box::new(move |t, v| {
                    t.forward(
                        crate::autodiff::Op::ContentAffinity { heads, window: win },
                        &[v[0], v[1]],
                    )
                }),
            )
        }
        "position_affinity" => {
            let window = (s[1][0] as f64).sqrt() as usize;
            let heads = s[0][1] / s[1][1];
            simple(
                &["q", "table"],
                vec![randn(&s[0], rng)?, randn(&s[1], rng)?],
                Box::new(move |t, v| {
                    t.forward(
                        crate::autodiff::Op::PositionAffinity { heads, window },
                        &[v[0], v[1]],
                    )
                }),
            )
        }
        "local_self_attention" => attention_case(&s[0], AttentionMode::Content, rng)?,
        "local_self_attention_position" => attention_case(&s[0], AttentionMode::Position, rng)?,
        other => return Err(Error::UnregisteredOp(other.to_string())),
    })
}

/// Gradient check of a registered op. Empty `shapes` selects the defaults.
/// Inputs are resampled until every relu on the graph sees inputs at least
/// `1e-3` from zero.
pub fn grad_check(
    op: &str,
    shapes: &[Vec<usize>],
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let shapes = if shapes.is_empty() {
        default_shapes(op)
    } else {
        shapes.to_vec()
    };
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = Prng::fork(seed, attempt);
        let case = make_case(op, &shapes, &mut rng)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = case
            .inputs
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        (case.build)(&mut tape, &vars)?;
        if tape.relu_margin() >= KINK_MARGIN {
            return run_case(op, case, eps, tol, &mut rng);
        }
    }
    Err(Error::Config(format!(
        "could not sample {op} inputs away from relu kinks"
    )))
}

/// Runs every registered check with default shapes.
pub fn grad_check_all(eps: f64, tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    registered_checks()
        .iter()
        .map(|op| grad_check(op, &[], eps, tol, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_away_from_kink() {
        let r = grad_check("relu", &[], 1e-5, 1e-6, 1).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn matmul_passes() {
        let r = grad_check("matmul", &[vec![3, 4], vec![4, 2]], 1e-5, 1e-5, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.inputs.len(), 2);
    }

    #[test]
    fn involution_composition_passes() {
        let r = grad_check("involution", &[vec![1, 8, 5, 5]], 1e-5, 1e-5, 3).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.inputs.len(), 6);
    }

    #[test]
    fn a_wrong_rule_is_caught() {
        let mut rng = Prng::new(4);
        let x = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
        // x ⊙ detached(x): the numeric derivative sees 2x, the tape only x.
        let r = check_closure(
            "broken",
            vec![("x".into(), x)],
            |t, v| {
                let c = t.leaf(t.value(v[0]).clone());
                t.mul(v[0], c)
            },
            1e-5,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn every_registered_op_passes() {
        for r in grad_check_all(1e-5, 1e-5, 11).unwrap() {
            assert!(r.pass, "{}: {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn eps_range_enforced() {
        assert!(grad_check("relu", &[], 1e-2, 1e-5, 1).is_err());
        assert!(matches!(
            grad_check("nope", &[vec![1]], 1e-5, 1e-5, 1),
            Err(Error::UnregisteredOp(_))
        ));
    }

    #[test]
    fn csv_rows_format() {
        let r = grad_check("add", &[], 1e-5, 1e-5, 1).unwrap();
        let rows = r.csv_rows();
        assert_eq!(rows.lines().count(), 2);
        assert!(rows.starts_with("add,a,"));
        assert!(rows.trim_end().ends_with("true"));
    }
}
