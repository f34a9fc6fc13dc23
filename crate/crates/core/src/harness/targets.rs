//! Published parameter and MAC totals, and the tolerance check against them.

use crate::error::Result;
use crate::nnops::KernelGenForm;
use crate::rednet::{
    build_rednet, profile, ArchSpec, CostReport, GroupChannels, MacConvention, MiddleOp,
    RedNetOptions, StemVariant,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PublishedTotal {
    pub sweep: &'static str,
    pub label: String,
    pub depth: usize,
    pub opts: RedNetOptions,
    /// Millions.
    pub params_m: f64,
    /// Billions.
    pub macs_g: f64,
}

impl PublishedTotal {
    pub fn arch(&self) -> Result<ArchSpec> {
        build_rednet(self.depth, self.opts)
    }
}

fn inv(kernel: usize, gc: GroupChannels, reduction: usize, form: KernelGenForm) -> MiddleOp {
    MiddleOp::Involution {
        kernel,
        group_channels: gc,
        reduction,
        form,
    }
}

fn opts(stem: StemVariant, middle: MiddleOp) -> RedNetOptions {
    RedNetOptions {
        stem,
        middle,
        num_classes: 1000,
    }
}

/// RedNet and ResNet at every supported depth.
pub fn depth_sweep() -> Vec<PublishedTotal> {
    let red = [
        (26, 9.2, 1.7),
        (38, 12.4, 2.2),
        (50, 15.5, 2.7),
        (101, 25.6, 4.7),
        (152, 34.0, 6.8),
    ];
    let res = [
        (26, 13.7, 2.4),
        (38, 19.6, 3.2),
        (50, 25.6, 4.1),
        (101, 44.6, 7.9),
        (152, 60.2, 11.6),
    ];
    let mut out = Vec::new();
    for (d, p, m) in red {
        out.push(PublishedTotal {
            sweep: "depth",
            label: format!("RedNet-{d}"),
            depth: d,
            opts: RedNetOptions::default(),
            params_m: p,
            macs_g: m,
        });
    }
    for (d, p, m) in res {
        out.push(PublishedTotal {
            sweep: "depth",
            label: format!("ResNet-{d}"),
            depth: d,
            opts: opts(StemVariant::Conv7, MiddleOp::Conv3x3),
            params_m: p,
            macs_g: m,
        });
    }
    out
}

/// RedNet-50 with the 7×7 convolution stem, varying one involution
/// setting at a time.
pub fn ablation_sweep() -> Vec<PublishedTotal> {
    use GroupChannels::{All, Channels};
    use KernelGenForm::{Bottleneck, Linear};
    let row = |sweep, label: &str, middle, p, m| PublishedTotal {
        sweep,
        label: label.to_string(),
        depth: 50,
        opts: opts(StemVariant::Conv7, middle),
        params_m: p,
        macs_g: m,
    };
    let mut out = Vec::new();
    for (k, p, m) in [
        (3, 14.7, 2.4),
        (5, 15.1, 2.5),
        (7, 15.5, 2.6),
        (9, 16.2, 2.7),
    ] {
        out.push(row(
            "kernel",
            &format!("K={k}"),
            inv(k, Channels(16), 4, Bottleneck),
            p,
            m,
        ));
    }
    for (gc, label, p, m) in [
        (Channels(1), "gc=1", 30.2, 5.0),
        (Channels(4), "gc=4", 18.5, 3.0),
        (Channels(16), "gc=16", 15.5, 2.6),
        (All, "gc=C", 14.6, 2.4),
    ] {
        out.push(row(
            "group-channels",
            label,
            inv(7, gc, 4, Bottleneck),
            p,
            m,
        ));
    }
    for (form, r, label, p, m) in [
        (Linear, 1, "single W", 18.1, 3.0),
        (Bottleneck, 1, "r=1", 19.4, 3.2),
        (Bottleneck, 4, "r=4", 15.5, 2.6),
        (Bottleneck, 16, "r=16", 14.6, 2.4),
    ] {
        out.push(row(
            "kernel-gen",
            label,
            inv(7, Channels(16), r, form),
            p,
            m,
        ));
    }
    out
}

pub fn all_targets() -> Vec<PublishedTotal> {
    let mut t = depth_sweep();
    t.extend(ablation_sweep());
    t
}

/// First published row whose architecture equals `arch`.
pub fn target_for(arch: &ArchSpec) -> Option<PublishedTotal> {
    all_targets().into_iter().find(|t| {
        t.arch()
            .map(|a| {
                a.stem == arch.stem
                    && a.stages == arch.stages
                    && a.middle == arch.middle
                    && a.num_classes == arch.num_classes
            })
            .unwrap_or(false)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetCheck {
    pub sweep: &'static str,
    pub label: String,
    pub params_m: f64,
    pub want_params_m: f64,
    /// Signed percent deviation.
    pub params_dev: f64,
    pub macs_g: f64,
    pub want_macs_g: f64,
    pub macs_dev: f64,
    pub params_ok: bool,
    pub macs_ok: bool,
}

impl TargetCheck {
    pub const CSV_HEADER: &'static str =
        "sweep,label,params_m,target_params_m,params_dev_pct,macs_g,target_macs_g,macs_dev_pct,pass";

    pub fn pass(&self) -> bool {
        self.params_ok && self.macs_ok
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{},{:.3},{:.4},{},{:.3},{}",
            self.sweep,
            self.label,
            self.params_m,
            self.want_params_m,
            self.params_dev,
            self.macs_g,
            self.want_macs_g,
            self.macs_dev,
            self.pass()
        )
    }
}

fn dev(got: f64, want: f64) -> f64 {
    (got - want) / want * 100.0
}

/// Compares a report against a target; tolerances are percentages.
pub fn check_report(
    report: &CostReport,
    target: &PublishedTotal,
    tol_params: f64,
    tol_macs: f64,
) -> TargetCheck {
    let (p, m) = (report.params_m(), report.macs_g());
    let (pd, md) = (dev(p, target.params_m), dev(m, target.macs_g));
    TargetCheck {
        sweep: target.sweep,
        label: target.label.clone(),
        params_m: p,
        want_params_m: target.params_m,
        params_dev: pd,
        macs_g: m,
        want_macs_g: target.macs_g,
        macs_dev: md,
        params_ok: pd.abs() <= tol_params,
        macs_ok: md.abs() <= tol_macs,
    }
}

/// Profiles every target at 224 and checks it.
pub fn check_targets(
    targets: &[PublishedTotal],
    convention: MacConvention,
    tol_params: f64,
    tol_macs: f64,
) -> Result<Vec<TargetCheck>> {
    targets
        .iter()
        .map(|t| {
            Ok(check_report(
                &profile(&t.arch()?, 224, convention)?,
                t,
                tol_params,
                tol_macs,
            ))
        })
        .collect()
}
