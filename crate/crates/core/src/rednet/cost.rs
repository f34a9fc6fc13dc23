use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, GroupChannels, MiddleOp, StemVariant};
use crate::error::{Error, Result};
use crate::nnops::{AttentionMode, KernelGenForm};

/// How the involution (and attention) aggregation `Σ H·X` is charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    /// One MAC per kernel tap per channel: `K²·C` per position.
    Fused,
    /// The broadcast multiply and the window sum counted as separate passes:
    /// `2·K²·C` per position.
    #[default]
    Unfused,
}

impl MacConvention {
    fn aggregation(self, k2: u64, c: u64) -> u64 {
        match self {
            MacConvention::Fused => k2 * c,
            MacConvention::Unfused => 2 * k2 * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub input_hw: usize,
    pub convention: MacConvention,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    fn from_rows(
        arch: &ArchSpec,
        input_hw: usize,
        convention: MacConvention,
        rows: Vec<CostRow>,
    ) -> Self {
        Self {
            arch: arch.name.clone(),
            input_hw,
            convention,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_macs: rows.iter().map(|r| r.macs).sum(),
            rows,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn macs_g(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Sum over rows whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub const CSV_HEADER: &'static str = "layer,name,params,macs";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", r.name, r.params, r.macs);
        }
        let _ = writeln!(
            out,
            "{},TOTAL,{},{}",
            self.rows.len(),
            self.total_params,
            self.total_macs
        );
        out
    }
}

struct Counter {
    convention: MacConvention,
    rows: Vec<CostRow>,
}

impl Counter {
    fn push(&mut self, name: String, params: usize, macs: usize) {
        self.rows.push(CostRow {
            name,
            params: params as u64,
            macs: macs as u64,
        });
    }

    fn conv(
        &mut self,
        name: String,
        ci: usize,
        co: usize,
        k: usize,
        groups: usize,
        pix_out: usize,
    ) {
        let p = k * k * ci * co / groups;
        self.push(name, p, p * pix_out);
    }

    fn bn(&mut self, name: String, c: usize) {
        self.push(name, 2 * c, 0);
    }

    #[allow(clippy::too_many_arguments)]
    fn involution(
        &mut self,
        name: String,
        c: usize,
        k: usize,
        groups: usize,
        reduction: usize,
        form: KernelGenForm,
        pix_out: usize,
    ) {
        let k2g = k * k * groups;
        let agg = self.convention.aggregation((k * k) as u64, c as u64) as usize;
        let (p, per_pos) = match form {
            KernelGenForm::Bottleneck => {
                let h = c / reduction;
                (c * h + 2 * h + h * k2g + k2g, c * h + h * k2g + agg)
            }
            KernelGenForm::Linear => (c * k2g + k2g, c * k2g + agg),
        };
        self.push(name, p, per_pos * pix_out);
    }

    fn attention(
        &mut self,
        name: String,
        c: usize,
        window: usize,
        heads: usize,
        mode: AttentionMode,
        pix_in: usize,
    ) {
        let k2 = window * window;
        let (proj, table) = match mode {
            AttentionMode::Content => (3 * c * c, 0),
            AttentionMode::Position => (2 * c * c, k2 * c / heads),
        };
        let agg = self.convention.aggregation(k2 as u64, c as u64) as usize;
        self.push(name, proj + table, (proj + k2 * c + agg) * pix_in);
    }

    fn middle(&mut self, name: String, op: MiddleOp, c: usize, pix_in: usize, pix_out: usize) {
        match op {
            MiddleOp::Conv3x3 => self.conv(name, c, c, 3, 1, pix_out),
            MiddleOp::Depthwise3x3 => self.conv(name, c, c, 3, c, pix_out),
            MiddleOp::Involution {
                kernel,
                group_channels,
                reduction,
                form,
            } => self.involution(
                name,
                c,
                kernel,
                group_channels.groups(c),
                reduction,
                form,
                pix_out,
            ),
            MiddleOp::Attention {
                window,
                heads,
                mode,
                ..
            } => self.attention(name, c, window, heads, mode, pix_in),
        }
    }
}

/// Per-layer parameter and MAC counts at `input_hw`. BN rows carry
/// parameters only; activations and pooling are free.
pub fn profile(arch: &ArchSpec, input_hw: usize, convention: MacConvention) -> Result<CostReport> {
    let factor = arch.reduction_factor();
    if input_hw == 0 || input_hw % factor != 0 {
        return Err(Error::Config(format!(
            "input resolution {input_hw} is not divisible by {factor}"
        )));
    }
    let mut c = Counter {
        convention,
        rows: Vec::new(),
    };
    let stem = &arch.stem;
    let mut hw = input_hw / 2;
    match stem.variant {
        StemVariant::Conv7 => {
            c.conv(
                "stem.conv1".into(),
                stem.in_channels,
                stem.out_channels,
                7,
                1,
                hw * hw,
            );
            c.bn("stem.bn1".into(), stem.out_channels);
        }
        StemVariant::InvStem => {
            let h = stem.hidden_channels();
            let g = GroupChannels::Channels(stem.group_channels).groups(h);
            c.conv("stem.conv1".into(), stem.in_channels, h, 3, 1, hw * hw);
            c.bn("stem.bn1".into(), h);
            c.involution(
                "stem.inv".into(),
                h,
                3,
                g,
                stem.reduction,
                KernelGenForm::Bottleneck,
                hw * hw,
            );
            c.bn("stem.bn2".into(), h);
            c.conv("stem.conv2".into(), h, stem.out_channels, 3, 1, hw * hw);
            c.bn("stem.bn3".into(), stem.out_channels);
        }
    }
    hw /= 2;
    for b in arch.blocks() {
        let hw_out = hw / b.stride;
        let (pix, pix_out) = (hw * hw, hw_out * hw_out);
        c.conv(format!("{}.conv1", b.name), b.in_ch, b.mid_ch, 1, 1, pix);
        c.bn(format!("{}.bn1", b.name), b.mid_ch);
        c.middle(
            format!("{}.conv2", b.name),
            b.middle,
            b.mid_ch,
            pix,
            pix_out,
        );
        c.bn(format!("{}.bn2", b.name), b.mid_ch);
        c.conv(
            format!("{}.conv3", b.name),
            b.mid_ch,
            b.out_ch,
            1,
            1,
            pix_out,
        );
        c.bn(format!("{}.bn3", b.name), b.out_ch);
        if b.projection {
            c.conv(
                format!("{}.downsample", b.name),
                b.in_ch,
                b.out_ch,
                1,
                1,
                pix_out,
            );
            c.bn(format!("{}.downsample_bn", b.name), b.out_ch);
        }
        hw = hw_out;
    }
    let f = arch.feature_channels();
    c.push(
        "fc".into(),
        f * arch.num_classes + arch.num_classes,
        f * arch.num_classes,
    );
    Ok(CostReport::from_rows(arch, input_hw, convention, c.rows))
}

/// Cost of one middle-position operator on a single `h×w` map with `c`
/// channels.
pub fn layer_cost(
    op: MiddleOp,
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    convention: MacConvention,
) -> CostRow {
    let mut counter = Counter {
        convention,
        rows: Vec::new(),
    };
    let pix_out = h.div_ceil(stride) * w.div_ceil(stride);
    counter.middle("layer".into(), op, c, h * w, pix_out);
    counter.rows.remove(0)
}

/// Parameter counts; the MAC column is evaluated at the arch's nominal input.
pub fn count_params(arch: &ArchSpec) -> CostReport {
    let hw = arch.input_size.max(arch.reduction_factor());
    let hw = hw - hw % arch.reduction_factor();
    profile(arch, hw, MacConvention::default()).expect("resolution rounded to the stride pyramid")
}

pub fn count_macs(arch: &ArchSpec, input_hw: usize) -> Result<CostReport> {
    profile(arch, input_hw, MacConvention::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rednet::{build_rednet, RedNetOptions};

    fn within(got: f64, want: f64, pct: f64) -> bool {
        ((got - want) / want).abs() * 100.0 <= pct
    }

    #[test]
    fn resnet50_reference() {
        let arch = build_rednet(
            50,
            RedNetOptions {
                stem: StemVariant::Conv7,
                middle: MiddleOp::Conv3x3,
                num_classes: 1000,
            },
        )
        .unwrap();
        let r = count_macs(&arch, 224).unwrap();
        // torchvision's published figure
        assert_eq!(r.total_params, 25_557_032);
        assert!(within(r.macs_g(), 4.1, 1.0));
    }

    #[test]
    fn single_layer_closed_form() {
        let mut c = Counter {
            convention: MacConvention::Fused,
            rows: vec![],
        };
        c.involution(
            "x".into(),
            256,
            7,
            16,
            4,
            KernelGenForm::Bottleneck,
            14 * 14,
        );
        assert_eq!(c.rows[0].params, 16384 + 50176 + 784 + 128);
        assert_eq!(c.rows[0].macs, 196 * (16384 + 64 * 784 + 49 * 256));
    }

    #[test]
    fn totals_are_row_sums_and_csv() {
        let arch = build_rednet(26, RedNetOptions::default()).unwrap();
        let r = count_params(&arch);
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        let csv = r.to_csv();
        let last = csv.lines().last().unwrap();
        assert_eq!(
            last,
            format!("{},TOTAL,{},{}", r.rows.len(), r.total_params, r.total_macs)
        );
        assert_eq!(csv.lines().next().unwrap(), "layer,name,params,macs");
    }

    #[test]
    fn fused_is_cheaper_by_the_aggregation() {
        let arch = build_rednet(50, RedNetOptions::default()).unwrap();
        let a = profile(&arch, 224, MacConvention::Fused).unwrap();
        let b = profile(&arch, 224, MacConvention::Unfused).unwrap();
        assert_eq!(a.total_params, b.total_params);
        assert!(b.total_macs > a.total_macs);
    }

    #[test]
    fn bad_resolution() {
        let arch = build_rednet(50, RedNetOptions::default()).unwrap();
        assert!(count_macs(&arch, 100).is_err());
        assert!(count_macs(&arch, 0).is_err());
        assert!(count_macs(&arch, 256).is_ok());
    }
}
