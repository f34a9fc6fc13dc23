use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{AttentionMode, KernelGenForm};

pub const SUPPORTED_DEPTHS: [usize; 5] = [26, 38, 50, 101, 152];

/// Bottleneck blocks per stage for each supported depth.
pub fn stage_blocks(depth: usize) -> Result<[usize; 4]> {
    Ok(match depth {
        26 => [1, 2, 4, 1],
        38 => [2, 3, 5, 2],
        50 => [3, 4, 6, 3],
        101 => [3, 4, 23, 3],
        152 => [3, 8, 36, 3],
        d => return Err(Error::UnsupportedDepth(d)),
    })
}

/// How many channels share one involution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupChannels {
    /// `G = C / n`, at least 1.
    Channels(usize),
    /// A single kernel for every channel.
    All,
}

impl GroupChannels {
    pub fn groups(self, channels: usize) -> usize {
        match self {
            GroupChannels::Channels(n) => (channels / n.max(1)).max(1),
            GroupChannels::All => 1,
        }
    }
}

/// The spatial operator at the bottleneck position of each block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MiddleOp {
    Involution {
        kernel: usize,
        group_channels: GroupChannels,
        reduction: usize,
        form: KernelGenForm,
    },
    Conv3x3,
    Depthwise3x3,
    Attention {
        window: usize,
        heads: usize,
        mode: AttentionMode,
        softmax: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemVariant {
    /// 7×7 convolution, stride 2.
    Conv7,
    /// 3×3 conv stride 2 to half width, 3×3 involution, 3×3 conv to full width.
    InvStem,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub variant: StemVariant,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Involution settings for the inv stem; its kernel is 3×3.
    pub group_channels: usize,
    pub reduction: usize,
}

impl StemSpec {
    pub fn hidden_channels(&self) -> usize {
        self.out_channels / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    /// Bottleneck (middle) width; the stage outputs four times this.
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Nominal input resolution used for cost reports.
    pub input_size: usize,
    pub num_classes: usize,
    pub middle: MiddleOp,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

/// One expanded bottleneck block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    /// `conv{stage}_{block}`, both counted from 1 over the four trunk stages.
    pub name: String,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub middle: MiddleOp,
    pub stride: usize,
    /// 1×1 strided projection on the shortcut instead of identity.
    pub projection: bool,
}

pub const EXPANSION: usize = 4;

impl ArchSpec {
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut in_ch = self.stem.out_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let out_ch = EXPANSION * stage.width;
                out.push(BlockSpec {
                    name: format!("conv{}_{}", si + 1, bi + 1),
                    in_ch,
                    mid_ch: stage.width,
                    out_ch,
                    middle: self.middle,
                    stride,
                    projection: stride != 1 || in_ch != out_ch,
                });
                in_ch = out_ch;
            }
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.out_channels, |s| EXPANSION * s.width)
    }

    /// Total downsampling factor: stem (2), max pool (2), stage strides.
    pub fn reduction_factor(&self) -> usize {
        4 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.iter().any(|s| s.blocks == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.stages.iter().any(|s| !matches!(s.stride, 1 | 2)) {
            return Err(Error::Config("stage strides must be 1 or 2".into()));
        }
        match self.middle {
            MiddleOp::Involution { kernel, .. } | MiddleOp::Attention { window: kernel, .. }
                if kernel % 2 == 0 =>
            {
                Err(Error::EvenKernel(kernel))
            }
            _ => Ok(()),
        }
    }

    /// Key = value text with one table per stage.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("arch specs always serialise")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let arch: ArchSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedNetOptions {
    pub stem: StemVariant,
    pub middle: MiddleOp,
    pub num_classes: usize,
}

impl RedNetOptions {
    pub fn involution(kernel: usize, group_channels: GroupChannels, reduction: usize) -> MiddleOp {
        MiddleOp::Involution {
            kernel,
            group_channels,
            reduction,
            form: KernelGenForm::Bottleneck,
        }
    }
}

impl Default for RedNetOptions {
    /// 7×7 involution, 16 channels per group, reduction 4, involution stem.
    fn default() -> Self {
        Self {
            stem: StemVariant::InvStem,
            middle: Self::involution(7, GroupChannels::Channels(16), 4),
            num_classes: 1000,
        }
    }
}

fn name_for(depth: usize, middle: &MiddleOp) -> String {
    let family = match middle {
        MiddleOp::Involution { .. } => "rednet",
        MiddleOp::Conv3x3 => "resnet",
        MiddleOp::Depthwise3x3 => "resnet-dw",
        MiddleOp::Attention { .. } => "sa-resnet",
    };
    format!("{family}-{depth}")
}

/// ImageNet-scale network of the given depth. `Conv3x3` as the middle op
/// yields the ResNet baseline.
pub fn build_rednet(depth: usize, opts: RedNetOptions) -> Result<ArchSpec> {
    let blocks = stage_blocks(depth)?;
    let widths = [64, 128, 256, 512];
    let arch = ArchSpec {
        name: name_for(depth, &opts.middle),
        input_size: 224,
        num_classes: opts.num_classes,
        middle: opts.middle,
        stem: StemSpec {
            variant: opts.stem,
            in_channels: 3,
            out_channels: 64,
            group_channels: 16,
            reduction: 4,
        },
        stages: blocks
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&n, w))| StageSpec {
                blocks: n,
                width: w,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect(),
    };
    arch.validate()?;
    Ok(arch)
}

/// Desk-scale RedNet: one block per stage, widths 16..128, 32×32 inputs.
pub fn rednet_toy(num_classes: usize, middle: MiddleOp, stem: StemVariant) -> ArchSpec {
    ArchSpec {
        name: "rednet-toy".into(),
        input_size: 32,
        num_classes,
        middle,
        stem: StemSpec {
            variant: stem,
            in_channels: 3,
            out_channels: 16,
            group_channels: 4,
            reduction: 4,
        },
        stages: [16, 32, 64, 128]
            .iter()
            .enumerate()
            .map(|(i, &w)| StageSpec {
                blocks: 1,
                width: w,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_fifty_layout() {
        let arch = build_rednet(50, RedNetOptions::default()).unwrap();
        let blocks = arch.blocks();
        assert_eq!(blocks.len(), 16);
        let mids: Vec<usize> = blocks.iter().map(|b| b.mid_ch).collect();
        let mut want = vec![64; 3];
        want.extend([128; 4]);
        want.extend([256; 6]);
        want.extend([512; 3]);
        assert_eq!(mids, want);
        assert_eq!(3 * blocks.len() + 2, 50);
        assert_eq!(blocks[3].name, "conv2_1");
        assert_eq!(blocks[10].name, "conv3_4");
        assert_eq!(blocks[10].mid_ch, 256);
        assert!(blocks.iter().all(|b| b.out_ch == 4 * b.mid_ch));
    }

    #[test]
    fn depth_formula() {
        for d in SUPPORTED_DEPTHS {
            let arch = build_rednet(d, RedNetOptions::default()).unwrap();
            assert_eq!(3 * arch.blocks().len() + 2, d);
        }
        assert!(matches!(
            build_rednet(33, RedNetOptions::default()),
            Err(Error::UnsupportedDepth(33))
        ));
    }

    #[test]
    fn widths_double() {
        let arch = build_rednet(101, RedNetOptions::default()).unwrap();
        let w: Vec<usize> = arch.stages.iter().map(|s| s.width).collect();
        assert_eq!(w, [64, 128, 256, 512]);
        let toy = rednet_toy(4, RedNetOptions::default().middle, StemVariant::Conv7);
        assert!(toy.stages.windows(2).all(|p| p[1].width == 2 * p[0].width));
    }

    #[test]
    fn projection_shortcuts() {
        let arch = build_rednet(26, RedNetOptions::default()).unwrap();
        let proj: Vec<bool> = arch.blocks().iter().map(|b| b.projection).collect();
        assert_eq!(proj, [true, true, false, true, false, false, false, true]);
    }

    #[test]
    fn text_roundtrip() {
        let arch = build_rednet(38, RedNetOptions::default()).unwrap();
        let text = arch.to_text();
        assert!(text.contains("[[stages]]"));
        assert!(text.contains("blocks = 2"));
        assert_eq!(ArchSpec::from_text(&text).unwrap(), arch);
        let mut toy = rednet_toy(
            4,
            MiddleOp::Attention {
                window: 3,
                heads: 2,
                mode: AttentionMode::Position,
                softmax: true,
            },
            StemVariant::InvStem,
        );
        toy.middle = MiddleOp::Involution {
            kernel: 3,
            group_channels: GroupChannels::All,
            reduction: 1,
            form: KernelGenForm::Linear,
        };
        assert_eq!(ArchSpec::from_text(&toy.to_text()).unwrap(), toy);
    }

    #[test]
    fn group_semantics() {
        assert_eq!(GroupChannels::Channels(16).groups(256), 16);
        assert_eq!(GroupChannels::Channels(16).groups(8), 1);
        assert_eq!(GroupChannels::Channels(1).groups(64), 64);
        assert_eq!(GroupChannels::All.groups(512), 1);
    }
}
