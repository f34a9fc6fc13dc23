//! RedNet and ResNet bottleneck architectures: declarative specs, analytic
//! cost counting, and an executable model.

mod arch;
mod cost;
mod model;

pub use arch::{
    build_rednet, rednet_toy, stage_blocks, ArchSpec, BlockSpec, GroupChannels, MiddleOp,
    RedNetOptions, StageSpec, StemSpec, StemVariant, SUPPORTED_DEPTHS,
};
pub use cost::{count_macs, count_params, layer_cost, profile, CostReport, CostRow, MacConvention};
pub use model::{BnUpdate, ForwardOutput, Model};
