//! Residual 3-D backbones with optional STRF units.

mod attention;
mod checkpoint;
mod network;
mod spec;

pub use attention::{activation_energy, attention_export, write_pgm};
pub use checkpoint::MANIFEST;
pub use network::{
    batch_norm, count_params, param_specs, BnUpdate, ForwardOptions, ForwardOutput, Mode, Network, Param,
    ParamRole, ParamRow, ResidualBlock, ParamSpec, ParamTable, BN_EPS, BN_MOMENTUM,
};
pub use spec::{
    BlockSpec, BlockVariant, NetworkSpec, StageSpec, RESNET50_BLOCKS, RESNET50_STEM, RESNET50_WIDTHS,
    STAGE_STRIDES,
};
