//! EfficientNet-B0 stage plans and the trainable network built from them.

mod network;
mod plan;

pub use network::{
    build, describe, param_count, Buffer, ForwardOutput, HeadPool, MbConv, MbConvBlock, Network,
    NetworkConfig, Param,
};
pub use plan::{default_b0_plan, DescribeRow, OperatorKind, Stage, StagePlan, B0_RESOLUTION};
