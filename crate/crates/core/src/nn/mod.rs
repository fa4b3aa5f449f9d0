//! Parameter storage, layer building blocks and parameter accounting.

mod layers;
mod params;
mod report;

pub use layers::{build_conv_block, BatchNorm, Conv, ConvBlock, ConvBnRelu, BN_EPS, BN_MOMENTUM};
pub use params::{Forward, Gradients, Mode, ParamEntry, ParamId, ParamKind, ParamStore};
pub use report::{count_params, CountBasis, LayerCount, ParamReport};
