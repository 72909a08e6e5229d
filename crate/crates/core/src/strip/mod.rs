//! Strip-convolution building blocks and the backbone built from them.

pub mod accounting;
pub mod backbone;
pub mod block;
pub mod module;
pub mod receptive;

pub use accounting::{
    count_parameters, estimate_flops, layer_costs, reference_cost, strip_module_params, LayerCost, ReferenceCost,
    FLOPS_TOLERANCE, PARAM_TOLERANCE,
};
pub use backbone::{stripnet_forward, BackboneState, Stage, VariantConfig, PRESET_NAMES};
pub use block::{BasicBlock, BlockCtx, FfnSubBlock, StripSubBlock};
pub use module::{
    strip_module_forward, strip_module_variant_forward, ModuleDesign, StripModuleParams, StripOrder,
};
pub use receptive::{receptive_field_map, Probe, SupportMask};
