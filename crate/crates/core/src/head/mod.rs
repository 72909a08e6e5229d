//! Decoupled detection head with shared classification/angle FCs and a
//! strip-module localization branch.

pub mod layout;
pub mod loss;
pub mod params;

pub use layout::{BranchKind, BranchTarget, HeadLayout, ALL_LAYOUTS};
pub use loss::{detection_loss, smooth_l1, smooth_l1_grad, HeadTarget, LossReport, LossWeights, SMOOTH_L1_BETA};
pub use params::{
    strip_head_backward, strip_head_forward, Branch, HeadConfig, HeadOutputs, HeadVars, StripHeadParams,
    FC_DIM, ROI_CHANNELS, ROI_GRID,
};
