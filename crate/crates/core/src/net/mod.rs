//! The segmentation network: multi-scale pyramid, global (transformer) and
//! local (convolutional) enhancement branches, prediction heads, losses and
//! inference.

mod config;
mod forward;
mod model;
mod params;

pub use config::{Averaging, BranchMode, GemConfig, NetConfig, PyramidConfig};
pub use forward::{build_pyramid, fmu_merge, gem_branch, gem_stack, head, lem_branch, lem_stack};
pub use model::{
    combine_heads, forward_heads, loss_vars, pixel_loss, predict_mask, EpisodeInput, HeadLogits, HeadVars, LossReport,
    LossVars, Trfs,
};
pub use params::{BranchParams, GemParams, HeadParams, LemParams, ScaleParams, TrfsParams};
