//! Mamba2 blocks in dense and spiking modes and the byte-level language model
//! built from them.

mod block;
pub mod checkpoint;
mod clamp;
mod config;
mod model;
mod params;
mod sgc;

pub use block::{block_forward_graph, block_step, BlockGraphOut, BlockState, SgcOutputs, StepOutput};
pub use clamp::{clamp_channel_hook, clamp_mask, ClampMode, Site};
pub use config::{default_sgc_layers, Mamba2Config, Mode};
pub use model::{
    forward_graph, generate_greedy, model_forward, model_step, pooled_rate, ModelGraphOut, ModelState, ProjSite,
    SiteFire,
};
pub use params::{BlockParams, BoundBlock, BoundModel, LayerParams, ModelParams, SgcParams};
pub use sgc::{hidden_align_loss, hidden_align_loss_graph, sgc_forward, sgc_forward_graph};
