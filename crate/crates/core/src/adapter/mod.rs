//! The adapter model: shared token projection, class token, transformer
//! encoder and linear head.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::AdapterConfig;
pub use model::{
    decays, param_group, AdapterParams, ParamCounts, ParamGroup, INIT_STD, LAYER_NORM_EPS,
};
pub(crate) use model::argmax;

#[cfg(test)]
mod tests;
