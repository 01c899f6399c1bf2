//! Normalization schemes, with and without GPAS, assembled into a model.

mod config;
mod model;
mod params;

pub use config::{GpasPosition, ModelConfig, Scheme, SchemeConfig};
pub use model::{ForwardOptions, ForwardOutput, LayerSlots, TransformerModel};
pub use params::{ParamEntry, ParamGroup, ParamStore};
