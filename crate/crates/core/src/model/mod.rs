//! Network definition, parameters and checkpoint container.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod ops;
pub mod params;

pub use attention::{scaled_dot_product_attention, Attention};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PosteriorInput, Precision, Variant};
pub use network::{
    DecoderOutputs, ForwardOutputs, Fusion, Observed, OutcomeLogits, PosteriorParams, Predictions, TltModel,
    VARIANCE_FLOOR,
};
pub use params::ParameterStore;
