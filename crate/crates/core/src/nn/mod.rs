//! Parameters, layers, optimiser, and checkpoints.

mod checkpoint;
mod layers;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST, CHECKPOINT_WEIGHTS};
pub use layers::{Builder, ChannelMlp, Ctx, LayerNorm, Linear, LN_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
