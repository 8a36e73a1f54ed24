//! From-scratch MLP with k-winner hidden layers, heterogeneous dropout and
//! projected SGD.

mod dropout;
mod kwinner;
mod mlp;
mod train;

pub use dropout::{retention_from_counts, DropoutKind, DropoutState};
pub use kwinner::{kwinner_forward, WinnerCount};
pub use mlp::{argmax, ForwardPass, LayerState, MlpModel, Mode, RetainMasks};
pub use train::{train_task, MaskGranularity, SgdConfig, TrainRngs, TrainStats};
