//! Transformer encoder trained as a masked language model.
//!
//! Everything is written from scratch on top of `ndarray`: pre-norm encoder
//! blocks with multi-head self-attention and a GELU feed-forward layer, a
//! learned 1-D sequence-position embedding, and an output head that is tied
//! to the token embedding by default. Gradients are computed by hand and
//! checked against finite differences in the tests.

mod checkpoint;
mod model;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{forward, loss_and_grads, masked_nll, predict_rows, MaskedExample};
pub use params::{LMConfig, LMParams, LayerParams, Profile};
pub use train::{mask_for_eval, mask_for_training, train, TrainConfig, TrainReport};
