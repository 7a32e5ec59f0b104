//! Desk-scale simulator for federated learning (FL), split federated
//! learning (SFL) and edge model overlays: extra layers trained on edge
//! servers from a replay cache of device activations, in parallel with FL,
//! and combined with the FL model as an ensemble at the end.

mod binio;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod linalg;
pub mod model_io;
pub mod nn;
pub mod overlay;
pub mod rng;
pub mod sfl;
pub mod simnet;
pub mod svcca;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{Activation, Dense, Gradients, LayerStack, SplitModel, Tape};
pub use tensor::Tensor;
