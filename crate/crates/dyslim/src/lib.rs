//! Learning stable autoregressive surrogates of chaotic dynamical systems.
//!
//! The crate covers the whole pipeline at desk scale: ground-truth data
//! generation for the Lorenz 63 ODE and the Kuramoto–Sivashinsky PDE, MLP and
//! dilated-convolution steppers trained by one-step / curriculum / pushforward
//! objectives, an invariant-measure (MMD) regularizer that can be attached to
//! any of them, and a distributional evaluation suite (cosine similarity,
//! Sinkhorn divergence, spectra, covariance and time-correlation metrics).

pub mod autodiff;
pub mod dataio;
pub mod eval;
pub mod models;
pub mod metrics;
pub mod objectives;
pub mod systems;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, NodeId, ParamStore, Tape};
pub use tensor::Tensor;
