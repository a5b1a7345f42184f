//! A small reverse-mode automatic differentiation engine on `f64` tensors,
//! plus the parameter store, optimizer, and network layers built on it.
//!
//! Everything runs on one thread over `ndarray`, which keeps training runs
//! bit-reproducible and lets the streaming inference path reuse the exact
//! arithmetic of the training graph.

pub mod check;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::ParamStore;
pub use tape::{Arr, Gradients, Tape, T};
