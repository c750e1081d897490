//! Two-party secure neural-network inference where nonlinear activations
//! are evaluated through single-use masked lookup tables instead of garbled
//! circuits.
//!
//! The client holds an input, the server holds the model weights, and a
//! trusted dealer prepares per-inference correlated randomness: linear-layer
//! masks and shared activation tables. Online, every linear layer costs one
//! client-to-server message and every activation layer one simultaneous
//! exchange of 8 bytes per element in each direction.

pub mod field;
pub mod linear;
pub mod lookup;
pub mod model;
pub mod runtime;
pub mod sharing;
pub mod stats;
pub mod transport;
