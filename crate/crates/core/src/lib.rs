//! SimpleTRON: a transformer whose attention drops the softmax and reorders the
//! q-k-v product as `Q (Kᵀ V) / √L`, making it linear in sequence length.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), both attention kinds ([`attention`]), the encoder and its
//! variants ([`model`]), AdamW training ([`optim`]), synthetic long-sequence
//! tasks ([`tasks`]), checkpoint transfer ([`transfer`]) and the scaling
//! benchmark plus diagnostics ([`bench`]).

pub mod attention;
pub mod bench;
mod error;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Rng, Tensor};
