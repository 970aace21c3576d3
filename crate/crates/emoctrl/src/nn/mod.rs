//! Minimal tape-based reverse-mode autodiff over `ndarray`.
//!
//! The engine is generic over [`Scalar`] so that training runs in `f32`
//! while gradient-correctness checks run at 64-bit precision. Graphs are
//! rebuilt every step: forward calls append nodes to a [`Tape`], `backward`
//! walks the tape in reverse id order (ids are already topologically
//! sorted because ops can only reference earlier nodes).

mod adam;
mod conv;
pub mod gradcheck;
mod init;
mod scalar;
mod tape;

pub use adam::Adam;
pub use init::{randn, randn_fan_in, zeros};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
