//! Learns per-pixel vulnerability maps for adversarial attacks, composes
//! sparse masked adversarial examples from FGSM/PGD/JSMA source attacks,
//! and evaluates attack strength and detectability against a
//! detector-protected CNN classifier.

pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod vulnmap;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{AdamState, Tape, Var};
