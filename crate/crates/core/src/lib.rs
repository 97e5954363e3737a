//! Speech transformer with a shared-weight bidirectional decoder.
//!
//! One decoder parameter set is driven by two start tokens, `<L2R>` and
//! `<R2L>`, and learns to emit the transcript in both directions. Decoding
//! splits the beam across the two directions and keeps whichever finished
//! hypothesis scores best.
//!
//! The crate is self-contained: [`tensor`] provides the reverse-mode autodiff
//! everything else is built on.

pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod model;
pub mod numfmt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
