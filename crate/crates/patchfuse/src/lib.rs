//! Weakly supervised semantic segmentation from image-level labels.
//!
//! The pipeline turns an image plus its set of present classes into
//! pixel-level pseudo masks:
//!
//! ```text
//! image ──patchify──▶ patch tokens ──transformer blocks──▶ P_out
//!        P_out + class token bank ──concat──▶ per-class streams
//!        streams ──bidirectional row/column recurrences──▶ fused features
//!        fused ──shared scorer──▶ patch score map Z ──top-k pool──▶ p
//!        p vs. labels ──multi-label cross entropy──▶ training signal
//!        Z ──upsample → background → argmax → dense CRF──▶ pseudo mask
//! ```
//!
//! Everything learnable is expressed in the [`tensor`] module's reverse-mode
//! autodiff primitives, and every numerically delicate step ships with an
//! independent oracle in its tests (finite differences, naive recurrences,
//! brute-force sorts, per-pixel counting). The `book/` directory of the
//! repository walks through each stage; its code snippets compile and run as
//! doctests of this crate.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod class_token;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod head;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pseudo_label;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;

mod book;

pub use error::Error;
pub use tensor::{Tape, Tensor, TensorError, Var};
