//! Runs the guide's code snippets as doctests.
//!
//! mdBook cannot execute Rust snippets against a local crate on its own, so
//! each chapter is attached here as module documentation; `cargo test --doc`
//! then compiles and runs every fenced code block, keeping the book and the
//! library in sync.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

chapter!(introduction, "../../../book/src/introduction.md");
chapter!(tensors_and_gradients, "../../../book/src/tensors-and-gradients.md");
chapter!(patch_encoding, "../../../book/src/patch-encoding.md");
chapter!(class_tokens, "../../../book/src/class-tokens.md");
chapter!(context_fusion, "../../../book/src/context-fusion.md");
chapter!(scoring_and_pooling, "../../../book/src/scoring-and-pooling.md");
chapter!(pseudo_masks, "../../../book/src/pseudo-masks.md");
chapter!(training_and_cli, "../../../book/src/training-and-cli.md");
