//! Learnable class tokens and post-encoder conditioning.
//!
//! A bank holds one learnable vector per foreground class. Conditioning
//! concatenates every patch embedding with every class token, producing one
//! feature stream per class: `[C, s, e + H]`. The streams stay numerically
//! independent of each other until the loss couples them, which is the point
//! of attaching class semantics after the encoder instead of inside it.

use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vit::TokenSequence;

const INIT_STD: f64 = 0.02;

/// The learnable `[C, H]` matrix of per-class tokens. `H = 0` is legal and
/// turns conditioning into a per-class copy of the patch stream.
#[derive(Debug, Clone)]
pub struct ClassTokenBank {
    pub tokens: Tensor,
    pub classes: usize,
    pub token_dim: usize,
}

impl ClassTokenBank {
    pub fn init(rng: &mut Rng, classes: usize, token_dim: usize) -> Self {
        ClassTokenBank {
            tokens: Tensor::randn(rng, &[classes, token_dim], INIT_STD),
            classes,
            token_dim,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.tokens"), &self.tokens);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.tokens"), &mut self.tokens);
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> BankVars {
        BankVars {
            tokens: stager.param(format!("{prefix}.tokens"), &self.tokens),
            classes: self.classes,
            token_dim: self.token_dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub tokens: Var,
    pub classes: usize,
    pub token_dim: usize,
}

/// Per-class conditioned patch features `[C, s, e + H]` plus grid geometry.
///
/// For every class `c` and patch `i`, the leading `e` channels are exactly
/// the patch embedding and the trailing `H` channels are exactly token `c`:
/// concatenation copies, never mixes.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedFeatures {
    pub features: Var,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Channel width `e + H`.
    pub width: usize,
}

impl ConditionedFeatures {
    pub fn seq_len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Condition every patch on every class token by channel-wise concatenation.
/// Gradients flow to both the patch stream and the bank; the token for class
/// `c` is copied to all `s` patches of stream `c`, so its gradient is the
/// sum over those patches.
pub fn condition(
    tape: &mut Tape,
    seq: &TokenSequence,
    bank: &BankVars,
) -> Result<ConditionedFeatures, TensorError> {
    let s = seq.seq_len();
    let e = tape.shape(seq.tokens)[1];
    let width = e + bank.token_dim;
    let mut streams = Vec::with_capacity(bank.classes);
    for c in 0..bank.classes {
        let stream = if bank.token_dim == 0 {
            seq.tokens
        } else {
            let token = tape.slice(bank.tokens, 0, c, c + 1)?;
            let tiled = tape.repeat_rows(token, s)?;
            tape.concat(&[seq.tokens, tiled], 1)?
        };
        streams.push(tape.reshape(stream, &[1, s, width])?);
    }
    let features = if streams.len() == 1 {
        streams[0]
    } else {
        tape.concat(&streams, 0)?
    };
    Ok(ConditionedFeatures {
        features,
        classes: bank.classes,
        rows: seq.rows,
        cols: seq.cols,
        width,
    })
}
