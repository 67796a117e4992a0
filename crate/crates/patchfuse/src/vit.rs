//! Patch tokenization and the transformer encoder.
//!
//! An image is cut into non-overlapping square patches in raster order, each
//! flattened patch is linearly projected and given a learnable positional
//! embedding, and a stack of pre-norm transformer blocks (multi-head
//! self-attention plus a GELU MLP, both with residual connections) produces
//! the context-enriched patch embeddings consumed downstream. No
//! classification token is inserted; class semantics enter after encoding.

use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Encoder geometry and width settings.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square patch side in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Token width `e`; must be divisible by `num_heads`.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Dropout probability on attention and MLP outputs; 0 disables.
    pub dropout_rate: f64,
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::contract(
                "VitConfig",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(TensorError::contract(
                "VitConfig",
                format!(
                    "embed_dim {} not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TensorError::contract(
                "VitConfig",
                format!("dropout_rate {} outside [0, 1)", self.dropout_rate),
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total patch count `s`.
    pub fn seq_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened patch width (pixels x 3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Patch embeddings on the tape, with their grid geometry. Token order is
/// always the row-major raster scan of the patch grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.rows * self.cols
    }
}

const INIT_STD: f64 = 0.02;

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    fn init(rng: &mut Rng, cfg: &VitConfig) -> Self {
        let e = cfg.embed_dim;
        let hidden = cfg.mlp_ratio * e;
        BlockParams {
            ln1_gamma: Tensor::full(&[e], 1.0),
            ln1_beta: Tensor::zeros(&[e]),
            wq: Tensor::randn(rng, &[e, e], INIT_STD),
            bq: Tensor::zeros(&[1, e]),
            wk: Tensor::randn(rng, &[e, e], INIT_STD),
            bk: Tensor::zeros(&[1, e]),
            wv: Tensor::randn(rng, &[e, e], INIT_STD),
            bv: Tensor::zeros(&[1, e]),
            wo: Tensor::randn(rng, &[e, e], INIT_STD),
            bo: Tensor::zeros(&[1, e]),
            ln2_gamma: Tensor::full(&[e], 1.0),
            ln2_beta: Tensor::zeros(&[e]),
            w1: Tensor::randn(rng, &[e, hidden], INIT_STD),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::randn(rng, &[hidden, e], INIT_STD),
            b2: Tensor::zeros(&[1, e]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// All encoder parameters.
#[derive(Debug, Clone)]
pub struct VitParams {
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl VitParams {
    pub fn init(rng: &mut Rng, cfg: &VitConfig) -> Self {
        let s = cfg.seq_len();
        VitParams {
            embed: Tensor::randn(rng, &[cfg.patch_dim(), cfg.embed_dim], INIT_STD),
            pos: Tensor::randn(rng, &[s, cfg.embed_dim], INIT_STD),
            blocks: (0..cfg.num_blocks).map(|_| BlockParams::init(rng, cfg)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.embed"), &self.embed);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, block) in self.blocks.iter().enumerate() {
            for (field, tensor) in block.fields() {
                f(format!("{prefix}.block{i}.{field}"), tensor);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.embed"), &mut self.embed);
        f(format!("{prefix}.pos"), &mut self.pos);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (field, tensor) in block.fields_mut() {
                f(format!("{prefix}.block{i}.{field}"), tensor);
            }
        }
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> VitVars {
        let embed = stager.param(format!("{prefix}.embed"), &self.embed);
        let pos = stager.param(format!("{prefix}.pos"), &self.pos);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let mut staged = Vec::with_capacity(16);
                for (field, tensor) in block.fields() {
                    staged.push(stager.param(format!("{prefix}.block{i}.{field}"), tensor));
                }
                BlockVars::from_ordered(&staged)
            })
            .collect();
        VitVars { embed, pos, blocks }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    fn from_ordered(v: &[Var]) -> Self {
        BlockVars {
            ln1_gamma: v[0],
            ln1_beta: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }
}

#[derive(Debug, Clone)]
pub struct VitVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
}

/// Cut an `[H, W, 3]` image (values in `[0, 1]`) into flattened patches in
/// raster order. Within a patch, pixels are row-major with channels
/// innermost. Dimensions must divide exactly; there is no implicit resize.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor, TensorError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(TensorError::contract(
            "patchify",
            format!("expected [H, W, 3] image, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(TensorError::contract(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {patch_size}"),
        ));
    }
    if image.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(TensorError::contract(
            "patchify",
            "pixel values must lie in [0, 1]",
        ));
    }
    let rows = h / patch_size;
    let cols = w / patch_size;
    let dim = patch_size * patch_size * 3;
    let mut values = Vec::with_capacity(rows * cols * dim);
    let pixels = image.values();
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch_size {
                let py = pr * patch_size + y;
                let row_start = (py * w + pc * patch_size) * 3;
                values.extend_from_slice(&pixels[row_start..row_start + patch_size * 3]);
            }
        }
    }
    Tensor::new(values, &[rows * cols, dim])
}

/// Project flattened patches into token space and add positional embeddings.
pub fn embed(
    tape: &mut Tape,
    patches: Var,
    w_embed: Var,
    pos_embed: Var,
) -> Result<Var, TensorError> {
    let projected = tape.matmul(patches, w_embed)?;
    tape.add(projected, pos_embed)
}

/// Multi-head scaled dot-product self-attention over `[s, e]` tokens.
/// Returns the projected output; `self_attention_with_weights` also exposes
/// the per-head attention matrices for inspection.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    num_heads: usize,
) -> Result<Var, TensorError> {
    Ok(self_attention_with_weights(tape, x, block, num_heads)?.0)
}

pub fn self_attention_with_weights(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    num_heads: usize,
) -> Result<(Var, Vec<Var>), TensorError> {
    let s = tape.shape(x)[0];
    let e = tape.shape(x)[1];
    let head_dim = e / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let project = |tape: &mut Tape, w: Var, b: Var| -> Result<Var, TensorError> {
        let proj = tape.matmul(x, w)?;
        let bias = tape.repeat_rows(b, s)?;
        tape.add(proj, bias)
    };
    let q = project(tape, block.wq, block.bq)?;
    let k = project(tape, block.wk, block.bk)?;
    let v = project(tape, block.wv, block.bv)?;

    let mut head_outputs = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.mul_scalar(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        weights.push(attn);
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs, 1)?
    };
    let out = tape.matmul(merged, block.wo)?;
    let bias = tape.repeat_rows(block.bo, s)?;
    Ok((tape.add(out, bias)?, weights))
}

fn mlp(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var, TensorError> {
    let s = tape.shape(x)[0];
    let h = tape.matmul(x, block.w1)?;
    let b1 = tape.repeat_rows(block.b1, s)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, block.w2)?;
    let b2 = tape.repeat_rows(block.b2, s)?;
    tape.add(out, b2)
}

fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut Rng>,
) -> Result<Var, TensorError> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let mask: Vec<f64> = (0..tape.numel(x))
        .map(|_| if rng.uniform() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let mask = tape.constant(mask, &shape)?;
    tape.mul(x, mask)
}

/// One pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    cfg: &VitConfig,
    rng: &mut Option<&mut Rng>,
) -> Result<Var, TensorError> {
    let normed = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta)?;
    let attended = self_attention(tape, normed, block, cfg.num_heads)?;
    let attended = dropout(tape, attended, cfg.dropout_rate, rng)?;
    let x = tape.add(x, attended)?;
    let normed = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta)?;
    let expanded = mlp(tape, normed, block)?;
    let expanded = dropout(tape, expanded, cfg.dropout_rate, rng)?;
    tape.add(x, expanded)
}

/// Encode already-flattened patches. With `num_blocks == 0` the output is
/// exactly the embedding stage.
pub fn encode_tokens(
    tape: &mut Tape,
    vars: &VitVars,
    cfg: &VitConfig,
    patches: Var,
    mut rng: Option<&mut Rng>,
) -> Result<TokenSequence, TensorError> {
    let mut tokens = embed(tape, patches, vars.embed, vars.pos)?;
    for block in &vars.blocks {
        tokens = encoder_block(tape, tokens, block, cfg, &mut rng)?;
    }
    let g = cfg.grid_side();
    Ok(TokenSequence {
        tokens,
        rows: g,
        cols: g,
    })
}

/// Full encoder entry point: patchify an image and run the block stack.
pub fn encode(
    tape: &mut Tape,
    vars: &VitVars,
    cfg: &VitConfig,
    image: &Tensor,
    rng: Option<&mut Rng>,
) -> Result<TokenSequence, TensorError> {
    cfg.validate()?;
    let patches = patchify(image, cfg.patch_size)?;
    let patches = tape.leaf(patches);
    encode_tokens(tape, vars, cfg, patches, rng)
}
