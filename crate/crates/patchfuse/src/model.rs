//! The composed model: encoder, conditioning, fusion, and head, with the
//! ablation switches wired in.
//!
//! With class tokens on, conditioning produces one stream per class and the
//! shared scalar head scores each stream. With class tokens off, the patch
//! stream passes through unconditioned and a per-class weight matrix scores
//! it; with context fusion off, features bypass the recurrences unchanged.

use crate::class_token::{condition, ClassTokenBank, ConditionedFeatures};
use crate::config::{ModelSection, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{contextual_fusion, CfBilstmParams, FusedFeatures};
use crate::head::{self, ClassifierWeights, HeadVars, LabelVector};
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, VitConfig, VitParams};

/// Validated architecture settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub classes: usize,
    /// Class-token width; zero iff `class_token` is off.
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub class_token: bool,
    pub context_fusion: bool,
    pub pooling: Pooling,
    pub top_k: usize,
}

impl ModelConfig {
    pub fn from_section(section: &ModelSection) -> Result<Self> {
        let vit = VitConfig {
            image_size: section.image_size,
            patch_size: section.patch_size,
            embed_dim: section.embed_dim,
            num_heads: section.num_heads,
            num_blocks: section.num_blocks,
            mlp_ratio: section.mlp_ratio,
            dropout_rate: section.dropout,
        };
        vit.validate().map_err(Error::Tensor)?;
        if section.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if section.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        let config = ModelConfig {
            vit,
            classes: section.classes,
            token_dim: if section.class_token {
                section.token_dim
            } else {
                0
            },
            hidden_dim: section.hidden_dim,
            class_token: section.class_token,
            context_fusion: section.context_fusion,
            pooling: section.pooling,
            top_k: section.top_k,
        };
        if config.pooling == Pooling::TopK
            && (config.top_k == 0 || config.top_k > config.vit.seq_len())
        {
            return Err(Error::Config(format!(
                "top_k = {} outside 1..={}",
                config.top_k,
                config.vit.seq_len()
            )));
        }
        Ok(config)
    }

    /// Stream width `e + H` seen by fusion and the head.
    pub fn stream_width(&self) -> usize {
        self.vit.embed_dim + self.token_dim
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub vit: VitParams,
    pub bank: Option<ClassTokenBank>,
    pub fusion: Option<CfBilstmParams>,
    pub head: ClassifierWeights,
}

impl ModelParams {
    pub fn init(rng: &mut Rng, config: &ModelConfig) -> Self {
        let vit = VitParams::init(rng, &config.vit);
        let bank = config
            .class_token
            .then(|| ClassTokenBank::init(rng, config.classes, config.token_dim));
        let fusion = config
            .context_fusion
            .then(|| CfBilstmParams::init(rng, config.stream_width(), config.hidden_dim));
        let head = if config.class_token {
            ClassifierWeights::init_shared(rng, config.stream_width())
        } else {
            ClassifierWeights::init_per_class(rng, config.stream_width(), config.classes)
        };
        ModelParams {
            vit,
            bank,
            fusion,
            head,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        self.vit.visit("vit", f);
        if let Some(bank) = &self.bank {
            bank.visit("bank", f);
        }
        if let Some(fusion) = &self.fusion {
            fusion.visit("fusion", f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.vit.visit_mut("vit", f);
        if let Some(bank) = &mut self.bank {
            bank.visit_mut("bank", f);
        }
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_mut("fusion", f);
        }
        self.head.visit_mut("head", f);
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    pub fn stage(&self, stager: &mut Stager) -> ModelVars {
        ModelVars {
            vit: self.vit.stage(stager, "vit"),
            bank: self.bank.as_ref().map(|b| b.stage(stager, "bank")),
            fusion: self.fusion.as_ref().map(|f| f.stage(stager, "fusion")),
            head: self.head.stage(stager, "head"),
        }
    }
}

pub struct ModelVars {
    pub vit: vit::VitVars,
    pub bank: Option<crate::class_token::BankVars>,
    pub fusion: Option<crate::fusion::CfBilstmVars>,
    pub head: HeadVars,
}

/// Everything the forward pass exposes for training and inference.
pub struct Forward {
    /// Raw per-patch logits `[s, C]`.
    pub logits: Var,
    pub rows: usize,
    pub cols: usize,
}

/// Encoder + conditioning + fusion + head logits for one image.
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    image: &Tensor,
    rng: Option<&mut Rng>,
) -> Result<Forward> {
    let seq = vit::encode(tape, &vars.vit, &config.vit, image, rng)?;
    let s = seq.seq_len();
    let conditioned: ConditionedFeatures = match &vars.bank {
        Some(bank) => condition(tape, &seq, bank)?,
        None => {
            let features = tape.reshape(seq.tokens, &[1, s, config.vit.embed_dim])?;
            ConditionedFeatures {
                features,
                classes: 1,
                rows: seq.rows,
                cols: seq.cols,
                width: config.vit.embed_dim,
            }
        }
    };
    let fused: FusedFeatures = match &vars.fusion {
        Some(fusion_vars) => contextual_fusion(tape, &conditioned, fusion_vars)?,
        None => FusedFeatures {
            features: conditioned.features,
            classes: conditioned.classes,
            rows: conditioned.rows,
            cols: conditioned.cols,
            width: conditioned.width,
        },
    };
    let logits = head::patch_logits(tape, &fused, &vars.head)?;
    Ok(Forward {
        logits,
        rows: seq.rows,
        cols: seq.cols,
    })
}

/// Pool sigmoid patch scores to image-level class scores.
pub fn pool_scores(tape: &mut Tape, z: Var, config: &ModelConfig) -> Result<Var> {
    let pooled = match config.pooling {
        Pooling::TopK => head::topk_pool(tape, z, config.top_k)?,
        Pooling::Avg => head::avg_pool(tape, z)?,
        Pooling::Max => head::max_pool(tape, z)?,
    };
    Ok(pooled)
}

/// Training-path outputs: sigmoid scores, pooled scores, and the loss.
pub struct TrainingPass {
    pub z: Var,
    pub pooled: Var,
    pub loss: Var,
}

pub fn training_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    image: &Tensor,
    labels: &LabelVector,
    rng: Option<&mut Rng>,
) -> Result<TrainingPass> {
    let fwd = forward(tape, vars, config, image, rng)?;
    let z = tape.sigmoid(fwd.logits);
    let pooled = pool_scores(tape, z, config)?;
    let loss = head::mce_loss(tape, pooled, labels)?;
    Ok(TrainingPass { z, pooled, loss })
}

/// Inference-path outputs, detached from the tape.
pub struct Scores {
    /// Sigmoid per-stream scores `[s, C]`.
    pub sigmoid_z: Tensor,
    /// Softmax cross-class scores `[s, C]`, the mask-generation scores.
    pub softmax_z: Tensor,
    /// Pooled sigmoid scores `[C]`.
    pub pooled: Tensor,
    pub rows: usize,
    pub cols: usize,
}

pub fn infer_scores(config: &ModelConfig, params: &ModelParams, image: &Tensor) -> Result<Scores> {
    let mut tape = Tape::new();
    let mut stager = Stager::new(&mut tape);
    let vars = params.stage(&mut stager);
    let fwd = forward(&mut tape, &vars, config, image, None)?;
    let sigmoid_z = tape.sigmoid(fwd.logits);
    let softmax_z = tape.softmax(fwd.logits, 1)?;
    let pooled = pool_scores(&mut tape, sigmoid_z, config)?;
    Ok(Scores {
        sigmoid_z: tape.to_tensor(sigmoid_z),
        softmax_z: tape.to_tensor(softmax_z),
        pooled: tape.to_tensor(pooled),
        rows: fwd.rows,
        cols: fwd.cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_section() -> ModelSection {
        ModelSection {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            token_dim: 4,
            hidden_dim: 4,
            classes: 3,
            class_token: true,
            context_fusion: true,
            pooling: Pooling::TopK,
            top_k: 4,
        }
    }

    fn random_image(rng: &mut Rng, size: usize) -> Tensor {
        Tensor::new(
            (0..size * size * 3).map(|_| rng.uniform()).collect(),
            &[size, size, 3],
        )
        .unwrap()
    }

    #[test]
    fn ablation_variants_agree_on_output_shape() {
        let mut rng = Rng::seeded(1);
        let image = random_image(&mut rng, 16);
        for (token, fusion) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut section = tiny_section();
            section.class_token = token;
            section.context_fusion = fusion;
            let config = ModelConfig::from_section(&section).unwrap();
            let mut seed_rng = Rng::seeded(2);
            let params = ModelParams::init(&mut seed_rng, &config);
            let mut tape = Tape::new();
            let mut stager = Stager::new(&mut tape);
            let vars = params.stage(&mut stager);
            let fwd = forward(&mut tape, &vars, &config, &image, None).unwrap();
            assert_eq!(
                tape.shape(fwd.logits),
                &[16, 3],
                "token={token} fusion={fusion}"
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let section = tiny_section();
        let config = ModelConfig::from_section(&section).unwrap();
        let run = || {
            let mut rng = Rng::seeded(3);
            let params = ModelParams::init(&mut rng, &config);
            let image = random_image(&mut rng, 16);
            let scores = infer_scores(&config, &params, &image).unwrap();
            scores.softmax_z.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_under_adam_on_one_image() {
        use crate::optim::AdamState;
        use std::collections::BTreeMap;

        let section = tiny_section();
        let config = ModelConfig::from_section(&section).unwrap();
        let mut rng = Rng::seeded(4);
        let mut params = ModelParams::init(&mut rng, &config);
        let image = random_image(&mut rng, 16);
        let labels = LabelVector::from_present(&[0, 2], 3).unwrap();
        let mut adam = AdamState::new();

        let mut first = None;
        let mut last = 0.0;
        for _ in 0..80 {
            let mut tape = Tape::new();
            let mut stager = Stager::new(&mut tape);
            let vars = params.stage(&mut stager);
            let bindings = stager.into_bindings();
            let pass = training_loss(&mut tape, &vars, &config, &image, &labels, None).unwrap();
            last = tape.values(pass.loss)[0];
            first.get_or_insert(last);
            tape.backward(pass.loss).unwrap();
            let mut grads = BTreeMap::new();
            for (name, var) in &bindings {
                if let Some(g) = tape.grad(*var) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            adam.step(&grads, 3e-3, |apply| {
                params.visit_mut(&mut |name, t| apply(&name, t));
            })
            .unwrap();
        }
        assert!(
            last < first.unwrap() * 0.5,
            "loss did not drop: {first:?} -> {last}"
        );
    }

    #[test]
    fn default_config_section_is_valid() {
        let config = ModelConfig::from_section(&RunConfig::default().model).unwrap();
        assert_eq!(config.vit.seq_len(), 36);
        assert_eq!(config.stream_width(), 40);
    }

    #[test]
    fn top_k_out_of_range_is_rejected() {
        let mut section = tiny_section();
        section.top_k = 17; // grid has 16 patches
        assert!(ModelConfig::from_section(&section).is_err());
    }
}
