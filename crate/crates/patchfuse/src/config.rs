//! Run configuration: a line-oriented `key = value` text format with
//! `[section]` headers, `#` comments, and a canonical serialization used
//! when embedding the config into checkpoints.

use crate::error::{Error, Result};
use crate::pseudo_label::CrfConfig;
use std::fmt::Write as _;
use std::path::Path;

/// Which pooling reduces patch scores to image scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    TopK,
    Avg,
    Max,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::TopK => "topk",
            Pooling::Avg => "avg",
            Pooling::Max => "max",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Pooling::TopK),
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!(
                "pooling must be topk|avg|max, got `{other}`"
            ))),
        }
    }
}

/// `[model]` section: architecture geometry and switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Class-token width H; ignored when `class_token` is off.
    pub token_dim: usize,
    /// LSTM hidden width d.
    pub hidden_dim: usize,
    pub classes: usize,
    pub class_token: bool,
    pub context_fusion: bool,
    pub pooling: Pooling,
    pub top_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            image_size: 48,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 4,
            dropout: 0.0,
            token_dim: 8,
            hidden_dim: 20,
            classes: 3,
            class_token: true,
            context_fusion: true,
            pooling: Pooling::TopK,
            top_k: 4,
        }
    }
}

/// `[train]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub main_lr: f64,
    /// Stop once training-set label accuracy reaches this level (1.0 keeps
    /// going for all epochs... it stops only on a perfect epoch).
    pub early_stop_accuracy: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 7,
            epochs: 200,
            batch_size: 8,
            warm_lr: 1e-3,
            warm_epochs: 2,
            main_lr: 1e-4,
            early_stop_accuracy: 0.999,
        }
    }
}

/// `[data]` section: dataset locations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSection {
    pub train_dir: String,
    pub eval_dir: String,
}

/// `[infer]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct InferSection {
    /// Inference-time square resize; 0 keeps the native size.
    pub size: usize,
    pub crf: bool,
    pub bg_threshold: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            size: 0,
            crf: true,
            bg_threshold: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub infer: InferSection,
    pub crf: CrfConfig,
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse `{value}`"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "[{section}] {key}: expected true/false, got `{other}`"
        ))),
    }
}

impl RunConfig {
    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = path.split_once('.').ok_or_else(|| {
            Error::Config(format!("override `{path}` must look like section.key"))
        })?;
        self.assign(section.trim(), key.trim(), value.trim())
    }

    fn assign(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("model", "image_size") => self.model.image_size = parse_num(section, key, value)?,
            ("model", "patch_size") => self.model.patch_size = parse_num(section, key, value)?,
            ("model", "embed_dim") => self.model.embed_dim = parse_num(section, key, value)?,
            ("model", "num_heads") => self.model.num_heads = parse_num(section, key, value)?,
            ("model", "num_blocks") => self.model.num_blocks = parse_num(section, key, value)?,
            ("model", "mlp_ratio") => self.model.mlp_ratio = parse_num(section, key, value)?,
            ("model", "dropout") => self.model.dropout = parse_num(section, key, value)?,
            ("model", "token_dim") => self.model.token_dim = parse_num(section, key, value)?,
            ("model", "hidden_dim") => self.model.hidden_dim = parse_num(section, key, value)?,
            ("model", "classes") => self.model.classes = parse_num(section, key, value)?,
            ("model", "class_token") => self.model.class_token = parse_bool(section, key, value)?,
            ("model", "context_fusion") => {
                self.model.context_fusion = parse_bool(section, key, value)?
            }
            ("model", "pooling") => self.model.pooling = Pooling::parse(value)?,
            ("model", "top_k") => self.model.top_k = parse_num(section, key, value)?,
            ("train", "seed") => self.train.seed = parse_num(section, key, value)?,
            ("train", "epochs") => self.train.epochs = parse_num(section, key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(section, key, value)?,
            ("train", "warm_lr") => self.train.warm_lr = parse_num(section, key, value)?,
            ("train", "warm_epochs") => self.train.warm_epochs = parse_num(section, key, value)?,
            ("train", "main_lr") => self.train.main_lr = parse_num(section, key, value)?,
            ("train", "early_stop_accuracy") => {
                self.train.early_stop_accuracy = parse_num(section, key, value)?
            }
            ("data", "train_dir") => self.data.train_dir = value.to_string(),
            ("data", "eval_dir") => self.data.eval_dir = value.to_string(),
            ("infer", "size") => self.infer.size = parse_num(section, key, value)?,
            ("infer", "crf") => self.infer.crf = parse_bool(section, key, value)?,
            ("infer", "bg_threshold") => {
                self.infer.bg_threshold = parse_num(section, key, value)?
            }
            ("crf", "iterations") => self.crf.iterations = parse_num(section, key, value)?,
            ("crf", "spatial_sigma") => self.crf.spatial_sigma = parse_num(section, key, value)?,
            ("crf", "bilateral_sigma_xy") => {
                self.crf.bilateral_sigma_xy = parse_num(section, key, value)?
            }
            ("crf", "bilateral_sigma_rgb") => {
                self.crf.bilateral_sigma_rgb = parse_num(section, key, value)?
            }
            ("crf", "spatial_weight") => {
                self.crf.spatial_weight = parse_num(section, key, value)?
            }
            ("crf", "bilateral_weight") => {
                self.crf.bilateral_weight = parse_num(section, key, value)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: malformed section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key before any [section]",
                    lineno + 1
                )));
            }
            let value = value.split('#').next().unwrap_or("").trim();
            config.assign(&section, key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Environment overrides; currently the seed (`PATCHFUSE_SEED`).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(seed) = get("PATCHFUSE_SEED") {
            self.train.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("PATCHFUSE_SEED: cannot parse `{seed}`")))?;
        }
        Ok(())
    }

    /// Canonical text form: fixed section and key order, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        writeln!(out, "[model]").unwrap();
        writeln!(out, "image_size = {}", m.image_size).unwrap();
        writeln!(out, "patch_size = {}", m.patch_size).unwrap();
        writeln!(out, "embed_dim = {}", m.embed_dim).unwrap();
        writeln!(out, "num_heads = {}", m.num_heads).unwrap();
        writeln!(out, "num_blocks = {}", m.num_blocks).unwrap();
        writeln!(out, "mlp_ratio = {}", m.mlp_ratio).unwrap();
        writeln!(out, "dropout = {}", m.dropout).unwrap();
        writeln!(out, "token_dim = {}", m.token_dim).unwrap();
        writeln!(out, "hidden_dim = {}", m.hidden_dim).unwrap();
        writeln!(out, "classes = {}", m.classes).unwrap();
        writeln!(out, "class_token = {}", m.class_token).unwrap();
        writeln!(out, "context_fusion = {}", m.context_fusion).unwrap();
        writeln!(out, "pooling = {}", m.pooling.as_str()).unwrap();
        writeln!(out, "top_k = {}", m.top_k).unwrap();
        let t = &self.train;
        writeln!(out, "[train]").unwrap();
        writeln!(out, "seed = {}", t.seed).unwrap();
        writeln!(out, "epochs = {}", t.epochs).unwrap();
        writeln!(out, "batch_size = {}", t.batch_size).unwrap();
        writeln!(out, "warm_lr = {}", t.warm_lr).unwrap();
        writeln!(out, "warm_epochs = {}", t.warm_epochs).unwrap();
        writeln!(out, "main_lr = {}", t.main_lr).unwrap();
        writeln!(out, "early_stop_accuracy = {}", t.early_stop_accuracy).unwrap();
        let d = &self.data;
        writeln!(out, "[data]").unwrap();
        writeln!(out, "train_dir = {}", d.train_dir).unwrap();
        writeln!(out, "eval_dir = {}", d.eval_dir).unwrap();
        let i = &self.infer;
        writeln!(out, "[infer]").unwrap();
        writeln!(out, "size = {}", i.size).unwrap();
        writeln!(out, "crf = {}", i.crf).unwrap();
        writeln!(out, "bg_threshold = {}", i.bg_threshold).unwrap();
        let c = &self.crf;
        writeln!(out, "[crf]").unwrap();
        writeln!(out, "iterations = {}", c.iterations).unwrap();
        writeln!(out, "spatial_sigma = {}", c.spatial_sigma).unwrap();
        writeln!(out, "bilateral_sigma_xy = {}", c.bilateral_sigma_xy).unwrap();
        writeln!(out, "bilateral_sigma_rgb = {}", c.bilateral_sigma_rgb).unwrap();
        writeln!(out, "spatial_weight = {}", c.spatial_weight).unwrap();
        writeln!(out, "bilateral_weight = {}", c.bilateral_weight).unwrap();
        out
    }
}
