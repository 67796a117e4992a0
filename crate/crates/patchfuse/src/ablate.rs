//! Ablation driver: the class-token / context-fusion on-off matrix and the
//! pooling-strategy comparison, every run under identical seeds.
//!
//! Each variant trains from scratch, emits baseline pseudo masks on the
//! evaluation split, and reports mIoU. Runs are independent and
//! deterministic per (variant, seed), so they execute in parallel; results
//! are keyed and sorted before aggregation, keeping the output table
//! identical regardless of scheduling.

use crate::config::{Pooling, RunConfig};
use crate::data::load_voc_manifest;
use crate::error::{Error, Result};
use crate::infer::infer_one;
use crate::metrics::IoUAccumulator;
use crate::model::ModelConfig;
use crate::pseudo_label::load_mask;
use crate::train::train_examples;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// One ablation variant definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub class_token: bool,
    pub context_fusion: bool,
    pub pooling: Pooling,
}

/// The component matrix (all top-k pooled) plus the pooling comparison
/// (all components on). `full` doubles as the top-k pooling row.
pub const VARIANTS: [Variant; 6] = [
    Variant {
        name: "baseline",
        class_token: false,
        context_fusion: false,
        pooling: Pooling::TopK,
    },
    Variant {
        name: "class_token",
        class_token: true,
        context_fusion: false,
        pooling: Pooling::TopK,
    },
    Variant {
        name: "context_fusion",
        class_token: false,
        context_fusion: true,
        pooling: Pooling::TopK,
    },
    Variant {
        name: "full",
        class_token: true,
        context_fusion: true,
        pooling: Pooling::TopK,
    },
    Variant {
        name: "pool_avg",
        class_token: true,
        context_fusion: true,
        pooling: Pooling::Avg,
    },
    Variant {
        name: "pool_max",
        class_token: true,
        context_fusion: true,
        pooling: Pooling::Max,
    },
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub miou_per_seed: Vec<f64>,
    pub mean_miou: f64,
}

/// Train + evaluate one configured variant with one seed; returns BPM mIoU
/// on the evaluation split.
pub fn run_variant(base: &RunConfig, variant: &Variant, seed: u64, work_dir: &Path) -> Result<f64> {
    let mut config = base.clone();
    config.model.class_token = variant.class_token;
    config.model.context_fusion = variant.context_fusion;
    config.model.pooling = variant.pooling;
    config.train.seed = seed;
    config.infer.crf = false;

    let train_manifest = load_voc_manifest(Path::new(&config.data.train_dir), "all")?;
    let eval_manifest = load_voc_manifest(Path::new(&config.data.eval_dir), "all")?;
    let outcome = train_examples(&config, &train_manifest.training_examples(), work_dir)?;

    let model_config = ModelConfig::from_section(&config.model)?;
    let mut acc = IoUAccumulator::new(config.model.classes + 1);
    for record in &eval_manifest.records {
        let Some(mask_path) = &record.mask_path else {
            return Err(Error::Data(format!(
                "evaluation image {} has no ground-truth mask",
                record.id
            )));
        };
        let image = crate::data::imageio::load_image(&record.image_path)?;
        let (bpm, _, _) = infer_one(&config, &model_config, &outcome.params, &image)?;
        acc.add(&bpm, &load_mask(mask_path)?);
    }
    Ok(acc.report().mean_iou)
}

/// Run the whole matrix over the given seeds; writes a delimited table and
/// returns the rows in `VARIANTS` order, with the aliased top-k pooling row
/// appended.
pub fn ablate(base: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, u64)> = (0..VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<((usize, u64), Result<f64>)> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let work = out_dir.join(format!("{}_seed{}", VARIANTS[v].name, seed));
            ((v, seed), run_variant(base, &VARIANTS[v], seed, &work))
        })
        .collect();

    let mut table: Vec<Vec<f64>> = vec![Vec::new(); VARIANTS.len()];
    let mut sorted = results;
    sorted.sort_by_key(|&((v, s), _)| (v, s));
    for ((v, _seed), result) in sorted {
        table[v].push(result?);
    }

    let mut rows: Vec<AblationRow> = VARIANTS
        .iter()
        .zip(table)
        .map(|(variant, miou_per_seed)| {
            let mean = miou_per_seed.iter().sum::<f64>() / miou_per_seed.len() as f64;
            AblationRow {
                variant: *variant,
                miou_per_seed,
                mean_miou: mean,
            }
        })
        .collect();
    // The top-k pooling row is the full model by construction.
    let full = rows[3].clone();
    rows.push(AblationRow {
        variant: Variant {
            name: "pool_topk",
            ..full.variant
        },
        ..full
    });

    let mut text = String::from("variant,class_token,context_fusion,pooling");
    for seed in seeds {
        write!(text, ",seed_{seed}").unwrap();
    }
    text.push_str(",mean_miou\n");
    for row in &rows {
        write!(
            text,
            "{},{},{},{}",
            row.variant.name,
            row.variant.class_token,
            row.variant.context_fusion,
            row.variant.pooling.as_str()
        )
        .unwrap();
        for v in &row.miou_per_seed {
            write!(text, ",{v:.6}").unwrap();
        }
        writeln!(text, ",{:.6}", row.mean_miou).unwrap();
    }
    std::fs::write(out_dir.join("ablation.csv"), &text)?;
    Ok(rows)
}
