//! Inference: from a checkpoint to pseudo masks and score dumps.
//!
//! For each image the softmax patch scores are reshaped to the patch grid,
//! bilinearly upsampled to the native image resolution, combined with the
//! fixed background score, and argmaxed into the baseline pseudo mask
//! (`bpm/`). With CRF enabled a mean-field-refined mask lands in `crf/`.
//! Sigmoid patch scores and pooled image scores are dumped under `scores/`.

use crate::config::RunConfig;
use crate::data::{imageio, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{infer_scores, ModelConfig, ModelParams};
use crate::pseudo_label::{argmax_mask, crf_refine, make_probmap, save_mask, save_palette, upsample_bilinear, PseudoMask};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct InferOutcome {
    pub bpm_dir: PathBuf,
    pub crf_dir: Option<PathBuf>,
    pub scores_dir: PathBuf,
    pub images: usize,
}

/// Run inference over every record of a manifest.
pub fn infer(
    config: &RunConfig,
    params: &ModelParams,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<InferOutcome> {
    let model_config = ModelConfig::from_section(&config.model)?;
    let bpm_dir = out_dir.join("bpm");
    let scores_dir = out_dir.join("scores");
    std::fs::create_dir_all(&bpm_dir)?;
    std::fs::create_dir_all(&scores_dir)?;
    let crf_dir = if config.infer.crf {
        let dir = out_dir.join("crf");
        std::fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };
    save_palette(&out_dir.join("palette.txt"), &manifest.class_names)?;

    for record in &manifest.records {
        let native = imageio::load_image(&record.image_path)?;
        let (bpm, refined, scores) = infer_one(config, &model_config, params, &native)?;
        save_mask(&bpm_dir.join(format!("{}.png", record.id)), &bpm)?;
        if let (Some(dir), Some(refined)) = (&crf_dir, refined) {
            save_mask(&dir.join(format!("{}.png", record.id)), &refined)?;
        }
        std::fs::write(
            scores_dir.join(format!("{}.csv", record.id)),
            scores_csv(&scores, &manifest.class_names),
        )?;
        std::fs::write(
            scores_dir.join(format!("{}.pooled.txt", record.id)),
            pooled_text(&scores, &manifest.class_names),
        )?;
    }
    Ok(InferOutcome {
        bpm_dir,
        crf_dir,
        scores_dir,
        images: manifest.records.len(),
    })
}

#[derive(Debug)]
pub struct InferScores {
    pub sigmoid_z: Tensor,
    pub pooled: Tensor,
    pub rows: usize,
    pub cols: usize,
}

/// One image through the mask pipeline. Returns the baseline mask, the
/// CRF-refined mask when enabled, and the score dump payload.
pub fn infer_one(
    config: &RunConfig,
    model_config: &ModelConfig,
    params: &ModelParams,
    native: &Tensor,
) -> Result<(PseudoMask, Option<PseudoMask>, InferScores)> {
    let (native_h, native_w) = (native.shape()[0], native.shape()[1]);
    // Optional inference-time resize feeds the encoder a larger view; masks
    // are always emitted at the native resolution.
    let model_input = if config.infer.size > 0 {
        upsample_bilinear(native, config.infer.size, config.infer.size)?
    } else {
        native.clone()
    };
    let side = model_input.shape()[0];
    if side % model_config.vit.patch_size != 0 || model_input.shape()[1] != side {
        return Err(Error::Data(format!(
            "inference size {side}x{} not divisible by patch size {}",
            model_input.shape()[1],
            model_config.vit.patch_size
        )));
    }
    let grid = side / model_config.vit.patch_size;
    let mut infer_config = model_config.clone();
    infer_config.vit.image_size = side;
    // Positional embeddings are tied to the training grid; a different
    // inference grid needs them resized too.
    let mut infer_params = params.clone();
    if infer_config.vit.seq_len() != model_config.vit.seq_len() {
        let train_grid = model_config.vit.grid_side();
        let e = model_config.vit.embed_dim;
        let pos_grid = Tensor::new(
            params.vit.pos.values().to_vec(),
            &[train_grid, train_grid, e],
        )?;
        let resized = upsample_bilinear(&pos_grid, grid, grid)?;
        infer_params.vit.pos = Tensor::new(resized.values().to_vec(), &[grid * grid, e])?;
    }

    let scores = infer_scores(&infer_config, &infer_params, &model_input)?;
    let classes = model_config.classes;
    let z_grid = Tensor::new(
        scores.softmax_z.values().to_vec(),
        &[scores.rows, scores.cols, classes],
    )?;
    let upsampled = upsample_bilinear(&z_grid, native_h, native_w)?;
    let probmap = make_probmap(&upsampled, config.infer.bg_threshold)?;
    let bpm = argmax_mask(&probmap);
    let refined = if config.infer.crf {
        let refined_pm = crf_refine(&probmap, native, &config.crf)?;
        Some(argmax_mask(&refined_pm))
    } else {
        None
    };
    Ok((
        bpm,
        refined,
        InferScores {
            sigmoid_z: scores.sigmoid_z,
            pooled: scores.pooled,
            rows: scores.rows,
            cols: scores.cols,
        },
    ))
}

fn scores_csv(scores: &InferScores, class_names: &[String]) -> String {
    let mut out = String::from("patch_row,patch_col");
    for name in class_names {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    let classes = class_names.len();
    for r in 0..scores.rows {
        for c in 0..scores.cols {
            write!(out, "{r},{c}").unwrap();
            let base = (r * scores.cols + c) * classes;
            for k in 0..classes {
                write!(out, ",{}", scores.sigmoid_z.values()[base + k]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn pooled_text(scores: &InferScores, class_names: &[String]) -> String {
    let mut out = String::new();
    for (name, value) in class_names.iter().zip(scores.pooled.values()) {
        writeln!(out, "{name} {value}").unwrap();
    }
    out
}
