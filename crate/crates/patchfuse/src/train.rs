//! The training loop: minibatch multi-label optimization with Adam, the
//! two-stage learning-rate schedule, per-epoch logging, and per-epoch
//! checkpointing.
//!
//! Training sees only [`TrainExample`]s (image plus image-level labels);
//! ground-truth masks never enter this module. Runs are bit-reproducible:
//! all randomness derives from the configured seed, and work proceeds on a
//! single worker in a fixed order.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{imageio, load_voc_manifest, TrainExample};
use crate::error::{Error, Result};
use crate::head::LabelVector;
use crate::model::{training_loss, ModelConfig, ModelParams};
use crate::optim::{AdamState, LrSchedule};
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// One epoch's log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub params: ModelParams,
}

/// Train from a dataset directory named in the config.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if config.data.train_dir.is_empty() {
        return Err(Error::Config("data.train_dir is not set".into()));
    }
    let manifest = load_voc_manifest(Path::new(&config.data.train_dir), "all")?;
    if manifest.num_classes() != config.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but config says {}",
            manifest.num_classes(),
            config.model.classes
        )));
    }
    train_examples(config, &manifest.training_examples(), out_dir)
}

/// Train from an in-memory example list (the weak-supervision projection).
pub fn train_examples(
    config: &RunConfig,
    examples: &[TrainExample],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let model_config = ModelConfig::from_section(&config.model)?;
    std::fs::create_dir_all(out_dir)?;

    // Preload; desk-scale datasets fit in memory comfortably.
    let mut images: Vec<Tensor> = Vec::with_capacity(examples.len());
    let mut labels: Vec<LabelVector> = Vec::with_capacity(examples.len());
    for ex in examples {
        let image = imageio::load_image(&ex.image_path)?;
        if image.shape()[0] != model_config.vit.image_size
            || image.shape()[1] != model_config.vit.image_size
        {
            return Err(Error::Data(format!(
                "image {} is {}x{}, config expects {}",
                ex.id,
                image.shape()[0],
                image.shape()[1],
                model_config.vit.image_size
            )));
        }
        images.push(image);
        labels.push(LabelVector::from_present(&ex.present, model_config.classes)?);
    }

    let root_rng = Rng::seeded(config.train.seed);
    let mut params = ModelParams::init(&mut root_rng.derive(1), &model_config);
    let mut adam = AdamState::new();
    let schedule = LrSchedule {
        warm_lr: config.train.warm_lr,
        warm_epochs: config.train.warm_epochs,
        main_lr: config.train.main_lr,
    };
    let batch_size = config.train.batch_size.max(1);

    let log_path = out_dir.join("loss_log.csv");
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let mut log = std::fs::File::create(&log_path)?;
    writeln!(log, "epoch,lr,loss,precision,recall,accuracy")?;

    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..config.train.epochs {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        root_rng.derive(1000 + epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        // Micro-averaged counts at threshold 0.5 over (image, class).
        let (mut tp, mut fp, mut fnn, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for batch in order.chunks(batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let mut tape = Tape::new();
                let mut stager = Stager::new(&mut tape);
                let vars = params.stage(&mut stager);
                let bindings = stager.into_bindings();
                let pass =
                    training_loss(&mut tape, &vars, &model_config, &images[idx], &labels[idx], None)?;
                let loss = tape.values(pass.loss)[0];
                if !loss.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss at epoch {epoch} on example {idx}; last checkpoint retained at {}",
                        checkpoint_path.display()
                    )));
                }
                epoch_loss += loss;
                for (score, truth) in tape.values(pass.pooled).iter().zip(labels[idx].values()) {
                    match (*score >= 0.5, *truth >= 0.5) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        (false, false) => tn += 1,
                    }
                }
                tape.backward(pass.loss)?;
                for (name, var) in &bindings {
                    if let Some(g) = tape.grad(*var) {
                        let entry = grads
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (acc, gi) in entry.iter_mut().zip(g) {
                            *acc += gi * scale;
                        }
                    }
                }
            }
            adam.step(&grads, lr, |apply| {
                params.visit_mut(&mut |name, t| apply(&name, t));
            })?;
        }

        let total = (tp + fp + fnn + tn).max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: epoch_loss / examples.len() as f64,
            precision: tp as f64 / (tp + fp).max(1) as f64,
            recall: tp as f64 / (tp + fnn).max(1) as f64,
            accuracy: (tp + tn) as f64 / total,
        };
        writeln!(
            log,
            "{},{},{},{},{},{}",
            stats.epoch, stats.lr, stats.loss, stats.precision, stats.recall, stats.accuracy
        )?;
        log.flush()?;
        checkpoint::save(&checkpoint_path, config, &params)?;
        epochs_run = epoch + 1;
        let stop = stats.accuracy >= config.train.early_stop_accuracy;
        history.push(stats);
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        epochs_run,
        history,
        checkpoint_path,
        log_path,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::gen_synthetic;
    use crate::model::infer_scores;

    fn tiny_config(train_dir: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.model.image_size = 16;
        config.model.patch_size = 4;
        config.model.embed_dim = 8;
        config.model.num_heads = 2;
        config.model.num_blocks = 1;
        config.model.mlp_ratio = 2;
        config.model.token_dim = 2;
        config.model.hidden_dim = 5;
        config.model.classes = 2;
        config.train.epochs = 1;
        config.train.batch_size = 4;
        config.data.train_dir = train_dir.to_string_lossy().into_owned();
        config
    }

    #[test]
    fn one_epoch_writes_log_and_reloadable_checkpoint() {
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(data.path(), 5, 8, 16, 2).unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = tiny_config(data.path());
        let outcome = train(&config, out.path()).unwrap();
        assert_eq!(outcome.epochs_run, 1);

        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 2, "header plus one row: {log}");
        assert!(lines[0].starts_with("epoch,lr,loss"));

        // Reload and verify identical forward outputs.
        let (config2, params2) = checkpoint::load(&outcome.checkpoint_path).unwrap();
        let model_config = ModelConfig::from_section(&config2.model).unwrap();
        let manifest = load_voc_manifest(data.path(), "all").unwrap();
        let image = imageio::load_image(&manifest.records[0].image_path).unwrap();
        let a = infer_scores(&model_config, &outcome.params, &image).unwrap();
        let b = infer_scores(&model_config, &params2, &image).unwrap();
        assert_eq!(a.softmax_z.values(), b.softmax_z.values());
    }

    #[test]
    fn lr_schedule_is_recorded_in_log() {
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(data.path(), 5, 4, 16, 2).unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut config = tiny_config(data.path());
        config.train.epochs = 4;
        config.train.early_stop_accuracy = 2.0; // never stop early
        let outcome = train(&config, out.path()).unwrap();
        let lrs: Vec<f64> = outcome.history.iter().map(|s| s.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-4, 1e-4]);
    }

    #[test]
    fn two_runs_are_byte_identical() {
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(data.path(), 5, 6, 16, 2).unwrap();
        let config = {
            let mut c = tiny_config(data.path());
            c.train.epochs = 2;
            c.train.early_stop_accuracy = 2.0;
            c
        };
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        train(&config, out1.path()).unwrap();
        train(&config, out2.path()).unwrap();
        let ckpt1 = std::fs::read(out1.path().join("checkpoint.bin")).unwrap();
        let ckpt2 = std::fs::read(out2.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ckpt1, ckpt2);
        let log1 = std::fs::read(out1.path().join("loss_log.csv")).unwrap();
        let log2 = std::fs::read(out2.path().join("loss_log.csv")).unwrap();
        assert_eq!(log1, log2);
    }

    #[test]
    fn training_never_touches_mask_files() {
        // Access audit: delete every mask after the manifest is built; the
        // training projection must not notice.
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(data.path(), 5, 6, 16, 2).unwrap();
        let manifest = load_voc_manifest(data.path(), "all").unwrap();
        let examples = manifest.training_examples();
        for record in &manifest.records {
            std::fs::remove_file(record.mask_path.as_ref().unwrap()).unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let config = tiny_config(data.path());
        let outcome = train_examples(&config, &examples, out.path());
        assert!(outcome.is_ok(), "training must not read mask files");
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(data.path(), 5, 4, 16, 3).unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = tiny_config(data.path()); // says 2 classes
        let err = train(&config, out.path()).unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
