//! Command line front end: dataset generation, training, inference,
//! evaluation, gradient checking, ablations, and the scaling benchmark.

use clap::{Args, Parser, Subcommand};
use patchfuse::config::RunConfig;
use patchfuse::data::{load_voc_manifest, synth};
use patchfuse::error::Error;
use patchfuse::metrics::IoUAccumulator;
use patchfuse::pseudo_label::load_mask;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "patchfuse",
    about = "Weakly supervised semantic segmentation from image-level labels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value with [section] headers); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=50 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.overrides {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects SECTION.KEY=VALUE, got `{assignment}`"))
            })?;
            config.set(key, value)?;
        }
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset in the VOC layout.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
    },
    /// Train a model; writes checkpoint.bin and loss_log.csv to --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset root (overrides data.train_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce pseudo masks from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root to run on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply CRF refinement: on or off.
        #[arg(long, value_parser = parse_on_off)]
        crf: Option<bool>,
        /// Square resize before encoding; 0 keeps the native size.
        #[arg(long)]
        infer_size: Option<usize>,
        /// Override [infer]/[crf] keys, e.g. --set crf.iterations=5.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare predicted masks against dataset ground truth (mIoU).
    Eval {
        /// Directory of predicted masks named <image id>.png.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root holding ground-truth masks.
        #[arg(long)]
        data: PathBuf,
        /// Also write the per-class table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every gradient path.
    Gradcheck {
        /// Number of random seeds per check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Component and pooling ablation matrix.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset root (overrides data.train_dir).
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Evaluation dataset root (overrides data.eval_dir).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Wall-time scaling of context fusion vs. quadratic attention.
    BenchScaling {
        #[arg(long, default_value_t = 2048)]
        small: usize,
        #[arg(long, default_value_t = 4096)]
        large: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on|off, got `{other}`")),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen {
            out,
            seed,
            count,
            image_size,
            classes,
        } => {
            let summary = synth::gen_synthetic(&out, seed, count, image_size, classes)?;
            println!(
                "generated {} images ({}x{}, {} classes) under {}",
                summary.images,
                image_size,
                image_size,
                classes,
                out.display()
            );
            for (c, count) in summary.per_class_counts.iter().enumerate() {
                println!("  class {} ({}): {} images", c, synth::SHAPE_NAMES[c], count);
            }
            Ok(())
        }
        Command::Train { config, data, out } => {
            let mut config = config.build()?;
            if let Some(dir) = data {
                config.data.train_dir = dir.to_string_lossy().into_owned();
            }
            let outcome = patchfuse::train::train(&config, &out)?;
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final loss {:.6}, label accuracy {:.4}",
                outcome.epochs_run, last.loss, last.accuracy
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("loss log:   {}", outcome.log_path.display());
            Ok(())
        }
        Command::Infer {
            checkpoint,
            data,
            out,
            crf,
            infer_size,
            overrides,
        } => {
            let (mut config, params) = patchfuse::checkpoint::load(&checkpoint)?;
            for assignment in &overrides {
                let (key, value) = assignment.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "--set expects SECTION.KEY=VALUE, got `{assignment}`"
                    ))
                })?;
                if key.trim().starts_with("model.") {
                    return Err(Error::Config(format!(
                        "`{key}` is fixed by the checkpoint and cannot be overridden"
                    )));
                }
                config.set(key, value)?;
            }
            if let Some(crf) = crf {
                config.infer.crf = crf;
            }
            if let Some(size) = infer_size {
                config.infer.size = size;
            }
            let manifest = load_voc_manifest(&data, "all")?;
            let outcome = patchfuse::infer::infer(&config, &params, &manifest, &out)?;
            println!(
                "wrote masks for {} images under {}",
                outcome.images,
                out.display()
            );
            println!("  baseline: {}", outcome.bpm_dir.display());
            if let Some(dir) = outcome.crf_dir {
                println!("  refined:  {}", dir.display());
            }
            Ok(())
        }
        Command::Eval { pred, data, out } => {
            let manifest = load_voc_manifest(&data, "all")?;
            let mut acc = IoUAccumulator::new(manifest.num_classes() + 1);
            let mut evaluated = 0usize;
            for record in &manifest.records {
                let Some(mask_path) = &record.mask_path else {
                    continue;
                };
                let pred_path = pred.join(format!("{}.png", record.id));
                if !pred_path.is_file() {
                    eprintln!("warning: no prediction for {}", record.id);
                    continue;
                }
                acc.add(&load_mask(&pred_path)?, &load_mask(mask_path)?);
                evaluated += 1;
            }
            let report = acc.report();
            let mut names = vec!["background".to_string()];
            names.extend(manifest.class_names.iter().cloned());
            println!(
                "evaluated {evaluated} images ({} skipped)",
                report.skipped_images
            );
            let mut csv = String::from("class,iou\n");
            for (name, iou) in names.iter().zip(&report.per_class_iou) {
                match iou {
                    Some(v) => {
                        println!("  {name:<12} IoU {v:.4}");
                        writeln!(csv, "{name},{v:.6}").unwrap();
                    }
                    None => {
                        println!("  {name:<12} IoU --");
                        writeln!(csv, "{name},").unwrap();
                    }
                }
            }
            println!("mean IoU: {:.4}", report.mean_iou);
            writeln!(csv, "mean,{:.6}", report.mean_iou).unwrap();
            if let Some(path) = out {
                std::fs::write(path, csv)?;
            }
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let cfg = patchfuse::verify::suite_config();
            let seed_list: Vec<u64> = (0..seeds).collect();
            let mut all_pass = true;
            println!("operation gradient checks ({seeds} seeds):");
            for outcome in patchfuse::verify::op_gradchecks(&seed_list, &cfg) {
                let mark = if outcome.report.pass { "pass" } else { "FAIL" };
                all_pass &= outcome.report.pass;
                println!(
                    "  {:<18} {}  max rel {:.3e}  (abs fallback {:.3e}, {} checked)",
                    outcome.name,
                    mark,
                    outcome.report.max_rel_err,
                    outcome.report.max_abs_err,
                    outcome.report.checked
                );
            }
            println!("full model, 2x2 patch grid:");
            for outcome in patchfuse::verify::model_gradchecks(&seed_list, &cfg) {
                let mark = if outcome.report.pass { "pass" } else { "FAIL" };
                all_pass &= outcome.report.pass;
                println!(
                    "  {:<22} {}  max rel {:.3e}  ({} checked)",
                    outcome.name, mark, outcome.report.max_rel_err, outcome.report.checked
                );
            }
            if all_pass {
                println!("all gradient checks passed");
                Ok(())
            } else {
                Err(Error::Train("gradient checks failed".into()))
            }
        }
        Command::Ablate {
            config,
            train_data,
            eval_data,
            out,
            seeds,
        } => {
            let mut config = config.build()?;
            if let Some(dir) = train_data {
                config.data.train_dir = dir.to_string_lossy().into_owned();
            }
            if let Some(dir) = eval_data {
                config.data.eval_dir = dir.to_string_lossy().into_owned();
            }
            let rows = patchfuse::ablate::ablate(&config, &seeds, &out)?;
            println!("{:<16} {:>10}", "variant", "mean mIoU");
            for row in &rows {
                println!("{:<16} {:>10.4}", row.variant.name, row.mean_miou);
            }
            println!("table: {}", out.join("ablation.csv").display());
            Ok(())
        }
        Command::BenchScaling { small, large, runs } => {
            let report = patchfuse::bench::scaling_benchmark(small, large, runs);
            println!(
                "context fusion      s={}: {:.4}s   s={}: {:.4}s   ratio {:.2}",
                report.small_s,
                report.fusion_seconds.0,
                report.large_s,
                report.fusion_seconds.1,
                report.fusion_ratio
            );
            println!(
                "quadratic attention s={}: {:.4}s   s={}: {:.4}s   ratio {:.2}",
                report.small_s,
                report.attention_seconds.0,
                report.large_s,
                report.attention_seconds.1,
                report.attention_ratio
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
