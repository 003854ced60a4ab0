//! Command-line driver for the smoke/fire pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use smokefire::backend::load_checkpoint;
use smokefire::cam::{compute_cam, extract_trusted_region, render_overlay, ClassId};
use smokefire::config::{parse_config, PipelineConfig};
use smokefire::corpus::{
    load_manifest, save_manifest, split_train_val, synth_generate, Palette, Partition, SplitSpec,
    SynthCounts, SynthSpec,
};
use smokefire::eval::{evaluate, EvalReport};
use smokefire::imageops::{load_image, normalize, resize_bilinear, save_png};
use smokefire::rng::{derive_rng, stream};
use smokefire::selflearn::{load_samples, selflearn_loop};
use smokefire::splice::{splice_augment, NegativePool};

#[derive(Parser)]
#[command(
    name = "smokefire",
    version,
    about = "Multi-label smoke/fire classifier with stitch-based augmentation and CAM-guided self-learning"
)]
struct Cli {
    /// JSON config file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed. Defaults to the config value (0 when unset).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus (images + manifest + truth).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fire: usize,
        #[arg(long, default_value_t = 0)]
        smoke: usize,
        #[arg(long, default_value_t = 0)]
        both: usize,
        #[arg(long, default_value_t = 0)]
        simple: usize,
        #[arg(long, default_value_t = 0)]
        complex: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Object diameter as a fraction of image size: "lo,hi".
        #[arg(long, default_value = "0.30,0.55")]
        object_scale: String,
        /// Background family: standard | shifted.
        #[arg(long, default_value = "standard")]
        palette: String,
    },
    /// Stratified 80/20 split of a manifest into train and validation.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        val_out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Stage-1 training: splicing augmentation only, one round.
    Train {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Override config epochs_per_round.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override config batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Stage-2 self-learning rounds; resumes from the run directory.
    Selflearn {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        max_rounds: u32,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a manifest with a checkpoint; prints the metric table.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Write stitched previews plus a JSON sidecar for the first positives.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Write per-class CAM overlays plus a JSON sidecar.
    CamOverlay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sample ids; defaults to the first positives.
        #[arg(long)]
        ids: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = parse_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_scale(raw: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 2 {
        bail!("object-scale must be \"lo,hi\", got '{raw}'");
    }
    Ok((parts[0].trim().parse()?, parts[1].trim().parse()?))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".to_string())
}

fn print_report(name: &str, report: &EvalReport) {
    println!(
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "Method", "Smoke TPR", "Fire TPR", "Smoke FPR", "Fire FPR", "Smoke AUC", "Fire AUC"
    );
    println!(
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        name,
        fmt_opt(report.smoke.tpr),
        fmt_opt(report.fire.tpr),
        fmt_opt(report.smoke.fpr),
        fmt_opt(report.fire.fpr),
        fmt_opt(report.smoke.auc),
        fmt_opt(report.fire.auc),
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    log::info!("seed={}", cfg.seed);
    log::debug!("resolved config: {}", cfg.to_json_pretty());

    match cli.command {
        Command::Synth {
            out,
            fire,
            smoke,
            both,
            simple,
            complex,
            size,
            object_scale,
            palette,
        } => {
            let palette = match palette.as_str() {
                "standard" => Palette::Standard,
                "shifted" => Palette::Shifted,
                other => bail!("unknown palette '{other}' (expected standard|shifted)"),
            };
            let spec = SynthSpec {
                counts: SynthCounts {
                    fire_only: fire,
                    smoke_only: smoke,
                    fire_and_smoke: both,
                    simple_negative: simple,
                    complex_negative: complex,
                },
                image_size: size,
                seed: cfg.seed,
                object_scale: parse_scale(&object_scale)?,
                palette,
            };
            let output = synth_generate(&spec, &out)?;
            if !output.manifest.is_empty() {
                cfg.write_resolved(&out)?;
            }
            println!(
                "synth: wrote {} samples to {}",
                output.manifest.len(),
                out.display()
            );
        }
        Command::Split {
            manifest,
            train_out,
            val_out,
            train_fraction,
        } => {
            let m = load_manifest(&manifest)?;
            let spec = SplitSpec {
                train_fraction,
                seed: cfg.seed,
            };
            let (train, val) = split_train_val(&m, &spec)?;
            save_manifest(&train, &train_out)?;
            save_manifest(&val, &val_out)?;
            println!("split: {} train / {} val", train.len(), val.len());
        }
        Command::Train {
            train_manifest,
            val_manifest,
            run_dir,
            epochs,
            batch_size,
        } => {
            let state = run_training(
                &cfg, train_manifest, val_manifest, run_dir, epochs, batch_size, 0,
            )?;
            let best = state.best_round().expect("round 0 recorded");
            println!(
                "train: best val loss {:.6} at epoch {} (checkpoint {})",
                best.best_val_loss,
                best.best_epoch,
                best.checkpoint_path.display()
            );
        }
        Command::Selflearn {
            train_manifest,
            val_manifest,
            run_dir,
            max_rounds,
            epochs,
            batch_size,
        } => {
            let state = run_training(
                &cfg,
                train_manifest,
                val_manifest,
                run_dir,
                epochs,
                batch_size,
                max_rounds,
            )?;
            let best = state.best_round().expect("at least round 0");
            println!(
                "selflearn: {:?} after {} round(s); best val loss {:.6} (checkpoint {})",
                state.status,
                state.history.len(),
                best.best_val_loss,
                best.checkpoint_path.display()
            );
        }
        Command::Eval {
            manifest,
            checkpoint,
            threshold,
            report_out,
        } => {
            let m = load_manifest(&manifest)?;
            let (params, meta) = load_checkpoint::<f32>(&checkpoint)?;
            let threshold = threshold.unwrap_or(cfg.eval.threshold);
            let report = evaluate(&params, &m, &cfg.normalization, threshold)?;
            let name = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string());
            log::info!("checkpoint round {} epoch {}", meta.round, meta.epoch);
            print_report(&name, &report);
            if let Some(path) = report_out {
                let json = serde_json::to_string_pretty(&report)?;
                std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("eval: report written to {}", path.display());
            }
        }
        Command::AugmentPreview {
            manifest,
            out,
            count,
        } => {
            augment_preview(&cfg, &manifest, &out, count)?;
        }
        Command::CamOverlay {
            manifest,
            checkpoint,
            out,
            ids,
            alpha,
            limit,
        } => {
            cam_overlay(&cfg, &manifest, &checkpoint, &out, ids, alpha, limit)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    cfg: &PipelineConfig,
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    max_rounds: u32,
) -> anyhow::Result<smokefire::selflearn::LoopState> {
    let mut cfg = cfg.clone();
    if let Some(e) = epochs {
        cfg.train.epochs_per_round = e;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    let train_path = train_manifest
        .or_else(|| cfg.paths.train_manifest.clone())
        .context("missing --train-manifest (or paths.train_manifest in config)")?;
    let val_path = val_manifest
        .or_else(|| cfg.paths.val_manifest.clone())
        .context("missing --val-manifest (or paths.val_manifest in config)")?;
    let run_dir = run_dir
        .or_else(|| cfg.paths.run_dir.clone())
        .context("missing --run-dir (or paths.run_dir in config)")?;
    cfg.validate()?;
    cfg.write_resolved(&run_dir)?;

    let train = load_samples(&load_manifest(&train_path)?)?;
    let val = load_samples(&load_manifest(&val_path)?)?;
    Ok(selflearn_loop(&train, &val, &cfg, max_rounds, &run_dir)?)
}

fn augment_preview(
    cfg: &PipelineConfig,
    manifest: &Path,
    out: &Path,
    count: usize,
) -> anyhow::Result<()> {
    let m = load_manifest(manifest)?;
    let canvas = cfg.augment.splice.canvas_size;
    let pool = NegativePool::from_entries(
        m.samples()
            .iter()
            .filter(|s| s.partition == Partition::SimpleNegative)
            .map(|s| {
                let img = load_image(&s.image_path)?;
                Ok((
                    s.id.clone(),
                    s.partition,
                    resize_bilinear(&img, canvas, canvas)?,
                ))
            })
            .collect::<smokefire::Result<Vec<_>>>()?,
    )?;

    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    #[derive(serde::Serialize)]
    struct PreviewEntry {
        source_id: String,
        trace: smokefire::splice::SpliceTrace,
        outputs: Vec<String>,
    }
    let mut entries = Vec::new();
    for (idx, sample) in m
        .samples()
        .iter()
        .filter(|s| s.label.is_positive())
        .take(count)
        .enumerate()
    {
        let img = load_image(&sample.image_path)?;
        let mut rng = derive_rng(cfg.seed, &[stream::PREVIEW, idx as u64]);
        let result = splice_augment(
            &img,
            sample.label,
            &pool,
            None,
            &cfg.augment.splice,
            &mut rng,
        )?;
        let mut outputs = Vec::new();
        for (j, stitched) in result.images.iter().enumerate() {
            let name = format!("{}_aug{}.png", sample.id, j);
            save_png(stitched, &out.join(&name))?;
            outputs.push(name);
        }
        entries.push(PreviewEntry {
            source_id: sample.id.clone(),
            trace: result.trace,
            outputs,
        });
    }
    let sidecar = out.join("preview.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&entries)?)?;
    println!(
        "augment-preview: {} positives processed, sidecar {}",
        entries.len(),
        sidecar.display()
    );
    Ok(())
}

fn cam_overlay(
    cfg: &PipelineConfig,
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
    ids: Option<String>,
    alpha: f64,
    limit: usize,
) -> anyhow::Result<()> {
    let m = load_manifest(manifest)?;
    let (params, _) = load_checkpoint::<f32>(checkpoint)?;
    let s = params.arch.input_size;

    let selected: Vec<&smokefire::corpus::Sample> = match ids {
        Some(list) => {
            let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
            m.samples()
                .iter()
                .filter(|smp| wanted.contains(&smp.id.as_str()))
                .collect()
        }
        None => m
            .samples()
            .iter()
            .filter(|smp| smp.label.is_positive())
            .take(limit)
            .collect(),
    };
    if selected.is_empty() {
        bail!("no samples selected for overlay");
    }

    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    #[derive(serde::Serialize)]
    struct OverlayEntry {
        id: String,
        class: String,
        logit: f64,
        gap_residual: f64,
        bbox: Option<(usize, usize, usize, usize)>,
        mask_area: usize,
        output: String,
    }
    let mut entries = Vec::new();
    for sample in selected {
        let img = load_image(&sample.image_path)?;
        let input = normalize(&resize_bilinear(&img, s, s)?, &cfg.normalization)?;
        let fwd = smokefire::backend::forward(&params, std::slice::from_ref(&input))?;
        for class in ClassId::ALL {
            let cam = compute_cam(
                &fwd.feature_maps[0],
                &params.head_weight,
                &params.head_bias,
                class,
                (img.height(), img.width()),
            )?;
            let logit = f64::from(fwd.logits[0][class.index()]);
            let residual = cam.gap_residual(logit);
            let overlay = render_overlay(&img, &cam, alpha)?;
            let name = format!("{}_{}.png", sample.id, class.as_str());
            save_png(&overlay, &out.join(&name))?;
            let region = extract_trusted_region(&img, std::slice::from_ref(&cam), &sample.id);
            entries.push(OverlayEntry {
                id: sample.id.clone(),
                class: class.as_str().to_string(),
                logit,
                gap_residual: residual,
                bbox: region.as_ref().map(|r| r.bbox),
                mask_area: region.map(|r| r.mask_area()).unwrap_or(0),
                output: name,
            });
        }
    }
    let sidecar = out.join("overlays.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&entries)?)?;
    println!(
        "cam-overlay: {} overlays written, sidecar {}",
        entries.len(),
        sidecar.display()
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
