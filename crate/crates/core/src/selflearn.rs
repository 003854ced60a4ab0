//! Two-stage training with iterative CAM-driven augmentation.
//!
//! Round 0 trains from scratch with splicing only. Each later round extracts
//! trusted regions from the previous round's best model, feeds them into the
//! splice augmenter as replacement positives, retrains at the second-stage
//! learning rate, and keeps the epoch checkpoint with the lowest validation
//! loss. The loop ends when the loss fails to improve on the running minimum
//! in two consecutive rounds, or when the round budget runs out.
//!
//! Every round persists its checkpoint and region set under the run
//! directory, and all randomness is derived from (seed, purpose, round,
//! epoch, sample), so an interrupted run resumes into exactly the state an
//! uninterrupted run would have reached.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    bce_loss, forward, load_checkpoint, save_checkpoint, train_step, BackendParams,
    CheckpointMeta, Scalar, TrainConfig,
};
use crate::cam::{compute_cam, extract_trusted_region, ClassId, TrustedRegion};
use crate::config::PipelineConfig;
use crate::corpus::{LabelVector, Manifest, Partition};
use crate::error::{Error, Result};
use crate::imageops::{
    apply_basic_augments, load_image, normalize, resize_bilinear, save_png, ImageTensor,
};
use crate::rng::{derive_rng, hash_str, stream};
use crate::splice::{splice_augment, NegativePool};

/// A manifest sample with its decoded image.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub label: LabelVector,
    pub partition: Partition,
    pub image: ImageTensor,
}

/// Decodes every image in the manifest.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<LoadedSample>> {
    manifest
        .samples()
        .iter()
        .map(|s| {
            Ok(LoadedSample {
                id: s.id.clone(),
                label: s.label,
                partition: s.partition,
                image: load_image(&s.image_path)?,
            })
        })
        .collect()
}

/// Result of one training stage.
pub struct StageOutcome<F: Scalar> {
    pub params: BackendParams<F>,
    pub best_val_loss: f64,
    /// 1-based epoch index of the kept checkpoint.
    pub best_epoch: u32,
    pub epoch_val_losses: Vec<f64>,
}

/// Index of the minimum loss, first occurrence on ties.
fn argmin_epoch(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

fn build_pool(samples: &[LoadedSample], canvas: usize) -> Result<NegativePool> {
    NegativePool::from_entries(
        samples
            .iter()
            .filter(|s| s.partition == Partition::SimpleNegative)
            .map(|s| {
                Ok((
                    s.id.clone(),
                    s.partition,
                    resize_bilinear(&s.image, canvas, canvas)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Builds one epoch's model inputs: every sample, plus fresh splice outputs
/// for each positive; each item is resized to the model input, passed
/// through the stochastic augment stack, and normalized.
#[allow(clippy::too_many_arguments)]
fn assemble_items(
    samples: &[LoadedSample],
    pool: &NegativePool,
    regions: &[TrustedRegion],
    cfg: &PipelineConfig,
    round: u32,
    epoch: u32,
    is_val: bool,
    augment: bool,
) -> Result<(Vec<ImageTensor>, Vec<LabelVector>)> {
    let s = cfg.model.input_size;
    let (splice_tag, basic_tag, val_marker) = if is_val {
        (stream::VAL_SPLICE, stream::VAL_BASIC, 1u64)
    } else {
        (stream::SPLICE, stream::BASIC, 0u64)
    };

    let mut raw: Vec<(ImageTensor, LabelVector)> = Vec::with_capacity(samples.len());
    for sample in samples {
        raw.push((sample.image.clone(), sample.label));
        if augment && sample.label.is_positive() {
            let id_hash = hash_str(&sample.id);
            let region_crop = if regions.is_empty() {
                None
            } else {
                let mut rr = derive_rng(
                    cfg.seed,
                    &[stream::REGION, val_marker, u64::from(round), u64::from(epoch), id_hash],
                );
                Some(&regions[rr.random_range(0..regions.len())].crop)
            };
            let mut rng = derive_rng(
                cfg.seed,
                &[splice_tag, u64::from(round), u64::from(epoch), id_hash],
            );
            let out = splice_augment(
                &sample.image,
                sample.label,
                pool,
                region_crop,
                &cfg.augment.splice,
                &mut rng,
            )?;
            for img in out.images {
                raw.push((img, out.label));
            }
        }
    }

    let mut images = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    for (idx, (img, label)) in raw.into_iter().enumerate() {
        let resized = resize_bilinear(&img, s, s)?;
        let augmented = if augment {
            let mut rng = derive_rng(
                cfg.seed,
                &[basic_tag, u64::from(round), u64::from(epoch), idx as u64],
            );
            apply_basic_augments(&resized, &cfg.augment.basic, &mut rng)
        } else {
            resized
        };
        images.push(normalize(&augmented, &cfg.normalization)?);
        labels.push(label);
    }
    Ok((images, labels))
}

fn validation_loss<F: Scalar>(
    params: &BackendParams<F>,
    images: &[ImageTensor],
    labels: &[LabelVector],
) -> Result<f64> {
    let mut logits = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let out = forward(params, chunk)?;
        logits.extend(out.logits);
    }
    bce_loss(&logits, labels)
}

/// Trains for `epochs_per_round` epochs and returns the epoch checkpoint
/// with the minimum validation loss. The augment stack applies to both
/// training and validation batches (validation subject to the config flag).
pub fn train_stage<F: Scalar>(
    train: &[LoadedSample],
    val: &[LoadedSample],
    params0: BackendParams<F>,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
    round: u32,
    regions: &[TrustedRegion],
) -> Result<StageOutcome<F>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Train("train and validation sets must be nonempty".into()));
    }
    let canvas = cfg.augment.splice.canvas_size;
    let train_pool = build_pool(train, canvas)?;
    let val_pool = build_pool(val, canvas)?;

    let mut params = params0;
    let mut best: Option<(f64, u32, BackendParams<F>)> = None;
    let mut epoch_val_losses = Vec::with_capacity(train_cfg.epochs_per_round);

    for epoch in 1..=train_cfg.epochs_per_round as u32 {
        let (images, labels) =
            assemble_items(train, &train_pool, regions, cfg, round, epoch, false, true)?;

        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng = derive_rng(
            cfg.seed,
            &[stream::SHUFFLE, u64::from(round), u64::from(epoch)],
        );
        order.shuffle(&mut shuffle_rng);

        for batch_idx in order.chunks(train_cfg.batch_size) {
            let batch: Vec<ImageTensor> =
                batch_idx.iter().map(|&i| images[i].clone()).collect();
            let batch_labels: Vec<LabelVector> =
                batch_idx.iter().map(|&i| labels[i]).collect();
            let (next, loss) = train_step(&params, &batch, &batch_labels, train_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite training loss in round {round} epoch {epoch}"
                )));
            }
            params = next;
        }

        let (val_images, val_labels) = assemble_items(
            val,
            &val_pool,
            regions,
            cfg,
            round,
            epoch,
            true,
            cfg.train.augment_validation,
        )?;
        let val_loss = validation_loss(&params, &val_images, &val_labels)?;
        if !val_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite validation loss in round {round} epoch {epoch}"
            )));
        }
        epoch_val_losses.push(val_loss);
        let improved = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    let (best_val_loss, best_epoch, best_params) = best.expect("at least one epoch ran");
    debug_assert_eq!(
        best_epoch as usize - 1,
        argmin_epoch(&epoch_val_losses),
        "kept checkpoint must be the first loss minimum"
    );
    Ok(StageOutcome {
        params: best_params,
        best_val_loss,
        best_epoch,
        epoch_val_losses,
    })
}

/// True when the last two rounds each failed to strictly improve on the
/// running minimum established before them.
pub fn should_stop(history: &[f64]) -> bool {
    let mut best = f64::INFINITY;
    let mut trailing_fails = 0u32;
    for &loss in history {
        if loss < best {
            best = loss;
            trailing_fails = 0;
        } else {
            trailing_fails += 1;
        }
    }
    trailing_fails >= 2
}

/// Runs CAM extraction over the positive samples and keeps regions whose
/// bounding box reaches `min_area` pixels.
pub fn extract_regions<F: Scalar>(
    params: &BackendParams<F>,
    samples: &[LoadedSample],
    cfg: &PipelineConfig,
) -> Result<Vec<TrustedRegion>> {
    let s = cfg.model.input_size;
    let mut regions = Vec::new();
    for sample in samples {
        if !sample.label.is_positive() {
            continue;
        }
        let input = normalize(&resize_bilinear(&sample.image, s, s)?, &cfg.normalization)?;
        let out = forward(params, std::slice::from_ref(&input))?;
        let target = (sample.image.height(), sample.image.width());
        let mut cams = Vec::new();
        for class in ClassId::ALL {
            if class.flag(sample.label) {
                cams.push(compute_cam(
                    &out.feature_maps[0],
                    &params.head_weight,
                    &params.head_bias,
                    class,
                    target,
                )?);
            }
        }
        if let Some(region) = extract_trusted_region(&sample.image, &cams, &sample.id) {
            let (_, _, w, h) = region.bbox;
            if w * h >= cfg.train.min_region_area {
                regions.push(region);
            }
        }
    }
    Ok(regions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Running,
    Converged,
    MaxRounds,
}

/// One completed training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u32,
    pub best_val_loss: f64,
    pub best_epoch: u32,
    /// Relative to the run directory.
    pub checkpoint_path: PathBuf,
    pub region_count: usize,
    pub wall_time_secs: f64,
}

/// Loop history plus the current generation of trusted regions (rebuilt
/// wholesale each round, never accumulated).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LoopState {
    pub history: Vec<RoundRecord>,
    pub status: LoopStatus,
    #[serde(skip)]
    pub trusted_regions: Vec<TrustedRegion>,
}

impl Default for LoopStatus {
    fn default() -> Self {
        LoopStatus::Running
    }
}

impl LoopState {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.best_val_loss).collect()
    }

    /// The globally best round so far (minimum validation loss, earliest on
    /// ties): the model the run reports.
    pub fn best_round(&self) -> Option<&RoundRecord> {
        self.history.iter().fold(None, |best, r| match best {
            None => Some(r),
            Some(b) if r.best_val_loss < b.best_val_loss => Some(r),
            Some(b) => Some(b),
        })
    }

    fn has_round(&self, round: u32) -> bool {
        self.history.iter().any(|r| r.round_index == round)
    }

    fn record_for(&self, round: u32) -> Option<&RoundRecord> {
        self.history.iter().find(|r| r.round_index == round)
    }
}

fn history_path(run_dir: &Path) -> PathBuf {
    run_dir.join("history.json")
}

fn persist_state(state: &LoopState, run_dir: &Path) -> Result<()> {
    let path = history_path(run_dir);
    let json = serde_json::to_string_pretty(state).expect("state serialization");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a previously persisted loop state, if any.
pub fn load_state(run_dir: &Path) -> Result<Option<LoopState>> {
    let path = history_path(run_dir);
    if !path.exists() {
        return Ok(None);
    }
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: LoopState = serde_json::from_str(&raw)
        .map_err(|e| Error::Train(format!("{}: {e}", path.display())))?;
    Ok(Some(state))
}

#[derive(Serialize)]
struct RegionInfo<'a> {
    source_id: &'a str,
    bbox: (usize, usize, usize, usize),
    mask_area: usize,
}

fn persist_regions(regions: &[TrustedRegion], round_dir: &Path) -> Result<()> {
    let dir = round_dir.join("regions");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for region in regions {
        save_png(&region.crop, &dir.join(format!("{}.png", region.source_id)))?;
    }
    let infos: Vec<RegionInfo> = regions
        .iter()
        .map(|r| RegionInfo {
            source_id: &r.source_id,
            bbox: r.bbox,
            mask_area: r.mask_area(),
        })
        .collect();
    let path = round_dir.join("regions.json");
    let json = serde_json::to_string_pretty(&infos).expect("region serialization");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// The full loop: stage-1 round 0 (when not already on disk), then up to
/// `max_rounds` self-learning rounds. Resumable from the run directory; the
/// returned state matches what an uninterrupted run would produce.
pub fn selflearn_loop(
    train: &[LoadedSample],
    val: &[LoadedSample],
    cfg: &PipelineConfig,
    max_rounds: u32,
    run_dir: &Path,
) -> Result<LoopState> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let mut state = load_state(run_dir)?.unwrap_or_default();
    state.status = LoopStatus::Running;

    if !state.has_round(0) {
        let start = Instant::now();
        let params0 = BackendParams::<f32>::init(&cfg.model, cfg.seed)?;
        let outcome = train_stage(
            train,
            val,
            params0,
            &cfg.stage_train_config(1),
            cfg,
            0,
            &[],
        )?;
        let rel = PathBuf::from("rounds/0/checkpoint.sfck");
        save_checkpoint(
            &outcome.params,
            &CheckpointMeta {
                round: 0,
                epoch: outcome.best_epoch,
                val_loss: outcome.best_val_loss,
            },
            &run_dir.join(&rel),
        )?;
        state.history.push(RoundRecord {
            round_index: 0,
            best_val_loss: outcome.best_val_loss,
            best_epoch: outcome.best_epoch,
            checkpoint_path: rel,
            region_count: 0,
            wall_time_secs: start.elapsed().as_secs_f64(),
        });
        persist_state(&state, run_dir)?;
        log::info!(
            "round 0: best val loss {:.6} at epoch {}",
            state.history[0].best_val_loss,
            state.history[0].best_epoch
        );
    }

    for round in 1..=max_rounds {
        if state.has_round(round) {
            continue;
        }
        if should_stop(&state.losses()) {
            state.status = LoopStatus::Converged;
            persist_state(&state, run_dir)?;
            return Ok(state);
        }
        let start = Instant::now();
        let prev = state
            .record_for(round - 1)
            .ok_or_else(|| Error::Train(format!("round {} record missing", round - 1)))?;
        let (prev_params, _) =
            load_checkpoint::<f32>(&run_dir.join(&prev.checkpoint_path))?;

        // Regions for round r always come from the round r-1 model.
        let regions = extract_regions(&prev_params, train, cfg)?;
        let round_dir = run_dir.join(format!("rounds/{round}"));
        std::fs::create_dir_all(&round_dir).map_err(|e| Error::io(&round_dir, e))?;
        persist_regions(&regions, &round_dir)?;
        if regions.is_empty() {
            log::warn!("round {round}: no trusted regions extracted; running without them");
        }

        let outcome = train_stage(
            train,
            val,
            prev_params,
            &cfg.stage_train_config(2),
            cfg,
            round,
            &regions,
        )?;
        let rel = PathBuf::from(format!("rounds/{round}/checkpoint.sfck"));
        save_checkpoint(
            &outcome.params,
            &CheckpointMeta {
                round,
                epoch: outcome.best_epoch,
                val_loss: outcome.best_val_loss,
            },
            &run_dir.join(&rel),
        )?;
        state.history.push(RoundRecord {
            round_index: round,
            best_val_loss: outcome.best_val_loss,
            best_epoch: outcome.best_epoch,
            checkpoint_path: rel,
            region_count: regions.len(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        });
        state.trusted_regions = regions;
        persist_state(&state, run_dir)?;
        log::info!(
            "round {round}: best val loss {:.6} at epoch {} ({} regions)",
            outcome.best_val_loss,
            outcome.best_epoch,
            state.trusted_regions.len()
        );
    }

    state.status = if should_stop(&state.losses()) {
        LoopStatus::Converged
    } else {
        LoopStatus::MaxRounds
    };
    persist_state(&state, run_dir)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule_analytic_cases() {
        assert!(should_stop(&[0.5, 0.6, 0.7]));
        assert!(!should_stop(&[0.5, 0.6, 0.4]));
        assert!(!should_stop(&[0.5]));
        assert!(!should_stop(&[0.5, 0.6]));
        // Non-improvement measured against the running minimum, not the
        // previous entry.
        assert!(should_stop(&[0.6, 0.5, 0.55, 0.52]));
        assert!(!should_stop(&[0.6, 0.5, 0.55, 0.45]));
        assert!(should_stop(&[0.5, 0.5, 0.5]));
    }

    #[test]
    fn argmin_takes_first_minimum() {
        assert_eq!(argmin_epoch(&[0.9, 0.7, 0.8]), 1);
        assert_eq!(argmin_epoch(&[0.9, 0.7, 0.7]), 1);
        assert_eq!(argmin_epoch(&[0.3]), 0);
    }

    #[test]
    fn best_round_is_global_minimum() {
        let rec = |round, loss| RoundRecord {
            round_index: round,
            best_val_loss: loss,
            best_epoch: 1,
            checkpoint_path: PathBuf::from(format!("rounds/{round}/checkpoint.sfck")),
            region_count: 0,
            wall_time_secs: 0.0,
        };
        let state = LoopState {
            history: vec![rec(0, 0.8), rec(1, 0.5), rec(2, 0.6)],
            status: LoopStatus::MaxRounds,
            trusted_regions: Vec::new(),
        };
        assert_eq!(state.best_round().unwrap().round_index, 1);
    }
}
