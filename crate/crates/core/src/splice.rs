//! Random-splicing augmentation.
//!
//! A positive image is stitched to randomly drawn simple negatives along a
//! random side. When a trusted region is supplied, the positive is first
//! rebuilt by pasting a randomly rescaled copy of the region onto a random
//! negative canvas. Outputs keep the positive's labels verbatim and are
//! stored at double extent (2W×H or W×2H); compression to model input size
//! happens at batch-assembly time.
//!
//! Draw order per call is fixed and documented so seeded tests can replay
//! the stream: gate, then (region branch: negative index, height, width,
//! paste x, paste y), then n, then per stitch: negative index, direction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelVector, Partition};
use crate::error::{Error, Result};
use crate::imageops::{concat_images, paste_region, resize_bilinear, Direction, ImageTensor};

/// Splicing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability that a call performs augmentation at all.
    pub theta: f64,
    /// The stitch count is drawn uniformly from `0..=max_negatives`.
    pub max_negatives: u32,
    /// Square side to which both stitch operands are resized.
    pub canvas_size: usize,
    /// Closed interval for the trusted region's rescaled height and width.
    pub region_scale_interval: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            theta: 0.5,
            max_negatives: 2,
            canvas_size: 224,
            region_scale_interval: (100, 224),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "theta must be in [0, 1], got {}",
                self.theta
            )));
        }
        if self.canvas_size == 0 {
            return Err(Error::Config("canvas_size must be positive".into()));
        }
        let (lo, hi) = self.region_scale_interval;
        if lo == 0 || lo > hi || hi > self.canvas_size {
            return Err(Error::Config(format!(
                "region_scale_interval must satisfy 1 <= lo <= hi <= canvas_size, \
                 got ({lo}, {hi}) with canvas {}",
                self.canvas_size
            )));
        }
        Ok(())
    }
}

/// Pool of stitching material. Construction checks provenance: only
/// simple-negative images are accepted.
#[derive(Clone, Debug)]
pub struct NegativePool {
    entries: Vec<(String, ImageTensor)>,
}

impl NegativePool {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (String, Partition, ImageTensor)>,
    ) -> Result<Self> {
        let mut pool = Vec::new();
        for (id, partition, image) in entries {
            if partition != Partition::SimpleNegative {
                return Err(Error::Manifest(format!(
                    "negative pool requires simple_negative samples; '{id}' is {}",
                    partition.as_str()
                )));
            }
            pool.push((id, image));
        }
        Ok(NegativePool { entries: pool })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> (&str, &ImageTensor) {
        let (id, img) = &self.entries[i];
        (id, img)
    }
}

/// How the region branch placed the rescaled crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPasteTrace {
    pub neg_id: String,
    pub height: usize,
    pub width: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchTrace {
    pub neg_id: String,
    pub dir: Direction,
}

/// Replayable record of the draws a call made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceTrace {
    pub gate_draw: f64,
    pub gate_fired: bool,
    pub region_paste: Option<RegionPasteTrace>,
    pub n: u32,
    pub stitches: Vec<StitchTrace>,
}

/// Stitched images plus the shared label they carry.
#[derive(Clone, Debug)]
pub struct SpliceOutput {
    pub images: Vec<ImageTensor>,
    pub label: LabelVector,
    pub trace: SpliceTrace,
}

fn resize_to_canvas(img: &ImageTensor, canvas: usize) -> Result<ImageTensor> {
    resize_bilinear(img, canvas, canvas)
}

/// Rescales `region` to independently drawn height/width inside the
/// configured interval and pastes it at a random in-bounds position on a
/// negative canvas. The canvas must already be `canvas_size` square.
pub fn make_positive_from_region(
    region: &ImageTensor,
    neg_canvas: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    make_positive_from_region_traced(region, neg_canvas, cfg, rng).map(|(img, _)| img)
}

fn make_positive_from_region_traced(
    region: &ImageTensor,
    neg_canvas: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, (usize, usize, usize, usize))> {
    cfg.validate()?;
    if region.height() == 0 || region.width() == 0 {
        return Err(Error::Shape("trusted region has zero area".into()));
    }
    let canvas = cfg.canvas_size;
    if neg_canvas.height() != canvas || neg_canvas.width() != canvas {
        return Err(Error::Shape(format!(
            "negative canvas must be {canvas}x{canvas}, got {}x{}",
            neg_canvas.height(),
            neg_canvas.width()
        )));
    }
    let (lo, hi) = cfg.region_scale_interval;
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    let scaled = resize_bilinear(region, h, w)?;
    let x = rng.random_range(0..=canvas - w);
    let y = rng.random_range(0..=canvas - h);
    let out = paste_region(neg_canvas, &scaled, x, y)?;
    Ok((out, (h, w, x, y)))
}

/// One augmentation call for one positive sample.
///
/// With probability `1 - theta` the gate declines and the output is empty.
/// Otherwise, when a trusted region is present it replaces the positive via
/// [`make_positive_from_region`]; then `n ~ U{0..max_negatives}` stitched
/// images are produced, each pairing the (possibly replaced) positive with a
/// fresh random negative along a random direction.
pub fn splice_augment(
    pos: &ImageTensor,
    pos_label: LabelVector,
    pool: &NegativePool,
    region: Option<&ImageTensor>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SpliceOutput> {
    cfg.validate()?;
    if !pos_label.is_positive() {
        return Err(Error::Manifest(
            "splice_augment requires a positive sample (a true label flag)".into(),
        ));
    }

    let gate_draw: f64 = rng.random();
    let gate_fired = gate_draw < cfg.theta;
    let mut trace = SpliceTrace {
        gate_draw,
        gate_fired,
        region_paste: None,
        n: 0,
        stitches: Vec::new(),
    };
    if !gate_fired {
        return Ok(SpliceOutput {
            images: Vec::new(),
            label: pos_label,
            trace,
        });
    }

    let canvas = cfg.canvas_size;
    let mut positive = None;
    if let Some(region) = region {
        if pool.is_empty() {
            return Err(Error::Manifest(
                "negative pool is empty; cannot place trusted region".into(),
            ));
        }
        let idx = rng.random_range(0..pool.len());
        let (neg_id, neg_img) = pool.get(idx);
        let neg_canvas = resize_to_canvas(neg_img, canvas)?;
        let (built, (h, w, x, y)) =
            make_positive_from_region_traced(region, &neg_canvas, cfg, rng)?;
        trace.region_paste = Some(RegionPasteTrace {
            neg_id: neg_id.to_string(),
            height: h,
            width: w,
            x,
            y,
        });
        positive = Some(built);
    }

    let n = rng.random_range(0..=cfg.max_negatives);
    trace.n = n;
    if n > 0 && pool.is_empty() {
        return Err(Error::Manifest(
            "negative pool is empty; cannot stitch".into(),
        ));
    }

    let pos_canvas = match positive {
        Some(img) => img,
        None => resize_to_canvas(pos, canvas)?,
    };

    let mut images = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let idx = rng.random_range(0..pool.len());
        let (neg_id, neg_img) = pool.get(idx);
        let neg_canvas = resize_to_canvas(neg_img, canvas)?;
        let dir = Direction::ALL[rng.random_range(0..4usize)];
        images.push(concat_images(&pos_canvas, &neg_canvas, dir)?);
        trace.stitches.push(StitchTrace {
            neg_id: neg_id.to_string(),
            dir,
        });
    }

    Ok(SpliceOutput {
        images,
        label: pos_label,
        trace,
    })
}
