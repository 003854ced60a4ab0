//! Synthetic corpus generator.
//!
//! Produces procedural backgrounds with translucent gray plumes ("smoke"),
//! saturated red-orange blobs ("fire"), plain backgrounds (simple negatives),
//! and hue-similar distractors — gray clouds and warm glows — as complex
//! negatives. Object scale and the background palette are knobs so a shifted
//! test set (smaller objects, unseen palette) can be generated from the same
//! code. Everything derives from the spec seed; reruns are byte-identical.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelVector, Manifest, Partition, Sample};
use crate::error::{Error, Result};
use crate::imageops::{save_png, ImageTensor};
use crate::rng::{derive_rng, mix, stream};

/// Per-category sample counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCounts {
    pub fire_only: usize,
    pub smoke_only: usize,
    pub fire_and_smoke: usize,
    pub simple_negative: usize,
    pub complex_negative: usize,
}

impl SynthCounts {
    pub fn total(&self) -> usize {
        self.fire_only
            + self.smoke_only
            + self.fire_and_smoke
            + self.simple_negative
            + self.complex_negative
    }
}

/// Background color family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Standard,
    Shifted,
}

impl Palette {
    /// Gradient endpoint pairs (top color, bottom color).
    fn pairs(self) -> &'static [([f32; 3], [f32; 3]); 4] {
        match self {
            Palette::Standard => &[
                ([0.45, 0.65, 0.85], [0.75, 0.85, 0.95]), // sky
                ([0.18, 0.35, 0.15], [0.45, 0.60, 0.30]), // field
                ([0.35, 0.37, 0.40], [0.60, 0.60, 0.62]), // urban
                ([0.45, 0.35, 0.25], [0.70, 0.60, 0.45]), // earth
            ],
            Palette::Shifted => &[
                ([0.30, 0.15, 0.45], [0.60, 0.40, 0.70]), // dusk purple
                ([0.05, 0.35, 0.40], [0.30, 0.65, 0.65]), // teal
                ([0.05, 0.08, 0.20], [0.20, 0.25, 0.45]), // night blue
                ([0.50, 0.50, 0.20], [0.80, 0.75, 0.45]), // olive
            ],
        }
    }
}

/// Generator parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub counts: SynthCounts,
    pub image_size: usize,
    pub seed: u64,
    /// Object diameter as a fraction of image size, uniform in this interval.
    pub object_scale: (f64, f64),
    pub palette: Palette,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            counts: SynthCounts::default(),
            image_size: 64,
            seed: 0,
            object_scale: (0.30, 0.55),
            palette: Palette::Standard,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "object_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Smoke,
    Fire,
}

/// Ground-truth placement of one rendered object, for diagnostics and
/// localization checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub id: String,
    pub kind: ObjectKind,
    /// (x, y, w, h) in image pixels.
    pub bbox: (usize, usize, usize, usize),
}

pub struct SynthOutput {
    pub manifest: Manifest,
    pub truths: Vec<ObjectTruth>,
}

/// Integer hash noise in [0, 1); stable across runs.
fn pixel_noise(seed: u64, x: usize, y: usize) -> f32 {
    let h = mix(seed, &[x as u64, y as u64]);
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn gen_background(rng: &mut ChaCha8Rng, palette: Palette, size: usize) -> ImageTensor {
    let pair = palette.pairs()[rng.random_range(0..4usize)];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = rng.random_range(1.5..4.0);
    let noise_seed: u64 = rng.random();
    let mut img = ImageTensor::zeros(size, size, 3);
    for y in 0..size {
        let t = y as f32 / (size - 1) as f32;
        for x in 0..size {
            let band =
                0.04 * ((std::f64::consts::TAU * freq * x as f64 / size as f64 + phase).sin() as f32);
            let n = (pixel_noise(noise_seed, x, y) - 0.5) * 0.05;
            for c in 0..3 {
                let base = pair.0[c] + (pair.1[c] - pair.0[c]) * t;
                img.set(y, x, c, (base + band + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

struct BboxTracker {
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
    any: bool,
}

impl BboxTracker {
    fn new() -> Self {
        BboxTracker {
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
            any: false,
        }
    }

    fn add(&mut self, x: usize, y: usize) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
        self.any = true;
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        if !self.any {
            return (0, 0, 0, 0);
        }
        (
            self.min_x,
            self.min_y,
            self.max_x - self.min_x + 1,
            self.max_y - self.min_y + 1,
        )
    }
}

fn composite(img: &mut ImageTensor, x: usize, y: usize, color: [f32; 3], alpha: f32) {
    for c in 0..3 {
        let v = img.get(y, x, c);
        img.set(y, x, c, (v * (1.0 - alpha) + color[c] * alpha).clamp(0.0, 1.0));
    }
}

/// Multi-lobe translucent gray plume drifting upward.
fn render_smoke(
    img: &mut ImageTensor,
    rng: &mut ChaCha8Rng,
    scale: (f64, f64),
) -> (usize, usize, usize, usize) {
    let size = img.height();
    let d = size as f64 * rng.random_range(scale.0..=scale.1);
    let cx = rng.random_range(0.22..0.78) * size as f64;
    let cy = rng.random_range(0.35..0.70) * size as f64;
    let gray = rng.random_range(0.55..0.80) as f32;
    let noise_seed: u64 = rng.random();
    let mut lobes = Vec::new();
    for k in 0..3 {
        let jitter = rng.random_range(-0.12..0.12) * d;
        let lx = cx + jitter;
        let ly = cy - k as f64 * 0.26 * d;
        let r = d * (0.30 - 0.045 * k as f64) * rng.random_range(0.8..1.2);
        lobes.push((lx, ly, r.max(1.0)));
    }
    let mut bbox = BboxTracker::new();
    for y in 0..size {
        for x in 0..size {
            let mut a = 0.0f64;
            for &(lx, ly, r) in &lobes {
                let d2 = (x as f64 - lx).powi(2) + (y as f64 - ly).powi(2);
                a += (-d2 / (2.0 * r * r)).exp();
            }
            let ragged = 0.75 + 0.5 * f64::from(pixel_noise(noise_seed, x, y));
            let alpha = (a * 0.9 * ragged).clamp(0.0, 0.85) as f32;
            if alpha < 1.0 / 512.0 {
                continue;
            }
            let tint = gray + (pixel_noise(noise_seed ^ 1, x, y) - 0.5) * 0.08;
            composite(img, x, y, [tint, tint, tint], alpha);
            if alpha > 0.05 {
                bbox.add(x, y);
            }
        }
    }
    bbox.bbox()
}

/// Saturated red-orange blob with a bright near-white core.
fn render_fire(
    img: &mut ImageTensor,
    rng: &mut ChaCha8Rng,
    scale: (f64, f64),
) -> (usize, usize, usize, usize) {
    let size = img.height();
    let d = size as f64 * rng.random_range(scale.0..=scale.1);
    let cx = rng.random_range(0.22..0.78) * size as f64;
    let cy = rng.random_range(0.45..0.80) * size as f64;
    let sx = (d * 0.36 * rng.random_range(0.85..1.15)).max(1.0);
    let sy = (d * 0.52 * rng.random_range(0.85..1.15)).max(1.0);
    let noise_seed: u64 = rng.random();
    let core = [1.00f32, 0.93, 0.55];
    let mid = [1.00f32, 0.55, 0.08];
    let edge = [0.80f32, 0.15, 0.02];
    let mut bbox = BboxTracker::new();
    for y in 0..size {
        for x in 0..size {
            let r2 = ((x as f64 - cx) / sx).powi(2) + ((y as f64 - cy) / sy).powi(2);
            let flicker = 1.0 + 0.25 * (f64::from(pixel_noise(noise_seed, x, y)) - 0.5);
            let alpha = ((-r2 * 1.6).exp() * 1.25 * flicker).clamp(0.0, 0.97) as f32;
            if alpha < 1.0 / 512.0 {
                continue;
            }
            let t = r2.sqrt() as f32;
            let color = if t < 0.35 {
                let u = t / 0.35;
                [
                    core[0] + (mid[0] - core[0]) * u,
                    core[1] + (mid[1] - core[1]) * u,
                    core[2] + (mid[2] - core[2]) * u,
                ]
            } else {
                let u = ((t - 0.35) / 0.65).min(1.0);
                [
                    mid[0] + (edge[0] - mid[0]) * u,
                    mid[1] + (edge[1] - mid[1]) * u,
                    mid[2] + (edge[2] - mid[2]) * u,
                ]
            };
            composite(img, x, y, color, alpha);
            if alpha > 0.05 {
                bbox.add(x, y);
            }
        }
    }
    bbox.bbox()
}

/// Distractors: a smooth gray cloud or a dim warm glow. Hue-similar to the
/// positive classes but without plume structure or a bright core.
fn render_distractor(img: &mut ImageTensor, rng: &mut ChaCha8Rng, scale: (f64, f64)) {
    let size = img.height();
    let d = size as f64 * rng.random_range(scale.0..=scale.1);
    let warm = rng.random_range(0..2u32) == 1;
    if warm {
        let cx = rng.random_range(0.2..0.8) * size as f64;
        let cy = rng.random_range(0.2..0.8) * size as f64;
        let r = (d * 0.55).max(1.0);
        let tone = rng.random_range(0.75..0.92) as f32;
        let color = [tone, tone * 0.62, tone * 0.30];
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let alpha = ((-d2 / (2.0 * r * r)).exp() * 0.42) as f32;
                if alpha >= 1.0 / 512.0 {
                    composite(img, x, y, color, alpha);
                }
            }
        }
    } else {
        let cx = rng.random_range(0.25..0.75) * size as f64;
        let cy = rng.random_range(0.15..0.50) * size as f64;
        let rx = (d * 0.65).max(1.0);
        let ry = (d * 0.30).max(1.0);
        let gray = rng.random_range(0.48..0.72) as f32;
        for y in 0..size {
            for x in 0..size {
                let r2 = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                let alpha = ((-r2 * 1.4).exp() * 0.50) as f32;
                if alpha >= 1.0 / 512.0 {
                    composite(img, x, y, [gray, gray, gray], alpha);
                }
            }
        }
    }
}

/// Generates the corpus under `out_dir`: `images/*.png`, `manifest.jsonl`,
/// and `truth.json` with object bounding boxes. With all counts zero nothing
/// is written.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    if spec.counts.total() == 0 {
        return Ok(SynthOutput {
            manifest: Manifest::default(),
            truths: Vec::new(),
        });
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut samples = Vec::new();
    let mut truths = Vec::new();
    let size = spec.image_size;

    // (tag, prefix, count, smoke, fire, partition)
    let plan: [(&str, usize, LabelVector, Partition); 5] = [
        (
            "fire",
            spec.counts.fire_only,
            LabelVector { smoke: false, fire: true },
            Partition::Positive,
        ),
        (
            "smoke",
            spec.counts.smoke_only,
            LabelVector { smoke: true, fire: false },
            Partition::Positive,
        ),
        (
            "both",
            spec.counts.fire_and_smoke,
            LabelVector { smoke: true, fire: true },
            Partition::Positive,
        ),
        (
            "simple",
            spec.counts.simple_negative,
            LabelVector::NEGATIVE,
            Partition::SimpleNegative,
        ),
        (
            "complex",
            spec.counts.complex_negative,
            LabelVector::NEGATIVE,
            Partition::ComplexNegative,
        ),
    ];

    for (tag_idx, (prefix, count, label, partition)) in plan.iter().enumerate() {
        for i in 0..*count {
            let id = format!("{prefix}_{i:04}");
            let mut rng = derive_rng(spec.seed, &[stream::SYNTH, tag_idx as u64, i as u64]);
            let mut img = gen_background(&mut rng, spec.palette, size);
            if label.smoke {
                let bbox = render_smoke(&mut img, &mut rng, spec.object_scale);
                truths.push(ObjectTruth {
                    id: id.clone(),
                    kind: ObjectKind::Smoke,
                    bbox,
                });
            }
            if label.fire {
                let bbox = render_fire(&mut img, &mut rng, spec.object_scale);
                truths.push(ObjectTruth {
                    id: id.clone(),
                    kind: ObjectKind::Fire,
                    bbox,
                });
            }
            if *partition == Partition::ComplexNegative {
                render_distractor(&mut img, &mut rng, spec.object_scale);
            }
            let file = images_dir.join(format!("{id}.png"));
            save_png(&img, &file)?;
            samples.push(Sample {
                id,
                image_path: file,
                label: *label,
                partition: *partition,
            });
        }
    }

    let manifest = Manifest::from_samples(samples)?;
    crate::corpus::save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;

    #[derive(Serialize)]
    struct TruthFile<'a> {
        objects: &'a [ObjectTruth],
    }
    let truth_path = out_dir.join("truth.json");
    let json = serde_json::to_string_pretty(&TruthFile { objects: &truths })
        .expect("truth serialization");
    std::fs::write(&truth_path, json).map_err(|e| Error::io(&truth_path, e))?;

    Ok(SynthOutput { manifest, truths })
}

/// Reads the `truth.json` sidecar written by [`synth_generate`].
pub fn load_truths(out_dir: &Path) -> Result<Vec<ObjectTruth>> {
    #[derive(Deserialize)]
    struct TruthFile {
        objects: Vec<ObjectTruth>,
    }
    let path = out_dir.join("truth.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed: TruthFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    Ok(parsed.objects)
}
