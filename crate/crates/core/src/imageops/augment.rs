//! Stochastic photometric/geometric augment stack.
//!
//! Sub-transforms fire independently, each with its own probability, in a
//! fixed order: gray, vflip, hflip, rotate, brightness, contrast, saturation,
//! hue. For every stage exactly one gate value is drawn, then the stage's
//! parameters (if it fired), so a replayed RNG stream predicts the full fire
//! pattern. Output is clamped to `[0, 1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;

/// Per-transform probabilities and parameter ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasicAugmentConfig {
    pub p_gray: f64,
    pub p_vflip: f64,
    pub p_hflip: f64,
    pub p_rotate: f64,
    /// Rotation angle is uniform in `±rotate_max_degrees`.
    pub rotate_max_degrees: f64,
    pub p_brightness: f64,
    /// Brightness factor is uniform in `1 ± brightness_delta`.
    pub brightness_delta: f64,
    pub p_contrast: f64,
    /// Contrast factor is uniform in `1 ± contrast_delta`.
    pub contrast_delta: f64,
    pub p_saturation: f64,
    /// Saturation factor is uniform in this closed interval.
    pub saturation_range: (f64, f64),
    pub p_hue: f64,
    /// Hue factor is uniform in `1 ± hue_delta`.
    pub hue_delta: f64,
}

impl Default for BasicAugmentConfig {
    fn default() -> Self {
        BasicAugmentConfig {
            p_gray: 0.01,
            p_vflip: 0.02,
            p_hflip: 0.5,
            p_rotate: 0.3,
            rotate_max_degrees: 30.0,
            p_brightness: 0.5,
            brightness_delta: 0.3,
            p_contrast: 0.5,
            contrast_delta: 0.3,
            p_saturation: 1.0,
            saturation_range: (0.2, 1.6),
            p_hue: 0.1,
            hue_delta: 0.01,
        }
    }
}

impl BasicAugmentConfig {
    /// Configuration with every probability zero; useful as a no-op.
    pub fn disabled() -> Self {
        BasicAugmentConfig {
            p_gray: 0.0,
            p_vflip: 0.0,
            p_hflip: 0.0,
            p_rotate: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_saturation: 0.0,
            p_hue: 0.0,
            ..BasicAugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_gray", self.p_gray),
            ("p_vflip", self.p_vflip),
            ("p_hflip", self.p_hflip),
            ("p_rotate", self.p_rotate),
            ("p_brightness", self.p_brightness),
            ("p_contrast", self.p_contrast),
            ("p_saturation", self.p_saturation),
            ("p_hue", self.p_hue),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        let (lo, hi) = self.saturation_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
            return Err(Error::Config(format!(
                "saturation_range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        for (name, v) in [
            ("rotate_max_degrees", self.rotate_max_degrees),
            ("brightness_delta", self.brightness_delta),
            ("contrast_delta", self.contrast_delta),
            ("hue_delta", self.hue_delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn fires(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn factor(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // Degenerate interval: keep the draw so replay stays aligned.
        let _ = rng.random::<f64>();
        return lo;
    }
    rng.random_range(lo..hi)
}

/// Applies the stack with the documented order and one gate draw per stage.
pub fn apply_basic_augments(
    img: &ImageTensor,
    cfg: &BasicAugmentConfig,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let mut out = img.clone();
    if fires(rng, cfg.p_gray) {
        to_grayscale(&mut out);
    }
    if fires(rng, cfg.p_vflip) {
        flip_vertical(&mut out);
    }
    if fires(rng, cfg.p_hflip) {
        flip_horizontal(&mut out);
    }
    if fires(rng, cfg.p_rotate) {
        let angle = factor(rng, -cfg.rotate_max_degrees, cfg.rotate_max_degrees);
        out = rotate(&out, angle);
    }
    if fires(rng, cfg.p_brightness) {
        let f = factor(rng, 1.0 - cfg.brightness_delta, 1.0 + cfg.brightness_delta);
        brightness(&mut out, f);
    }
    if fires(rng, cfg.p_contrast) {
        let f = factor(rng, 1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta);
        contrast(&mut out, f);
    }
    if fires(rng, cfg.p_saturation) {
        let f = factor(rng, cfg.saturation_range.0, cfg.saturation_range.1);
        saturation(&mut out, f);
    }
    if fires(rng, cfg.p_hue) {
        let f = factor(rng, 1.0 - cfg.hue_delta, 1.0 + cfg.hue_delta);
        hue_scale(&mut out, f);
    }
    out.clamp01();
    out
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(img: &ImageTensor, y: usize, x: usize) -> f32 {
    if img.channels() == 1 {
        return img.get(y, x, 0);
    }
    LUMA[0] * img.get(y, x, 0) + LUMA[1] * img.get(y, x, 1) + LUMA[2] * img.get(y, x, 2)
}

fn to_grayscale(img: &mut ImageTensor) {
    if img.channels() == 1 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g = luma(img, y, x);
            for c in 0..3 {
                img.set(y, x, c, g);
            }
        }
    }
}

fn flip_vertical(img: &mut ImageTensor) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let row = w * c;
    for y in 0..h / 2 {
        for i in 0..row {
            img.data_mut().swap(y * row + i, (h - 1 - y) * row + i);
        }
    }
}

fn flip_horizontal(img: &mut ImageTensor) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                let a = (y * w + x) * c + ch;
                let b = (y * w + (w - 1 - x)) * c + ch;
                img.data_mut().swap(a, b);
            }
        }
    }
}

/// Rotation about the image center, bilinear sampling; pixels that map
/// outside the source fill with black.
fn rotate(img: &ImageTensor, angle_degrees: f64) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the output coordinate back into the source.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let sxc = sx.clamp(0.0, (w - 1) as f64);
            let syc = sy.clamp(0.0, (h - 1) as f64);
            let x0 = sxc.floor() as usize;
            let y0 = syc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sxc - x0 as f64) as f32;
            let fy = (syc - y0 as f64) as f32;
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn brightness(img: &mut ImageTensor, f: f64) {
    for v in img.data_mut() {
        *v = (f64::from(*v) * f).clamp(0.0, 1.0) as f32;
    }
}

/// `(x - channel_mean) * f + channel_mean`, clamped.
fn contrast(img: &mut ImageTensor, f: f64) {
    let c = img.channels();
    let n = (img.height() * img.width()) as f64;
    let mut means = [0.0f64; 3];
    for (i, &v) in img.data().iter().enumerate() {
        means[i % c] += f64::from(v);
    }
    for m in means.iter_mut().take(c) {
        *m /= n;
    }
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let m = means[i % c];
        *v = ((f64::from(*v) - m) * f + m).clamp(0.0, 1.0) as f32;
    }
}

/// Linear interpolation between luma-gray and the original by `f`
/// (`f = 0` gray, `f = 1` identity, `f > 1` oversaturated).
fn saturation(img: &mut ImageTensor, f: f64) {
    if img.channels() == 1 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g = f64::from(luma(img, y, x));
            for c in 0..3 {
                let v = f64::from(img.get(y, x, c));
                img.set(y, x, c, (g + f * (v - g)).clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Multiplies the HSV hue (in `[0, 1)`) by `f`, modulo 1.
fn hue_scale(img: &mut ImageTensor, f: f64) {
    if img.channels() == 1 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (h, s, v) = rgb_to_hsv(
                img.get(y, x, 0),
                img.get(y, x, 1),
                img.get(y, x, 2),
            );
            let h = ((f64::from(h) * f).rem_euclid(1.0)) as f32;
            let (r, g, b) = hsv_to_rgb(h, s, v);
            img.set(y, x, 0, r);
            img.set(y, x, 1, g);
            img.set(y, x, 2, b);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
