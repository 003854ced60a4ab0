//! Pixel-level primitives: bilinear resize, directional concatenation, region
//! paste, Z-score normalization, and raster I/O.
//!
//! Images are row-major interleaved `f32` rasters with values in `[0, 1]`
//! (normalized tensors may leave that range). Bilinear sampling uses
//! half-pixel-center alignment: source coordinate `(i + 0.5) * scale - 0.5`,
//! edge-clamped, so results are bit-reproducible across the model-input and
//! CAM-upsampling paths, which share one implementation.

mod augment;
mod io;

pub use augment::{apply_basic_augments, BasicAugmentConfig};
pub use io::{load_image, save_png};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side on which the second operand is attached during concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

/// H×W×C raster, row-major interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be nonzero, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor::constant(height, width, channels, 0.0)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageTensor::new(height, width, channels, vec![value; height * width * channels])
            .expect("constant image dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Clamps every value into `[0, 1]` in place.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Per-channel affine standardization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            mean: [0.5; 3],
            scale: [0.5; 3],
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!(
                "normalization scale must be positive, got {:?}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// `(x - mean) / scale` in double precision.
#[inline]
pub fn normalize_value(x: f64, mean: f64, scale: f64) -> f64 {
    (x - mean) / scale
}

/// Inverse of [`normalize_value`].
#[inline]
pub fn denormalize_value(x: f64, mean: f64, scale: f64) -> f64 {
    x * scale + mean
}

/// Z-score standardization, channel by channel. Output values may leave
/// `[0, 1]`.
pub fn normalize(img: &ImageTensor, spec: &NormalizationSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let c = img.channels;
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let ch = i % c;
        *v = normalize_value(f64::from(*v), spec.mean[ch], spec.scale[ch]) as f32;
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &ImageTensor, spec: &NormalizationSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let c = img.channels;
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let ch = i % c;
        *v = denormalize_value(f64::from(*v), spec.mean[ch], spec.scale[ch]) as f32;
    }
    Ok(out)
}

/// One resize axis: maps output index to the two source taps and the blend
/// fraction, half-pixel-center convention, edge-clamped.
#[inline]
fn axis_taps(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resample of an interleaved raster of any scalar type. A single
/// channel serves CAM grids; three channels serve images.
pub fn resize_bilinear_any<F: Float>(
    src: &[F],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<F> {
    assert!(height > 0 && width > 0 && out_h > 0 && out_w > 0);
    assert_eq!(src.len(), height * width * channels);
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis_taps(oy, height, out_h);
        let fy = F::from(fy).unwrap();
        for ox in 0..out_w {
            let (x0, x1, fx) = axis_taps(ox, width, out_w);
            let fx = F::from(fx).unwrap();
            for c in 0..channels {
                let v00 = src[(y0 * width + x0) * channels + c];
                let v01 = src[(y0 * width + x1) * channels + c];
                let v10 = src[(y1 * width + x0) * channels + c];
                let v11 = src[(y1 * width + x1) * channels + c];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Bilinear resize to `out_h`×`out_w`. Values stay within the convex hull of
/// the input values.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target must be nonzero, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let data = resize_bilinear_any(
        &img.data,
        img.height,
        img.width,
        img.channels,
        out_h,
        out_w,
    );
    ImageTensor::new(out_h, out_w, img.channels, data)
}

/// Attaches `neg` to the `dir` side of `pos`. Both images must share
/// dimensions and channel count; each operand appears verbatim in its half.
pub fn concat_images(
    pos: &ImageTensor,
    neg: &ImageTensor,
    dir: Direction,
) -> Result<ImageTensor> {
    if pos.height != neg.height || pos.width != neg.width || pos.channels != neg.channels {
        return Err(Error::Shape(format!(
            "concat operands disagree: {}x{}x{} vs {}x{}x{}",
            pos.height, pos.width, pos.channels, neg.height, neg.width, neg.channels
        )));
    }
    let (h, w, c) = (pos.height, pos.width, pos.channels);
    let row = w * c;
    let mut out = match dir {
        Direction::Up | Direction::Down => ImageTensor::zeros(2 * h, w, c),
        Direction::Left | Direction::Right => ImageTensor::zeros(h, 2 * w, c),
    };
    match dir {
        Direction::Up => {
            out.data[..h * row].copy_from_slice(&neg.data);
            out.data[h * row..].copy_from_slice(&pos.data);
        }
        Direction::Down => {
            out.data[..h * row].copy_from_slice(&pos.data);
            out.data[h * row..].copy_from_slice(&neg.data);
        }
        Direction::Left | Direction::Right => {
            let (first, second) = if dir == Direction::Left {
                (neg, pos)
            } else {
                (pos, neg)
            };
            for y in 0..h {
                let dst = &mut out.data[y * 2 * row..(y * 2 * row) + 2 * row];
                dst[..row].copy_from_slice(&first.data[y * row..y * row + row]);
                dst[row..].copy_from_slice(&second.data[y * row..y * row + row]);
            }
        }
    }
    Ok(out)
}

/// Overwrites the rectangle at `(x, y)` (column, row) with `patch`. No
/// blending.
pub fn paste_region(
    bg: &ImageTensor,
    patch: &ImageTensor,
    x: usize,
    y: usize,
) -> Result<ImageTensor> {
    if patch.channels != bg.channels {
        return Err(Error::Shape(format!(
            "paste channel mismatch: {} vs {}",
            patch.channels, bg.channels
        )));
    }
    if x + patch.width > bg.width || y + patch.height > bg.height {
        return Err(Error::Shape(format!(
            "paste of {}x{} at ({x}, {y}) exceeds {}x{} background",
            patch.height, patch.width, bg.height, bg.width
        )));
    }
    let mut out = bg.clone();
    let row = patch.width * patch.channels;
    for py in 0..patch.height {
        let dst_start = out.idx(y + py, x, 0);
        out.data[dst_start..dst_start + row]
            .copy_from_slice(&patch.data[py * row..py * row + row]);
    }
    Ok(out)
}

/// Copies the rectangle `[x, x+w) × [y, y+h)` out of `img`.
pub fn crop(img: &ImageTensor, x: usize, y: usize, w: usize, h: usize) -> Result<ImageTensor> {
    if w == 0 || h == 0 {
        return Err(Error::Shape("crop must have nonzero extent".into()));
    }
    if x + w > img.width || y + h > img.height {
        return Err(Error::Shape(format!(
            "crop {w}x{h} at ({x}, {y}) exceeds {}x{} image",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for cy in 0..h {
        let start = img.idx(y + cy, x, 0);
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    ImageTensor::new(h, w, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, 0, ((x + y) % 2) as f32);
            }
        }
        img
    }

    /// Scalar bilinear reference: evaluates one output sample directly from
    /// the half-pixel-center formula.
    fn bilinear_oracle(src: &ImageTensor, oy: usize, ox: usize, out_h: usize, out_w: usize) -> f32 {
        let sy = ((oy as f64 + 0.5) * src.height() as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (src.height() - 1) as f64);
        let sx = ((ox as f64 + 0.5) * src.width() as f64 / out_w as f64 - 0.5)
            .clamp(0.0, (src.width() - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(src.height() - 1), (x0 + 1).min(src.width() - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = f64::from(src.get(y0, x0, 0)) * (1.0 - fy) * (1.0 - fx)
            + f64::from(src.get(y0, x1, 0)) * (1.0 - fy) * fx
            + f64::from(src.get(y1, x0, 0)) * fy * (1.0 - fx)
            + f64::from(src.get(y1, x1, 0)) * fy * fx;
        v as f32
    }

    #[test]
    fn identity_resize_returns_identical_pixels() {
        let img = checker(224, 224);
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = ImageTensor::constant(5, 7, 3, 0.7);
        let out = resize_bilinear(&img, 13, 3).unwrap();
        for &v in out.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_upscale_matches_scalar_oracle() {
        // [[0,1],[0,1]] widened to 2x4; interior columns blend the edges.
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 2, 4).unwrap();
        for oy in 0..2 {
            for ox in 0..4 {
                let expect = bilinear_oracle(&img, oy, ox, 2, 4);
                assert!(
                    (out.get(oy, ox, 0) - expect).abs() < 1e-6,
                    "({oy},{ox}): {} vs {}",
                    out.get(oy, ox, 0),
                    expect
                );
            }
        }
        // Hand check: columns sample src x = {-0.25, 0.25, 0.75, 1.25},
        // clamped and blended -> 0, 0.25, 0.75, 1.
        assert!((out.get(0, 0, 0) - 0.0).abs() < 1e-6);
        assert!((out.get(0, 1, 0) - 0.25).abs() < 1e-6);
        assert!((out.get(0, 2, 0) - 0.75).abs() < 1e-6);
        assert!((out.get(0, 3, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn downscale_matches_scalar_oracle() {
        let img = checker(9, 7);
        let out = resize_bilinear(&img, 4, 3).unwrap();
        for oy in 0..4 {
            for ox in 0..3 {
                let expect = bilinear_oracle(&img, oy, ox, 4, 3);
                assert!((out.get(oy, ox, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_right_keeps_pos_in_left_half() {
        let pos = ImageTensor::constant(224, 224, 3, 0.25);
        let neg = ImageTensor::constant(224, 224, 3, 0.75);
        let out = concat_images(&pos, &neg, Direction::Right).unwrap();
        assert_eq!(out.width(), 448);
        assert_eq!(out.height(), 224);
        for y in 0..224 {
            assert_eq!(out.get(y, 0, 0), 0.25);
            assert_eq!(out.get(y, 223, 2), 0.25);
            assert_eq!(out.get(y, 224, 0), 0.75);
        }
    }

    #[test]
    fn concat_up_then_bottom_crop_is_identity() {
        let pos = checker(6, 5);
        let neg = ImageTensor::constant(6, 5, 1, 0.5);
        let out = concat_images(&pos, &neg, Direction::Up).unwrap();
        let bottom = crop(&out, 0, 6, 5, 6).unwrap();
        assert_eq!(bottom, pos);
    }

    #[test]
    fn all_four_directions_distinct_and_recoverable() {
        let pos = ImageTensor::constant(4, 4, 1, 0.2);
        let neg = ImageTensor::constant(4, 4, 1, 0.9);
        let mut outputs = Vec::new();
        for dir in Direction::ALL {
            let out = concat_images(&pos, &neg, dir).unwrap();
            let (pos_crop, neg_crop) = match dir {
                Direction::Up => (crop(&out, 0, 4, 4, 4), crop(&out, 0, 0, 4, 4)),
                Direction::Down => (crop(&out, 0, 0, 4, 4), crop(&out, 0, 4, 4, 4)),
                Direction::Left => (crop(&out, 4, 0, 4, 4), crop(&out, 0, 0, 4, 4)),
                Direction::Right => (crop(&out, 0, 0, 4, 4), crop(&out, 4, 0, 4, 4)),
            };
            assert_eq!(pos_crop.unwrap(), pos, "{dir:?}");
            assert_eq!(neg_crop.unwrap(), neg, "{dir:?}");
            outputs.push(out);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(
                    (outputs[i].height(), outputs[i].width(), outputs[i].data()),
                    (outputs[j].height(), outputs[j].width(), outputs[j].data())
                );
            }
        }
    }

    #[test]
    fn concat_rejects_dimension_mismatch() {
        let a = ImageTensor::zeros(4, 4, 1);
        let b = ImageTensor::zeros(4, 5, 1);
        assert!(concat_images(&a, &b, Direction::Left).is_err());
    }

    #[test]
    fn paste_top_left_leaves_rest_unchanged() {
        let bg = ImageTensor::constant(224, 224, 3, 0.1);
        let patch = ImageTensor::constant(50, 50, 3, 0.9);
        let out = paste_region(&bg, &patch, 0, 0).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.9);
        assert_eq!(out.get(49, 49, 2), 0.9);
        assert_eq!(out.get(50, 50, 0), 0.1);
        assert_eq!(out.get(0, 50, 0), 0.1);
        let changed = out
            .data()
            .iter()
            .zip(bg.data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 50 * 50 * 3);
    }

    #[test]
    fn full_cover_paste_equals_patch() {
        let bg = ImageTensor::constant(16, 16, 1, 0.3);
        let patch = checker(16, 16);
        let out = paste_region(&bg, &patch, 0, 0).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn paste_out_of_bounds_is_error() {
        let bg = ImageTensor::zeros(8, 8, 1);
        let patch = ImageTensor::zeros(4, 4, 1);
        assert!(paste_region(&bg, &patch, 5, 0).is_err());
        assert!(paste_region(&bg, &patch, 0, 5).is_err());
    }

    #[test]
    fn seeded_paste_matches_per_pixel_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(11, &[99]);
        for _ in 0..20 {
            let bg = checker(12, 15);
            let ph = rng.random_range(1..=12usize);
            let pw = rng.random_range(1..=15usize);
            let mut patch = ImageTensor::zeros(ph, pw, 1);
            for v in patch.data_mut() {
                *v = rng.random_range(0.0..1.0f32);
            }
            let x = rng.random_range(0..=15 - pw);
            let y = rng.random_range(0..=12 - ph);
            let out = paste_region(&bg, &patch, x, y).unwrap();
            for yy in 0..12 {
                for xx in 0..15 {
                    let inside = xx >= x && xx < x + pw && yy >= y && yy < y + ph;
                    let expect = if inside {
                        patch.get(yy - y, xx - x, 0)
                    } else {
                        bg.get(yy, xx, 0)
                    };
                    assert_eq!(out.get(yy, xx, 0), expect);
                }
            }
        }
    }

    #[test]
    fn normalize_defaults_map_half_to_zero() {
        let spec = NormalizationSpec::default();
        let img = ImageTensor::constant(2, 2, 3, 0.5);
        let out = normalize(&img, &spec).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.0);
        }
        let img0 = ImageTensor::constant(1, 1, 1, 0.0);
        assert_eq!(normalize(&img0, &spec).unwrap().get(0, 0, 0), -1.0);
        let img1 = ImageTensor::constant(1, 1, 1, 1.0);
        assert_eq!(normalize(&img1, &spec).unwrap().get(0, 0, 0), 1.0);
    }

    #[test]
    fn normalize_rejects_nonpositive_scale() {
        let spec = NormalizationSpec {
            mean: [0.5; 3],
            scale: [0.5, 0.0, 0.5],
        };
        assert!(normalize(&ImageTensor::zeros(1, 1, 3), &spec).is_err());
    }
}
