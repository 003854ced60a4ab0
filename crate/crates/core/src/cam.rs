//! Class activation maps, trusted-region extraction, and heatmap overlays.
//!
//! A CAM is the per-class weighted sum of the final conv feature maps using
//! the head's class column; under global average pooling its spatial mean
//! plus the class bias equals the class logit, which anchors every test of
//! this module. Upsampling reuses the shared bilinear kernel; region
//! segmentation thresholds the upsampled map at zero.

use ndarray::{Array1, Array2, Array3};

use crate::backend::{Scalar, NUM_CLASSES};
use crate::corpus::LabelVector;
use crate::error::{Error, Result};
use crate::imageops::{crop, resize_bilinear_any, ImageTensor};

/// The two detector classes, in head-column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Smoke,
    Fire,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Smoke, ClassId::Fire];

    pub fn index(self) -> usize {
        match self {
            ClassId::Smoke => 0,
            ClassId::Fire => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassId::Smoke => "smoke",
            ClassId::Fire => "fire",
        }
    }

    /// True when the label carries this class.
    pub fn flag(self, label: LabelVector) -> bool {
        match self {
            ClassId::Smoke => label.smoke,
            ClassId::Fire => label.fire,
        }
    }
}

/// Per-class spatial activation, at feature resolution and upsampled.
#[derive(Clone, Debug)]
pub struct CamMap<F: Scalar> {
    pub class_id: ClassId,
    /// Feature-resolution weighted sum (H'×W').
    pub grid: Array2<F>,
    /// Bilinear upsample of `grid` to the target resolution.
    pub upsampled: Array2<F>,
    /// Head bias of the class, kept for the GAP-consistency diagnostic.
    pub bias: F,
}

impl<F: Scalar> CamMap<F> {
    /// Spatial mean of the feature-resolution grid, f64 accumulation.
    pub fn grid_mean(&self) -> f64 {
        let n = self.grid.len();
        let mut acc = 0.0f64;
        for &v in self.grid.iter() {
            acc += v.into_f64();
        }
        acc / n as f64
    }

    /// `|mean(grid) + bias - logit|`: zero (to float tolerance) when the
    /// grid came from the same forward pass as the logit.
    pub fn gap_residual(&self, logit: f64) -> f64 {
        (self.grid_mean() + self.bias.into_f64() - logit).abs()
    }
}

/// Weighted sum of feature maps with the class column of the head weights,
/// upsampled to `target` (height, width).
pub fn compute_cam<F: Scalar>(
    feature_maps: &Array3<F>,
    head_weight: &Array2<F>,
    head_bias: &Array1<F>,
    class_id: ClassId,
    target: (usize, usize),
) -> Result<CamMap<F>> {
    let (n_feat, h, w) = feature_maps.dim();
    if head_weight.nrows() != n_feat || head_weight.ncols() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "head weight {}x{} does not match {n_feat} feature channels",
            head_weight.nrows(),
            head_weight.ncols()
        )));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Shape("CAM target size must be nonzero".into()));
    }
    let c = class_id.index();
    let src = feature_maps.as_slice().expect("contiguous");
    let plane = h * w;
    let mut grid = vec![F::zero(); plane];
    for k in 0..n_feat {
        let wk = head_weight[(k, c)];
        let fsrc = &src[k * plane..(k + 1) * plane];
        for (g, &f) in grid.iter_mut().zip(fsrc) {
            *g = *g + wk * f;
        }
    }
    let upsampled = resize_bilinear_any(&grid, h, w, 1, target.0, target.1);
    Ok(CamMap {
        class_id,
        grid: Array2::from_shape_vec((h, w), grid).expect("grid shape"),
        upsampled: Array2::from_shape_vec(target, upsampled).expect("upsample shape"),
        bias: head_bias[c],
    })
}

/// High-confidence crop recycled as new positive material.
#[derive(Clone, Debug)]
pub struct TrustedRegion {
    /// (x, y, w, h) in source-image pixels; the tight bounding box of `mask`.
    pub bbox: (usize, usize, usize, usize),
    /// Source pixels inside the box (original image, never the CAM).
    pub crop: ImageTensor,
    pub source_id: String,
    /// Suprathreshold mask at image resolution, for diagnostics.
    pub mask: Array2<bool>,
}

impl TrustedRegion {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Union over the given maps of pixels with upsampled activation strictly
/// above zero, then the tight bounding-box crop from the original image.
/// Callers pass only the CAMs of the sample's true label classes. An empty
/// mask yields `None`.
pub fn extract_trusted_region<F: Scalar>(
    image: &ImageTensor,
    cams: &[CamMap<F>],
    source_id: &str,
) -> Option<TrustedRegion> {
    let (h, w) = (image.height(), image.width());
    for cam in cams {
        assert_eq!(
            cam.upsampled.dim(),
            (h, w),
            "CAM must be upsampled to image resolution"
        );
    }
    let mut mask = Array2::from_elem((h, w), false);
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            let hit = cams.iter().any(|cam| cam.upsampled[(y, x)] > F::zero());
            if hit {
                mask[(y, x)] = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let bw = max_x - min_x + 1;
    let bh = max_y - min_y + 1;
    let crop = crop(image, min_x, min_y, bw, bh).expect("bbox inside image");
    Some(TrustedRegion {
        bbox: (min_x, min_y, bw, bh),
        crop,
        source_id: source_id.to_string(),
        mask,
    })
}

/// Classic blue-to-red colormap over `t` in `[0, 1]`.
pub fn jet_colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r as f32, g as f32, b as f32]
}

/// `(1 - alpha) * image + alpha * colormap(minmax(cam))`. A constant map
/// normalizes to mid-scale. Grayscale images broadcast to RGB first.
pub fn render_overlay<F: Scalar>(
    image: &ImageTensor,
    cam: &CamMap<F>,
    alpha: f64,
) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let (h, w) = (image.height(), image.width());
    if cam.upsampled.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay dims mismatch: image {h}x{w}, cam {:?}",
            cam.upsampled.dim()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in cam.upsampled.iter() {
        let v = v.into_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut out = ImageTensor::zeros(h, w, 3);
    let a = alpha as f32;
    for y in 0..h {
        for x in 0..w {
            let t = if range > 0.0 {
                (cam.upsampled[(y, x)].into_f64() - lo) / range
            } else {
                0.5
            };
            let color = jet_colormap(t);
            for c in 0..3 {
                let base = if image.channels() == 3 {
                    image.get(y, x, c)
                } else {
                    image.get(y, x, 0)
                };
                out.set(y, x, c, ((1.0 - a) * base + a * color[c]).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
