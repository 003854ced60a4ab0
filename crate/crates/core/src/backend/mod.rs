//! Trainable multi-label convolutional classifier.
//!
//! Fixed topology family: a stack of 3×3 stride-1 pad-1 conv blocks (ReLU,
//! optional 2×2 max-pool) feeding global average pooling and a two-logit
//! linear head. Training is plain SGD over a numerically stable
//! sigmoid-BCE loss with exact backpropagation through every layer.
//!
//! The whole stack is generic over the scalar type: `f32` is the storage
//! dtype for real training, `f64` backs the gradient and identity checks.
//! Reductions (GAP, loss) accumulate in `f64` regardless. Max-pool and ReLU
//! tie-breaks are fixed (first index wins, zero subgradient at the kink) so
//! training is bit-deterministic for a fixed seed and data order.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};

use ndarray::{Array1, Array2, Array3};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelVector;
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::rng::{derive_rng, stream};

/// Tensor element type tag used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types the backend can run on.
pub trait Scalar: Float + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn write_le(slice: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        f64::from(self)
    }

    fn write_le(slice: &[Self], out: &mut Vec<u8>) {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn write_le(slice: &[Self], out: &mut Vec<u8>) {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// One conv block: 3×3 stride-1 pad-1 convolution, ReLU, optional 2×2
/// max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub pool: bool,
}

/// Network topology.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub input_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
}

impl Default for Architecture {
    fn default() -> Self {
        // Workstation-scale reference: 64x64 input, 64-channel 16x16 feature
        // maps, trains in minutes on CPU while leaving CAM enough resolution.
        Architecture {
            input_size: 64,
            input_channels: 3,
            blocks: vec![
                ConvBlockSpec { out_channels: 16, pool: true },
                ConvBlockSpec { out_channels: 32, pool: true },
                ConvBlockSpec { out_channels: 64, pool: false },
            ],
        }
    }
}

pub const NUM_CLASSES: usize = 2;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one conv block required".into()));
        }
        let mut dim = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::Config(format!("block {i}: zero channels")));
            }
            if b.pool {
                if dim < 2 || dim % 2 != 0 {
                    return Err(Error::Config(format!(
                        "block {i}: cannot 2x2-pool a {dim}x{dim} map"
                    )));
                }
                dim /= 2;
            }
        }
        if dim == 0 {
            return Err(Error::Config("feature map collapsed to zero size".into()));
        }
        Ok(())
    }

    /// Channels of the final conv output (the GAP/head input width).
    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// Spatial side of the final conv output.
    pub fn feature_size(&self) -> usize {
        let pools = self.blocks.iter().filter(|b| b.pool).count();
        self.input_size >> pools
    }
}

/// All trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendParams<F: Scalar> {
    pub arch: Architecture,
    pub conv_weights: Vec<Array2<F>>, // (C_out, C_in * 9) per block
    pub conv_biases: Vec<Array1<F>>,  // (C_out) per block
    pub head_weight: Array2<F>,       // (n_feat, NUM_CLASSES)
    pub head_bias: Array1<F>,         // (NUM_CLASSES)
}

impl<F: Scalar> BackendParams<F> {
    /// Fan-in-scaled uniform initialization (`±sqrt(6 / fan_in)`), zero
    /// biases, drawn from streams derived per layer.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        use rand::Rng;
        arch.validate()?;
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut c_in = arch.input_channels;
        for (l, block) in arch.blocks.iter().enumerate() {
            let fan_in = c_in * TAPS;
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = derive_rng(seed, &[stream::INIT, l as u64]);
            let data: Vec<F> = (0..block.out_channels * fan_in)
                .map(|_| F::from_f64(rng.random_range(-bound..bound)))
                .collect();
            conv_weights.push(
                Array2::from_shape_vec((block.out_channels, fan_in), data).expect("init shape"),
            );
            conv_biases.push(Array1::zeros(block.out_channels));
            c_in = block.out_channels;
        }
        let n_feat = arch.feature_channels();
        let bound = (6.0 / n_feat as f64).sqrt();
        let mut rng = derive_rng(seed, &[stream::INIT, arch.blocks.len() as u64]);
        let data: Vec<F> = (0..n_feat * NUM_CLASSES)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Ok(BackendParams {
            arch: arch.clone(),
            conv_weights,
            conv_biases,
            head_weight: Array2::from_shape_vec((n_feat, NUM_CLASSES), data)
                .expect("init shape"),
            head_bias: Array1::zeros(NUM_CLASSES),
        })
    }

    /// Named views over every tensor, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            out.push((
                format!("conv{l}.weight"),
                vec![w.nrows(), w.ncols()],
                w.as_slice().expect("contiguous"),
            ));
            out.push((format!("conv{l}.bias"), vec![b.len()], b.as_slice().unwrap()));
        }
        out.push((
            "head.weight".to_string(),
            vec![self.head_weight.nrows(), self.head_weight.ncols()],
            self.head_weight.as_slice().expect("contiguous"),
        ));
        out.push((
            "head.bias".to_string(),
            vec![self.head_bias.len()],
            self.head_bias.as_slice().unwrap(),
        ));
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, data) in self.named_tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!("non-finite value in tensor {name}")));
            }
        }
        Ok(())
    }

    /// Converts the parameter set to another scalar type.
    pub fn cast<G: Scalar>(&self) -> BackendParams<G> {
        BackendParams {
            arch: self.arch.clone(),
            conv_weights: self
                .conv_weights
                .iter()
                .map(|w| w.mapv(|v| G::from_f64(v.into_f64())))
                .collect(),
            conv_biases: self
                .conv_biases
                .iter()
                .map(|b| b.mapv(|v| G::from_f64(v.into_f64())))
                .collect(),
            head_weight: self.head_weight.mapv(|v| G::from_f64(v.into_f64())),
            head_bias: self.head_bias.mapv(|v| G::from_f64(v.into_f64())),
        }
    }
}

/// SGD hyperparameters for one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0004,
            batch_size: 200,
            epochs_per_round: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::Config("epochs_per_round must be >= 1".into()));
        }
        Ok(())
    }
}

fn image_to_array<F: Scalar>(img: &ImageTensor, arch: &Architecture) -> Result<Array3<F>> {
    let s = arch.input_size;
    if img.height() != s || img.width() != s || img.channels() != arch.input_channels {
        return Err(Error::Shape(format!(
            "input {}x{}x{} does not match architecture {s}x{s}x{}",
            img.height(),
            img.width(),
            img.channels(),
            arch.input_channels
        )));
    }
    let c = arch.input_channels;
    let mut data = vec![F::zero(); c * s * s];
    // HWC interleaved -> CHW planes.
    for (i, &v) in img.data().iter().enumerate() {
        let ch = i % c;
        let pixel = i / c;
        data[ch * s * s + pixel] = F::from_f64(f64::from(v));
    }
    Ok(Array3::from_shape_vec((c, s, s), data).expect("image shape"))
}

/// `(C_in*9, H*W)` patch matrix with zero padding, kernel taps in
/// `(channel, ky, kx)` row order.
fn im2col<F: Scalar>(x: &Array3<F>) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let src = x.as_slice().expect("contiguous");
    let mut col = vec![F::zero(); c_in * TAPS * h * w];
    for c in 0..c_in {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..KERNEL {
            let dy = ky as isize - 1;
            for kx in 0..KERNEL {
                let dx = kx as isize - 1;
                let row_base = (c * TAPS + ky * KERNEL + kx) * h * w;
                let x_lo = if dx < 0 { 1 } else { 0 };
                let x_hi = if dx > 0 { w.saturating_sub(1) } else { w };
                if x_hi <= x_lo {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w + (x_lo as isize + dx) as usize;
                    let d0 = row_base + y * w + x_lo;
                    let len = x_hi - x_lo;
                    col[d0..d0 + len].copy_from_slice(&plane[s0..s0 + len]);
                }
            }
        }
    }
    Array2::from_shape_vec((c_in * TAPS, h * w), col).expect("col shape")
}

/// Scatter-add inverse of [`im2col`].
fn col2im<F: Scalar>(dcol: &Array2<F>, c_in: usize, h: usize, w: usize) -> Array3<F> {
    let src = dcol.as_slice().expect("contiguous");
    let mut dx = vec![F::zero(); c_in * h * w];
    for c in 0..c_in {
        let plane_base = c * h * w;
        for ky in 0..KERNEL {
            let dy = ky as isize - 1;
            for kx in 0..KERNEL {
                let dx_off = kx as isize - 1;
                let row_base = (c * TAPS + ky * KERNEL + kx) * h * w;
                let x_lo = if dx_off < 0 { 1 } else { 0 };
                let x_hi = if dx_off > 0 { w.saturating_sub(1) } else { w };
                if x_hi <= x_lo {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = plane_base + sy as usize * w + (x_lo as isize + dx_off) as usize;
                    let d0 = row_base + y * w + x_lo;
                    for i in 0..(x_hi - x_lo) {
                        dx[s0 + i] = dx[s0 + i] + src[d0 + i];
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c_in, h, w), dx).expect("dx shape")
}

/// 2×2 stride-2 max-pool; scan order fixes ties to the first index.
fn maxpool<F: Scalar>(x: &Array2<F>, h: usize, w: usize) -> (Array2<F>, Vec<usize>) {
    let c = x.nrows();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = best;
                argmax[ch * oh * ow + oy * ow + ox] = ch * h * w + best_idx;
            }
        }
    }
    (
        Array2::from_shape_vec((c, oh * ow), out).expect("pool shape"),
        argmax,
    )
}

struct LayerCache<F: Scalar> {
    col: Array2<F>,
    pre: Array2<F>,
    in_dims: (usize, usize, usize), // (C_in, H, W)
    out_hw: (usize, usize),         // conv output spatial dims (pre-pool)
    pool_argmax: Option<Vec<usize>>,
}

struct ImageForward<F: Scalar> {
    features: Array3<F>,
    gap: Array1<F>,
    logits: [f64; NUM_CLASSES],
    caches: Option<Vec<LayerCache<F>>>,
}

fn forward_image<F: Scalar>(
    params: &BackendParams<F>,
    x: Array3<F>,
    want_cache: bool,
) -> ImageForward<F> {
    let mut caches = want_cache.then(Vec::new);
    let mut cur = x;
    for (l, block) in params.arch.blocks.iter().enumerate() {
        let (c_in, h, w) = cur.dim();
        let col = im2col(&cur);
        let mut pre = params.conv_weights[l].dot(&col);
        for (row, &b) in pre.rows_mut().into_iter().zip(params.conv_biases[l].iter()) {
            let mut row = row;
            row.mapv_inplace(|v| v + b);
        }
        let post = pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let (out, pool_argmax, oh, ow) = if block.pool {
            let (pooled, argmax) = maxpool(&post, h, w);
            (pooled, Some(argmax), h / 2, w / 2)
        } else {
            (post, None, h, w)
        };
        if let Some(caches) = caches.as_mut() {
            caches.push(LayerCache {
                col,
                pre,
                in_dims: (c_in, h, w),
                out_hw: (h, w),
                pool_argmax: pool_argmax.clone(),
            });
        }
        cur = Array3::from_shape_vec(
            (block.out_channels, oh, ow),
            out.into_raw_vec_and_offset().0,
        )
        .expect("block output shape");
    }

    let (n_feat, fh, fw) = cur.dim();
    let plane = fh * fw;
    let src = cur.as_slice().expect("contiguous");
    let mut gap = Array1::zeros(n_feat);
    for k in 0..n_feat {
        let mut acc = 0.0f64;
        for &v in &src[k * plane..(k + 1) * plane] {
            acc += v.into_f64();
        }
        gap[k] = F::from_f64(acc / plane as f64);
    }
    let mut logits = [0.0f64; NUM_CLASSES];
    for (c, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for k in 0..n_feat {
            acc += params.head_weight[(k, c)].into_f64() * gap[k].into_f64();
        }
        *logit = acc + params.head_bias[c].into_f64();
    }

    ImageForward {
        features: cur,
        gap,
        logits,
        caches,
    }
}

/// Per-image final-conv feature maps and class logits.
pub struct ForwardOutput<F: Scalar> {
    pub feature_maps: Vec<Array3<F>>,
    pub logits: Vec<[F; NUM_CLASSES]>,
}

/// Runs the network over a batch of resized, normalized images.
pub fn forward<F: Scalar>(
    params: &BackendParams<F>,
    batch: &[ImageTensor],
) -> Result<ForwardOutput<F>> {
    let mut feature_maps = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for img in batch {
        let x = image_to_array(img, &params.arch)?;
        let fwd = forward_image(params, x, false);
        feature_maps.push(fwd.features);
        logits.push([F::from_f64(fwd.logits[0]), F::from_f64(fwd.logits[1])]);
    }
    Ok(ForwardOutput {
        feature_maps,
        logits,
    })
}

/// Stable per-term binary cross entropy: `max(z,0) - z*y + ln(1+e^{-|z|})`.
#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean BCE over samples and both classes.
pub fn bce_loss<F: Scalar>(logits: &[[F; NUM_CLASSES]], labels: &[LabelVector]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "logits/labels length mismatch: {} vs {}",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut acc = 0.0f64;
    for (z, label) in logits.iter().zip(labels) {
        let ys = [f64::from(u8::from(label.smoke)), f64::from(u8::from(label.fire))];
        for c in 0..NUM_CLASSES {
            acc += bce_term(z[c].into_f64(), ys[c]);
        }
    }
    Ok(acc / (logits.len() * NUM_CLASSES) as f64)
}

struct GradientSet<F: Scalar> {
    conv_w: Vec<Array2<F>>,
    conv_b: Vec<Array1<F>>,
    head_w: Array2<F>,
    head_b: Array1<F>,
}

impl<F: Scalar> GradientSet<F> {
    fn zeros(params: &BackendParams<F>) -> Self {
        GradientSet {
            conv_w: params
                .conv_weights
                .iter()
                .map(|w| Array2::zeros(w.dim()))
                .collect(),
            conv_b: params
                .conv_biases
                .iter()
                .map(|b| Array1::zeros(b.len()))
                .collect(),
            head_w: Array2::zeros(params.head_weight.dim()),
            head_b: Array1::zeros(params.head_bias.len()),
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (l, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient in tensor conv{l}.weight"
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient in tensor conv{l}.bias"
                )));
            }
        }
        if self.head_w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Train(
                "non-finite gradient in tensor head.weight".into(),
            ));
        }
        if self.head_b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Train(
                "non-finite gradient in tensor head.bias".into(),
            ));
        }
        Ok(())
    }
}

/// One SGD step: `params' = params - lr * d(mean BCE)/d(params)`.
/// Returns the updated parameters and the pre-step batch loss.
pub fn train_step<F: Scalar>(
    params: &BackendParams<F>,
    batch: &[ImageTensor],
    labels: &[LabelVector],
    cfg: &TrainConfig,
) -> Result<(BackendParams<F>, f64)> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Shape(format!(
            "batch/labels sizes invalid: {} vs {}",
            batch.len(),
            labels.len()
        )));
    }
    let mut grads = GradientSet::zeros(params);
    let mut loss_acc = 0.0f64;
    let scale = 1.0 / (batch.len() * NUM_CLASSES) as f64;

    for (img, label) in batch.iter().zip(labels) {
        let x = image_to_array(img, &params.arch)?;
        let fwd = forward_image(params, x, true);
        let caches = fwd.caches.expect("requested cache");
        let ys = [f64::from(u8::from(label.smoke)), f64::from(u8::from(label.fire))];

        let mut dlogits = [0.0f64; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            loss_acc += bce_term(fwd.logits[c], ys[c]);
            dlogits[c] = (sigmoid(fwd.logits[c]) - ys[c]) * scale;
        }

        // Head gradients and the gradient flowing into GAP.
        let n_feat = fwd.gap.len();
        let mut dgap = vec![0.0f64; n_feat];
        for k in 0..n_feat {
            for c in 0..NUM_CLASSES {
                grads.head_w[(k, c)] = grads.head_w[(k, c)]
                    + F::from_f64(fwd.gap[k].into_f64() * dlogits[c]);
                dgap[k] += params.head_weight[(k, c)].into_f64() * dlogits[c];
            }
        }
        for c in 0..NUM_CLASSES {
            grads.head_b[c] = grads.head_b[c] + F::from_f64(dlogits[c]);
        }

        // GAP backward: uniform spread over the final feature plane.
        let (_, fh, fw) = fwd.features.dim();
        let plane = fh * fw;
        let mut dcur = Array2::from_shape_fn((n_feat, plane), |(k, _)| {
            F::from_f64(dgap[k] / plane as f64)
        });

        for (l, cache) in caches.iter().enumerate().rev() {
            let (c_in, in_h, in_w) = cache.in_dims;
            let (conv_h, conv_w) = cache.out_hw;
            let c_out = params.arch.blocks[l].out_channels;
            // Un-pool if needed: route each pooled gradient to its argmax.
            let mut dpost = if let Some(argmax) = &cache.pool_argmax {
                let mut d = vec![F::zero(); c_out * conv_h * conv_w];
                let dsrc = dcur.as_slice().expect("contiguous");
                for (i, &src_idx) in argmax.iter().enumerate() {
                    d[src_idx] = d[src_idx] + dsrc[i];
                }
                Array2::from_shape_vec((c_out, conv_h * conv_w), d).expect("unpool shape")
            } else {
                dcur
            };
            // ReLU mask: zero subgradient at the kink.
            ndarray::Zip::from(&mut dpost).and(&cache.pre).for_each(|d, &p| {
                if p <= F::zero() {
                    *d = F::zero();
                }
            });
            let dpre = dpost;
            grads.conv_w[l] = &grads.conv_w[l] + &dpre.dot(&cache.col.t());
            for (c, db) in grads.conv_b[l].iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for &v in dpre.row(c) {
                    acc += v.into_f64();
                }
                *db = *db + F::from_f64(acc);
            }
            if l == 0 {
                break;
            }
            let dcol = params.conv_weights[l].t().dot(&dpre);
            let dx = col2im(&dcol, c_in, in_h, in_w);
            let (dc, dh, dw) = dx.dim();
            dcur = Array2::from_shape_vec((dc, dh * dw), dx.into_raw_vec_and_offset().0)
                .expect("dx reshape");
        }
    }

    grads.check_finite()?;

    let lr = F::from_f64(cfg.learning_rate);
    let mut next = params.clone();
    for l in 0..next.conv_weights.len() {
        ndarray::Zip::from(&mut next.conv_weights[l])
            .and(&grads.conv_w[l])
            .for_each(|p, &g| *p = *p - lr * g);
        ndarray::Zip::from(&mut next.conv_biases[l])
            .and(&grads.conv_b[l])
            .for_each(|p, &g| *p = *p - lr * g);
    }
    ndarray::Zip::from(&mut next.head_weight)
        .and(&grads.head_w)
        .for_each(|p, &g| *p = *p - lr * g);
    ndarray::Zip::from(&mut next.head_bias)
        .and(&grads.head_b)
        .for_each(|p, &g| *p = *p - lr * g);

    Ok((next, loss_acc * scale))
}

/// Sigmoid confidences for both classes, saturation-clamped at `|z| = 50`.
/// Results stay strictly inside (0, 1): the sigmoid of a large clamped logit
/// would otherwise round to exactly 1.0 in double precision.
pub fn predict_proba<F: Scalar>(
    params: &BackendParams<F>,
    batch: &[ImageTensor],
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let confidence = |z: F| {
        sigmoid(z.into_f64().clamp(-50.0, 50.0)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    };
    let out = forward(params, batch)?;
    Ok(out
        .logits
        .iter()
        .map(|z| [confidence(z[0]), confidence(z[1])])
        .collect())
}
