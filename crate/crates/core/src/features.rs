//! Image preprocessing and the surrogate convolutional backbone.
//!
//! The backbone is two banks of seeded random 3x3 convolutions over the RGB
//! rendering of an HSV image: stage 1 (conv, ReLU, average pool) is always
//! frozen; stage 2 (conv, ReLU, global average pool) can be made trainable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::image::{wrap_hue, HsvImage, SV_MAX};

// ── resampling ──────────────────────────────────────────────────────────────

/// Bilinear sample at source pixel-centre coordinates; hue is interpolated on
/// the colour circle. Points more than half a pixel outside return `fill`.
fn sample_bilinear(img: &HsvImage, sy: f64, sx: f64, fill: [f64; 3]) -> [f64; 3] {
    let (h, w) = (img.h as f64, img.w as f64);
    if sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5 {
        return fill;
    }
    let y = sy.clamp(0.0, h - 1.0);
    let x = sx.clamp(0.0, w - 1.0);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.h - 1);
    let x1 = (x0 + 1).min(img.w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    if fy == 0.0 && fx == 0.0 {
        return img.pixel(y0, x0);
    }
    let taps = [
        ((1.0 - fy) * (1.0 - fx), img.pixel(y0, x0)),
        ((1.0 - fy) * fx, img.pixel(y0, x1)),
        (fy * (1.0 - fx), img.pixel(y1, x0)),
        (fy * fx, img.pixel(y1, x1)),
    ];
    let mut hc = 0.0;
    let mut hs = 0.0;
    let mut s = 0.0;
    let mut v = 0.0;
    for (wt, px) in taps {
        if wt == 0.0 {
            continue;
        }
        let (sin, cos) = px[0].to_radians().sin_cos();
        hc += wt * cos;
        hs += wt * sin;
        s += wt * px[1];
        v += wt * px[2];
    }
    let hue = if hc.abs() < 1e-12 && hs.abs() < 1e-12 { 0.0 } else { wrap_hue(hs.atan2(hc).to_degrees()) };
    [hue, s.clamp(0.0, SV_MAX), v.clamp(0.0, SV_MAX)]
}

const PAD: [f64; 3] = [0.0, 0.0, 0.0];

/// Aspect-preserving bilinear resize into a `target x target` canvas, padded
/// with black (value 0) and centred.
pub fn letterbox(image: &HsvImage, target: usize) -> Result<HsvImage> {
    image.check_shape()?;
    if image.is_empty() {
        return Err(ReidError::invalid("cannot letterbox an empty image"));
    }
    if target == 0 {
        return Err(ReidError::invalid("letterbox target must be >= 1"));
    }
    if image.h == target && image.w == target {
        return Ok(image.clone());
    }
    let scale = (target as f64 / image.h as f64).min(target as f64 / image.w as f64);
    let nh = ((image.h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((image.w as f64 * scale).round() as usize).clamp(1, target);
    let oy = (target - nh) / 2;
    let ox = (target - nw) / 2;
    let ry = image.h as f64 / nh as f64;
    let rx = image.w as f64 / nw as f64;
    let mut out = HsvImage::zeros(target, target);
    for y in 0..nh {
        let sy = (y as f64 + 0.5) * ry - 0.5;
        for x in 0..nw {
            let sx = (x as f64 + 0.5) * rx - 0.5;
            out.set_pixel(y + oy, x + ox, sample_bilinear(image, sy, sx, PAD));
        }
    }
    Ok(out)
}

// ── augmentation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Hue and saturation offsets are drawn from `[-max, max]`.
    pub hue_sat_delta_max: f64,
    /// Rotation as a fraction of a full turn, drawn from `[-max, max]`.
    pub rotation_fraction_max: f64,
    /// Zoom factor drawn from `[1, 1 + max]`.
    pub scale_fraction_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { hue_sat_delta_max: 20.0, rotation_fraction_max: 0.1, scale_fraction_max: 0.1 }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self { hue_sat_delta_max: 0.0, rotation_fraction_max: 0.0, scale_fraction_max: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hue_sat_delta_max, self.rotation_fraction_max, self.scale_fraction_max];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ReidError::invalid("augmentation parameters must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hue_delta: f64,
    pub sat_delta: f64,
    pub angle_deg: f64,
    pub zoom: f64,
}

impl AugmentDraw {
    /// Always consumes four draws so the stream position does not depend on the parameters.
    pub fn sample(params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let m = params.hue_sat_delta_max;
        let r = params.rotation_fraction_max;
        Self {
            hue_delta: rng.random_range(-m..=m),
            sat_delta: rng.random_range(-m..=m),
            angle_deg: rng.random_range(-r..=r) * 360.0,
            zoom: 1.0 + rng.random_range(0.0..=params.scale_fraction_max),
        }
    }
}

/// Adds `hue_delta` (wrapped) and `sat_delta` (clamped) to every pixel.
pub fn shift_hue_saturation(image: &HsvImage, hue_delta: f64, sat_delta: f64) -> HsvImage {
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        px[0] = wrap_hue(px[0] + hue_delta);
        px[1] = (px[1] + sat_delta).clamp(0.0, SV_MAX);
    }
    out
}

/// Half-sample symmetric reflection of a sample coordinate into `[-0.5, n - 0.5]`.
fn reflect(s: f64, n: usize) -> f64 {
    let period = 2.0 * n as f64;
    let t = (s + 0.5).rem_euclid(period);
    let t = if t > n as f64 { period - t } else { t };
    t - 0.5
}

/// Rotation by `angle_deg` and zoom by `zoom` about the image centre; samples
/// falling outside the image are reflected back in.
pub fn rotate_scale(image: &HsvImage, angle_deg: f64, zoom: f64) -> HsvImage {
    if angle_deg == 0.0 && zoom == 1.0 {
        return image.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (image.h as f64 - 1.0) / 2.0;
    let cx = (image.w as f64 - 1.0) / 2.0;
    let mut out = HsvImage::zeros(image.h, image.w);
    for y in 0..image.h {
        let dy = y as f64 - cy;
        for x in 0..image.w {
            let dx = x as f64 - cx;
            let sx = (cos * dx + sin * dy) / zoom + cx;
            let sy = (-sin * dx + cos * dy) / zoom + cy;
            out.set_pixel(y, x, sample_bilinear(image, reflect(sy, image.h), reflect(sx, image.w), PAD));
        }
    }
    out
}

pub fn apply_augment(image: &HsvImage, draw: &AugmentDraw) -> HsvImage {
    let jittered = shift_hue_saturation(image, draw.hue_delta, draw.sat_delta);
    rotate_scale(&jittered, draw.angle_deg, draw.zoom)
}

/// Colour jitter, then rotation, then zoom.
pub fn augment(image: &HsvImage, params: &AugmentParams, rng: &mut impl Rng) -> HsvImage {
    let draw = AugmentDraw::sample(params, rng);
    apply_augment(image, &draw)
}

// ── backbone ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stage1_channels: usize,
    pub stage1_pool: usize,
    pub feature_dim: usize,
    pub stage2_stride: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { input_size: 64, stage1_channels: 16, stage1_pool: 8, feature_dim: 256, stage2_stride: 1, seed: 0 }
    }
}

const K: usize = 3;
const STAGE1_STRIDE: usize = 2;

fn conv_out(n: usize, stride: usize) -> usize {
    // 3x3 kernel, one pixel of zero padding
    (n - 1) / stride + 1
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || self.stage1_channels == 0 || self.feature_dim == 0 {
            return Err(ReidError::config("backbone dimensions must be positive (input >= 4)"));
        }
        if self.stage1_pool == 0 || self.stage2_stride == 0 {
            return Err(ReidError::config("pool and stride must be >= 1"));
        }
        if self.stage1_size() / self.stage1_pool == 0 {
            return Err(ReidError::config("stage 1 pool larger than the stage 1 map"));
        }
        Ok(())
    }

    fn stage1_size(&self) -> usize {
        conv_out(self.input_size, STAGE1_STRIDE)
    }

    /// Side length of the pooled stage 1 map.
    pub fn pooled_size(&self) -> usize {
        self.stage1_size() / self.stage1_pool
    }

    /// Side length of the stage 2 map before global pooling.
    pub fn stage2_size(&self) -> usize {
        conv_out(self.pooled_size(), self.stage2_stride)
    }

    pub fn stage1_fan_in(&self) -> usize {
        3 * K * K
    }

    pub fn stage2_fan_in(&self) -> usize {
        self.stage1_channels * K * K
    }
}

/// Pooled stage 1 activations, channel-major.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub size: usize,
    pub data: Vec<f64>,
}

/// What stage 2 needs to back-propagate one image.
#[derive(Debug, Clone)]
pub struct Stage2Cache {
    patches: Vec<f64>,
    active: Vec<bool>,
}

/// Gradient buffers shaped like the stage 2 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Grad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Stage2Grad {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        Self { weight: vec![0.0; cfg.stage2_fan_in() * cfg.feature_dim], bias: vec![0.0; cfg.feature_dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Stage 1 weights, `[fan_in][channel]` with fan-in index `ch * 9 + ky * 3 + kx`.
    pub stage1_weight: Vec<f64>,
    pub stage1_bias: Vec<f64>,
    /// Stage 2 weights, `[fan_in][feature]` with fan-in index `c * 9 + ky * 3 + kx`.
    pub stage2_weight: Vec<f64>,
    pub stage2_bias: Vec<f64>,
    pub stage2_trainable: bool,
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn active_signature(active: &[bool]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in active.chunks(64) {
        let mut bits = 0u64;
        for (i, &a) in chunk.iter().enumerate() {
            bits |= (a as u64) << i;
        }
        h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// im2col for a 3x3, pad-1 convolution over a channel-major `channels x n x n` map.
fn im2col(input: &[f64], channels: usize, n: usize, stride: usize, out: &mut Vec<f64>) -> usize {
    let m = conv_out(n, stride);
    let fan_in = channels * K * K;
    out.clear();
    out.resize(m * m * fan_in, 0.0);
    for oy in 0..m {
        for ox in 0..m {
            let row = &mut out[(oy * m + ox) * fan_in..][..fan_in];
            for c in 0..channels {
                let plane = &input[c * n * n..][..n * n];
                for ky in 0..K {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= n as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= n as isize {
                            continue;
                        }
                        row[c * 9 + ky * 3 + kx] = plane[iy as usize * n + ix as usize];
                    }
                }
            }
        }
    }
    m
}

impl Backbone {
    /// Seeded random weights; stage 2 starts frozen.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c1 = config.stage1_channels;
        let f = config.feature_dim;
        let n1 = Normal::new(0.0, (2.0 / config.stage1_fan_in() as f64).sqrt()).expect("finite std");
        let stage1_weight = (0..config.stage1_fan_in() * c1).map(|_| n1.sample(&mut rng)).collect();
        let stage1_bias = (0..c1).map(|_| rng.random_range(-0.2..0.2)).collect();
        let n2 = Normal::new(0.0, (2.0 / config.stage2_fan_in() as f64).sqrt()).expect("finite std");
        let stage2_weight = (0..config.stage2_fan_in() * f).map(|_| n2.sample(&mut rng)).collect();
        let stage2_bias = (0..f).map(|_| rng.random_range(-0.1..0.1)).collect();
        Ok(Self { config, stage1_weight, stage1_bias, stage2_weight, stage2_bias, stage2_trainable: false })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn stage2_param_count(&self) -> usize {
        self.stage2_weight.len() + self.stage2_bias.len()
    }

    fn check_input(&self, image: &HsvImage) -> Result<()> {
        image.check_shape()?;
        let s = self.config.input_size;
        if image.h != s || image.w != s {
            return Err(ReidError::invalid(format!("backbone expects {s}x{s} input, got {}x{}", image.h, image.w)));
        }
        Ok(())
    }

    /// Frozen stage: RGB conversion, strided conv, ReLU, average pool.
    pub fn stage1(&self, image: &HsvImage) -> Result<Stage1Output> {
        self.check_input(image)?;
        let n = self.config.input_size;
        let mut planar = vec![0.0; 3 * n * n];
        for (i, px) in image.data.chunks_exact(3).enumerate() {
            let rgb = crate::image::hsv_to_rgb(px[0], px[1], px[2]);
            for c in 0..3 {
                planar[c * n * n + i] = rgb[c];
            }
        }
        let c1 = self.config.stage1_channels;
        let mut patches = Vec::new();
        let m = im2col(&planar, 3, n, STAGE1_STRIDE, &mut patches);
        let fan_in = self.config.stage1_fan_in();
        let mut conv = vec![0.0; c1 * m * m];
        let mut z = vec![0.0; c1];
        for p in 0..m * m {
            z.copy_from_slice(&self.stage1_bias);
            for (k, &x) in patches[p * fan_in..][..fan_in].iter().enumerate() {
                if x != 0.0 {
                    axpy(&mut z, x, &self.stage1_weight[k * c1..][..c1]);
                }
            }
            for c in 0..c1 {
                conv[c * m * m + p] = z[c].max(0.0);
            }
        }
        let pool = self.config.stage1_pool;
        let ps = m / pool;
        let norm = 1.0 / (pool * pool) as f64;
        let mut data = vec![0.0; c1 * ps * ps];
        for c in 0..c1 {
            for py in 0..ps {
                for px in 0..ps {
                    let mut acc = 0.0;
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += conv[c * m * m + (py * pool + dy) * m + px * pool + dx];
                        }
                    }
                    data[c * ps * ps + py * ps + px] = acc * norm;
                }
            }
        }
        Ok(Stage1Output { size: ps, data })
    }

    /// Stage 2 forward pass, keeping what the backward pass needs.
    pub fn stage2_forward(&self, s1: &Stage1Output) -> (FeatureVector, Stage2Cache) {
        let f = self.config.feature_dim;
        let fan_in = self.config.stage2_fan_in();
        let mut patches = Vec::new();
        let m = im2col(&s1.data, self.config.stage1_channels, s1.size, self.config.stage2_stride, &mut patches);
        let positions = m * m;
        let mut active = vec![false; positions * f];
        let mut out = vec![0.0; f];
        let mut z = vec![0.0; f];
        for p in 0..positions {
            z.copy_from_slice(&self.stage2_bias);
            for (k, &x) in patches[p * fan_in..][..fan_in].iter().enumerate() {
                if x != 0.0 {
                    axpy(&mut z, x, &self.stage2_weight[k * f..][..f]);
                }
            }
            let act = &mut active[p * f..][..f];
            for o in 0..f {
                if z[o] > 0.0 {
                    act[o] = true;
                    out[o] += z[o];
                }
            }
        }
        let inv = 1.0 / positions as f64;
        for v in &mut out {
            *v *= inv;
        }
        (FeatureVector(out), Stage2Cache { patches, active })
    }

    /// Accumulates the stage 2 parameter gradient for upstream gradient `d_features`.
    pub fn stage2_backward(&self, cache: &Stage2Cache, d_features: &[f64], grad: &mut Stage2Grad) {
        let f = self.config.feature_dim;
        let fan_in = self.config.stage2_fan_in();
        let positions = cache.active.len() / f;
        let inv = 1.0 / positions as f64;
        let mut g = vec![0.0; f];
        for p in 0..positions {
            let act = &cache.active[p * f..][..f];
            for o in 0..f {
                g[o] = if act[o] { d_features[o] * inv } else { 0.0 };
            }
            axpy(&mut grad.bias, 1.0, &g);
            for (k, &x) in cache.patches[p * fan_in..][..fan_in].iter().enumerate() {
                if x != 0.0 {
                    axpy(&mut grad.weight[k * f..][..f], x, &g);
                }
            }
        }
    }

    /// Hash of the stage 2 ReLU pattern; equal hashes mean the same linear region.
    pub fn activation_signature(cache: &Stage2Cache) -> u64 {
        active_signature(&cache.active)
    }

    /// Feature `o` and the activation signature after a change confined to output
    /// channel `o`; every other channel is read from `cache`.
    pub(crate) fn stage2_channel(&self, cache: &Stage2Cache, o: usize) -> (f64, u64) {
        let f = self.config.feature_dim;
        let fan_in = self.config.stage2_fan_in();
        let positions = cache.active.len() / f;
        let mut active = cache.active.clone();
        let mut out = 0.0;
        for p in 0..positions {
            let mut z = self.stage2_bias[o];
            for (k, &x) in cache.patches[p * fan_in..][..fan_in].iter().enumerate() {
                if x != 0.0 {
                    z += x * self.stage2_weight[k * f + o];
                }
            }
            active[p * f + o] = z > 0.0;
            if z > 0.0 {
                out += z;
            }
        }
        (out * (1.0 / positions as f64), active_signature(&active))
    }

    pub fn forward_cached(&self, image: &HsvImage) -> Result<(FeatureVector, Stage2Cache)> {
        let s1 = self.stage1(image)?;
        Ok(self.stage2_forward(&s1))
    }

    /// Upper bound on `|f(x') - f(x)|_2 / eps` when one HSV channel of one pixel moves by `eps`.
    pub fn single_pixel_lipschitz_bound(&self) -> f64 {
        // hue in degrees dominates: d(rgb)/d(hue) <= 1/60
        let rgb_gain = 1.0 / 60.0;
        let c1 = self.config.stage1_channels;
        let f = self.config.feature_dim;
        let cover1 = K.div_ceil(STAGE1_STRIDE).pow(2) as f64;
        let cover2 = K.div_ceil(self.config.stage2_stride).pow(2) as f64;
        let pool_area = (self.config.stage1_pool * self.config.stage1_pool) as f64;
        let positions = self.config.stage2_size().pow(2) as f64;
        // a[c]: largest per-tap change of a stage 1 pre-activation
        let a: Vec<f64> =
            (0..c1).map(|c| (0..9).map(|tap| (0..3).map(|ch| self.stage1_weight[(ch * 9 + tap) * c1 + c].abs()).sum::<f64>()).fold(0.0, f64::max)).collect();
        let mut total = 0.0;
        for o in 0..f {
            let mut s = 0.0;
            for c in 0..c1 {
                let wmax = (0..9).map(|tap| self.stage2_weight[(c * 9 + tap) * f + o].abs()).fold(0.0, f64::max);
                s += wmax * cover2 * cover1 * a[c] / pool_area;
            }
            total += s / positions;
        }
        rgb_gain * total
    }
}

/// Features of an image already letterboxed to the backbone input size.
pub fn extract(backbone: &Backbone, image: &HsvImage) -> Result<FeatureVector> {
    Ok(backbone.forward_cached(image)?.0)
}

/// Letterbox then extract.
pub fn featurize(backbone: &Backbone, image: &HsvImage) -> Result<FeatureVector> {
    let boxed = letterbox(image, backbone.input_size())?;
    extract(backbone, &boxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> HsvImage {
        let mut img = HsvImage::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, [((x * 13 + y * 7) % 360) as f64, (x * 3 % 101) as f64, (40 + y % 60) as f64]);
            }
        }
        img
    }

    #[test]
    fn letterbox_square_is_identity() {
        let img = ramp(64, 64);
        assert_eq!(letterbox(&img, 64).unwrap(), img);
    }

    #[test]
    fn letterbox_wide_image_pads_rows() {
        let mut img = ramp(32, 64);
        for px in img.data.chunks_exact_mut(3) {
            px[2] = px[2].max(1.0);
        }
        let out = letterbox(&img, 64).unwrap();
        assert_eq!((out.h, out.w), (64, 64));
        for y in 0..64 {
            let content = (16..48).contains(&y);
            for x in 0..64 {
                let px = out.pixel(y, x);
                if content {
                    assert_eq!(px, img.pixel(y - 16, x));
                } else {
                    assert_eq!(px, [0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn letterbox_accepts_224_and_rejects_bad_input() {
        let out = letterbox(&ramp(50, 80), 224).unwrap();
        assert_eq!((out.h, out.w), (224, 224));
        assert!(letterbox(&HsvImage::zeros(0, 0), 8).is_err());
        assert!(letterbox(&ramp(4, 4), 0).is_err());
    }

    #[test]
    fn letterbox_idempotent() {
        let once = letterbox(&ramp(30, 50), 40).unwrap();
        assert_eq!(letterbox(&once, 40).unwrap(), once);
    }

    #[test]
    fn zero_augment_is_identity() {
        let img = ramp(20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            assert_eq!(augment(&img, &AugmentParams::none(), &mut rng), img);
        }
    }

    #[test]
    fn hue_wraps_on_shift() {
        let mut img = HsvImage::zeros(1, 1);
        img.set_pixel(0, 0, [350.0, 95.0, 50.0]);
        let out = shift_hue_saturation(&img, 20.0, 20.0);
        let px = out.pixel(0, 0);
        assert!((px[0] - 10.0).abs() < 1e-12);
        assert_eq!(px[1], 100.0);
        let back = shift_hue_saturation(&img, -355.0, -200.0).pixel(0, 0);
        assert!((back[0] - 355.0).abs() < 1e-12);
        assert_eq!(back[1], 0.0);
    }

    #[test]
    fn augment_draws_stay_in_range() {
        let params = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let d = AugmentDraw::sample(&params, &mut rng);
            assert!((-20.0..=20.0).contains(&d.hue_delta));
            assert!((-20.0..=20.0).contains(&d.sat_delta));
            assert!((-36.0..=36.0).contains(&d.angle_deg));
            assert!((1.0..=1.1).contains(&d.zoom));
        }
    }

    #[test]
    fn augmented_image_stays_valid_and_deterministic() {
        let img = ramp(24, 24);
        let a = augment(&img, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(8));
        let b = augment(&img, &AugmentParams::default(), &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    fn small_backbone() -> Backbone {
        Backbone::new(BackboneConfig { input_size: 16, stage1_pool: 2, stage2_stride: 2, feature_dim: 32, ..BackboneConfig::default() }).unwrap()
    }

    #[test]
    fn zero_image_gives_bias_response() {
        let bb = small_backbone();
        let f = extract(&bb, &HsvImage::zeros(16, 16)).unwrap();
        // Black input: stage 1 maps are relu(bias1) everywhere, except that
        // zero padding is invisible because the input itself is zero.
        let r1: Vec<f64> = bb.stage1_bias.iter().map(|b| b.max(0.0)).collect();
        let c1 = bb.config.stage1_channels;
        let fdim = bb.feature_dim();
        let m = bb.config.stage2_size();
        let n = bb.config.pooled_size();
        let mut expect = vec![0.0; fdim];
        for oy in 0..m {
            for ox in 0..m {
                for o in 0..fdim {
                    let mut z = bb.stage2_bias[o];
                    for c in 0..c1 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < n && (ix as usize) < n {
                                    z += bb.stage2_weight[(c * 9 + ky * 3 + kx) * fdim + o] * r1[c];
                                }
                            }
                        }
                    }
                    expect[o] += z.max(0.0) / (m * m) as f64;
                }
            }
        }
        for (a, b) in f.0.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn extract_rejects_wrong_size() {
        assert!(matches!(extract(&small_backbone(), &HsvImage::zeros(8, 8)), Err(ReidError::InvalidArgument(_))));
    }

    #[test]
    fn extract_is_pure_and_not_mirror_invariant() {
        let bb = small_backbone();
        let img = ramp(16, 16);
        let a = extract(&bb, &img).unwrap();
        assert_eq!(a, extract(&bb, &img).unwrap());
        assert_eq!(a.len(), 32);
        let m = extract(&bb, &img.mirrored()).unwrap();
        let diff: f64 = a.0.iter().zip(&m.0).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn single_pixel_perturbation_is_bounded() {
        let bb = small_backbone();
        let bound = bb.single_pixel_lipschitz_bound();
        let img = ramp(16, 16);
        let base = extract(&bb, &img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let (y, x, c) = (rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..3));
            let eps = 0.5;
            let mut p = img.clone();
            let i = p.idx(y, x) + c;
            p.data[i] = if c == 0 { wrap_hue(p.data[i] + eps) } else { (p.data[i] + eps).min(100.0) };
            let moved = (p.data[i] - img.data[i]).abs();
            if moved == 0.0 {
                continue;
            }
            let out = extract(&bb, &p).unwrap();
            let d: f64 = base.0.iter().zip(&out.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(d / moved);
        }
        assert!(worst > 0.0);
        assert!(worst <= bound, "measured {worst} exceeds bound {bound}");
    }

    #[test]
    fn stage2_backward_matches_finite_differences() {
        let bb = small_backbone();
        let s1 = bb.stage1(&ramp(16, 16)).unwrap();
        let (f0, cache) = bb.stage2_forward(&s1);
        let upstream: Vec<f64> = (0..f0.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut grad = Stage2Grad::zeros(&bb.config);
        bb.stage2_backward(&cache, &upstream, &mut grad);
        let objective = |b: &Backbone| -> f64 {
            let (f, _) = b.stage2_forward(&s1);
            f.0.iter().zip(&upstream).map(|(a, u)| a * u).sum()
        };
        let eps = 1e-6;
        for idx in (0..bb.stage2_weight.len()).step_by(37) {
            let mut plus = bb.clone();
            plus.stage2_weight[idx] += eps;
            let mut minus = bb.clone();
            minus.stage2_weight[idx] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - grad.weight[idx]).abs() < 1e-7, "w[{idx}]: {fd} vs {}", grad.weight[idx]);
        }
        for o in 0..bb.feature_dim() {
            let mut plus = bb.clone();
            plus.stage2_bias[o] += eps;
            let mut minus = bb.clone();
            minus.stage2_bias[o] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - grad.bias[o]).abs() < 1e-7);
        }
    }
}
