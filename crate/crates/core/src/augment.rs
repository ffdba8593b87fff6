//! Image augmentation for SSL views and supervised fine-tuning.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]` until
//! [`normalize`]. Color operations act on 3-channel images and leave other
//! channel counts untouched.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Proposals tried before falling back to a center crop.
const CROP_ATTEMPTS: usize = 10;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Missing fields in a serialized policy take their SimCLR values at 224.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    pub resolution: usize,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub jitter_p: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    /// Sigma range at 224 pixels; scaled linearly with `resolution`.
    pub blur_sigma: (f64, f64),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy::simclr(224)
    }
}

impl AugPolicy {
    /// SimCLR-style recipe at resolution `r`.
    pub fn simclr(r: usize) -> Self {
        AugPolicy {
            resolution: r,
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_p: 0.8,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Resize-and-normalize only.
    pub fn identity(r: usize) -> Self {
        AugPolicy {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            ..Self::simclr(r)
        }
    }

    pub fn with_resolution(&self, r: usize) -> Self {
        AugPolicy {
            resolution: r,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("augment.{field}"), reason));
        if self.resolution == 0 {
            return bad("resolution", "must be positive");
        }
        for (field, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("gray_p", self.gray_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(field, "probability must lie in [0, 1]");
            }
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("scale", "need 0 < lo <= hi <= 1");
        }
        let (lo, hi) = self.ratio;
        if !(lo > 0.0 && lo <= hi) {
            return bad("ratio", "need 0 < lo <= hi");
        }
        for (field, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(field, "strength must lie in [0, 1]");
            }
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return bad("blur_sigma", "need 0 < lo <= hi");
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return bad("std", "must be positive");
        }
        Ok(())
    }
}

/// Two independently augmented views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub source: usize,
    pub a: Tensor,
    pub b: Tensor,
}

/// A crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "images are [C, H, W]");
    (s[0], s[1], s[2])
}

/// Sample a random-resized-crop window for an `h × w` source.
pub fn sample_crop(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut SeededRng) -> CropRect {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.uniform_in(scale.0, scale.1);
        let aspect = rng.uniform_in(log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below(h - ch + 1);
            let left = rng.below(w - cw + 1);
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    center_crop_rect(h, w, ratio)
}

/// Largest centered window whose aspect lies in `ratio`.
fn center_crop_rect(h: usize, w: usize, ratio: (f64, f64)) -> CropRect {
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        (((w as f64 / ratio.0).round() as usize).clamp(1, h), w)
    } else if in_ratio > ratio.1 {
        (h, ((h as f64 * ratio.1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of `rect` to `out_h × out_w` with half-pixel centers.
///
/// Output pixel `(i, j)` samples source coordinate
/// `rect.top + (i + 0.5)·rect.height/out_h − 0.5` (clamped to the crop),
/// and likewise for columns.
pub fn resize_bilinear(img: &Tensor, rect: CropRect, out_h: usize, out_w: usize) -> Tensor {
    let (c, _, w) = dims(img);
    let src = img.data();
    let axis = |n_out: usize, n_in: usize, origin: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (origin + lo, origin + hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(out_h, rect.height, rect.top);
    let cols = axis(out_w, rect.width, rect.left);
    let plane_in = img.shape()[1] * w;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * plane_in..(ch + 1) * plane_in];
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = p[r0 * w + c0] * (1.0 - fx) + p[r0 * w + c1] * fx;
                let bot = p[r1 * w + c0] * (1.0 - fx) + p[r1 * w + c1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
}

pub fn random_resized_crop(img: &Tensor, policy: &AugPolicy, rng: &mut SeededRng) -> Tensor {
    let (_, h, w) = dims(img);
    let rect = sample_crop(h, w, policy.scale, policy.ratio, rng);
    resize_bilinear(img, rect, policy.resolution, policy.resolution)
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (_, _, w) = dims(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn luma(img: &Tensor) -> Vec<f32> {
    let (_, h, w) = dims(img);
    let d = img.data();
    let n = h * w;
    (0..n)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
        .collect()
}

fn blend(img: &mut Tensor, other: impl Fn(usize, usize) -> f32, factor: f32) {
    let (_, h, w) = dims(img);
    let n = h * w;
    for (idx, v) in img.data_mut().iter_mut().enumerate() {
        let o = other(idx / n, idx % n);
        *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &Tensor, factor: f32) -> Tensor {
    let mut out = img.clone();
    blend(&mut out, |_, _| 0.0, factor);
    out
}

pub fn adjust_contrast(img: &Tensor, factor: f32) -> Tensor {
    if img.shape()[0] != 3 {
        return img.clone();
    }
    let l = luma(img);
    let mean = l.iter().sum::<f32>() / l.len() as f32;
    let mut out = img.clone();
    blend(&mut out, |_, _| mean, factor);
    out
}

pub fn adjust_saturation(img: &Tensor, factor: f32) -> Tensor {
    if img.shape()[0] != 3 {
        return img.clone();
    }
    let l = luma(img);
    let mut out = img.clone();
    blend(&mut out, |_, i| l[i], factor);
    out
}

/// Replace every channel with the luma of the pixel.
pub fn grayscale(img: &Tensor) -> Tensor {
    if img.shape()[0] != 3 {
        return img.clone();
    }
    let l = luma(img);
    let mut data = Vec::with_capacity(3 * l.len());
    for _ in 0..3 {
        data.extend_from_slice(&l);
    }
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// Brightness, contrast and saturation jitter in a random order. Each factor
/// is drawn from `[1 − s, 1 + s]`; a zero strength skips that adjustment.
pub fn color_distort(img: &Tensor, strengths: [f64; 3], rng: &mut SeededRng) -> Tensor {
    let order = rng.permutation(3);
    let factors: Vec<f32> = strengths
        .iter()
        .map(|&s| rng.uniform_in(1.0 - s, 1.0 + s) as f32)
        .collect();
    let mut out = img.clone();
    for k in order {
        if strengths[k] == 0.0 {
            continue;
        }
        out = match k {
            0 => adjust_brightness(&out, factors[0]),
            1 => adjust_contrast(&out, factors[1]),
            _ => adjust_saturation(&out, factors[2]),
        };
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let (c, h, w) = dims(img);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0f32; src.len()];
    let mut out = vec![0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// `(x − mean) / std` per channel. Channels beyond the stats table reuse its last entry.
pub fn normalize(img: &Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Tensor {
    let (_, h, w) = dims(img);
    let n = h * w;
    let mut out = img.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (idx / n).min(2);
        *v = (*v - mean[ch]) / std[ch];
    }
    out
}

/// One SSL view: crop → flip → color distortion → grayscale → blur → normalize.
pub fn augment_view(img: &Tensor, policy: &AugPolicy, rng: &mut SeededRng) -> Tensor {
    let mut v = random_resized_crop(img, policy, rng);
    if rng.bernoulli(policy.flip_p) {
        v = hflip(&v);
    }
    if rng.bernoulli(policy.jitter_p) {
        v = color_distort(&v, [policy.brightness, policy.contrast, policy.saturation], rng);
    }
    if rng.bernoulli(policy.gray_p) {
        v = grayscale(&v);
    }
    if rng.bernoulli(policy.blur_p) {
        let s = policy.resolution as f64 / 224.0;
        let sigma = rng.uniform_in(policy.blur_sigma.0 * s, policy.blur_sigma.1 * s);
        v = gaussian_blur(&v, sigma);
    }
    normalize(&v, &policy.mean, &policy.std)
}

/// Two views from child streams 0 and 1 of `rng`. Callers address `rng` by
/// (seed, epoch, sample index) so results never depend on scheduling.
pub fn make_view_pair(source: usize, img: &Tensor, policy: &AugPolicy, rng: &SeededRng) -> ViewPair {
    ViewPair {
        source,
        a: augment_view(img, policy, &mut rng.derive(&[0])),
        b: augment_view(img, policy, &mut rng.derive(&[1])),
    }
}

/// Shorter-side resize target for fine-tuning at resolution `r` (256 at 224).
pub fn finetune_resize(r: usize) -> usize {
    (256 * r).div_ceil(224)
}

/// Fine-tuning transform. Training draws a random crop and a flip from `rng`;
/// evaluation is deterministic and ignores it.
pub fn finetune_transform(img: &Tensor, train: bool, r: usize, policy: &AugPolicy, rng: &mut SeededRng) -> Tensor {
    let (_, h, w) = dims(img);
    let s = finetune_resize(r);
    let (nh, nw) = if h <= w {
        (s, ((w * s) as f64 / h as f64).round() as usize)
    } else {
        (((h * s) as f64 / w as f64).round() as usize, s)
    };
    let full = CropRect {
        top: 0,
        left: 0,
        height: h,
        width: w,
    };
    let resized = resize_bilinear(img, full, nh, nw);
    let (top, left) = if train {
        (rng.below(nh - r + 1), rng.below(nw - r + 1))
    } else {
        ((nh - r) / 2, (nw - r) / 2)
    };
    let c = img.shape()[0];
    let src = resized.data();
    let mut data = Vec::with_capacity(c * r * r);
    for ch in 0..c {
        for y in 0..r {
            let row = ch * nh * nw + (top + y) * nw + left;
            data.extend_from_slice(&src[row..row + r]);
        }
    }
    let mut out = Tensor::new(vec![c, r, r], data).expect("crop shape");
    if train && rng.bernoulli(0.5) {
        out = hflip(&out);
    }
    normalize(&out, &policy.mean, &policy.std)
}

/// A mixed batch and its soft labels.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub x: Tensor,
    pub y: Tensor,
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// Mixup with `λ ~ Beta(α, α)` and a seeded partner permutation.
pub fn mixup_batch(x: &Tensor, y: &Tensor, alpha: f64, rng: &mut SeededRng) -> Result<Mixed> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let n = x.shape()[0];
    if n < 2 {
        return Err(Error::invalid("mixup needs a batch of at least 2"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let lambda = beta.sample(rng);
    let perm = rng.permutation(n);
    mixup_with_lambda(x, y, lambda, perm)
}

/// `x̃ = λx + (1−λ)x[perm]`, and likewise for labels.
pub fn mixup_with_lambda(x: &Tensor, y: &Tensor, lambda: f64, perm: Vec<usize>) -> Result<Mixed> {
    let n = x.shape()[0];
    if y.shape().len() != 2 || y.shape()[0] != n || perm.len() != n {
        return Err(Error::shape("mixup", "x, y and perm must agree on batch size"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let mix = |t: &Tensor| {
        let row = t.len() / n;
        let l = lambda as f32;
        let d = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &p) in perm.iter().enumerate() {
            let a = &d[i * row..(i + 1) * row];
            let b = &d[p * row..(p + 1) * row];
            if lambda == 1.0 {
                out.extend_from_slice(a);
            } else if lambda == 0.0 {
                out.extend_from_slice(b);
            } else {
                out.extend(a.iter().zip(b).map(|(&u, &v)| l * u + (1.0 - l) * v));
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    };
    Ok(Mixed {
        x: mix(x),
        y: mix(y),
        lambda,
        perm,
    })
}
