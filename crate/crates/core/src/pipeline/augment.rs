//! Two-view augmentation: random resized crop, flip, color jitter, random
//! grayscale and normalization.

use rand::Rng;
use repre_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio, sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Largest hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub grayscale_prob: f64,
    /// Normalization applied to encoder inputs only.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.35, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl AugmentationPolicy {
    /// Full crop, no flip, no jitter.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        let ok = s0 > 0.0
            && s0 <= s1
            && s1 <= 1.0
            && r0 > 0.0
            && r0 <= r1
            && r1.is_finite()
            && (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.grayscale_prob)
            && (0.0..=0.5).contains(&self.hue)
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|j| (0.0..1.0).contains(j))
            && self.std.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.mean.iter().all(|m| m.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }

    /// `(x − mean) / std` per channel.
    pub fn normalize(&self, img: &Tensor) -> Tensor {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// One view plus the reconstruction target of the first.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoViews {
    /// First view before normalization.
    pub v1_raw: Tensor,
    pub v1_norm: Tensor,
    pub v2_norm: Tensor,
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => Err(Error::Invalid(format!("expected an [H, W, 3] image, got {s:?}"))),
    }
}

/// Integer crop box `(x0, y0, w, h)`.
fn sample_crop<R: Rng>(h: usize, w: usize, policy: &AugmentationPolicy, rng: &mut R) -> Result<(usize, usize, usize, usize)> {
    let scale = if policy.crop_scale.0 < policy.crop_scale.1 {
        rng.gen_range(policy.crop_scale.0..=policy.crop_scale.1)
    } else {
        policy.crop_scale.0
    };
    let (lr0, lr1) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    let ratio = if lr0 < lr1 { rng.gen_range(lr0..=lr1).exp() } else { policy.crop_ratio.0 };
    let area = scale * (h * w) as f64;
    let cw = ((area * ratio).sqrt().round() as usize).min(w);
    let ch = ((area / ratio).sqrt().round() as usize).min(h);
    if cw == 0 || ch == 0 {
        return Err(Error::Invalid(format!("degenerate {cw}x{ch} crop of a {w}x{h} image")));
    }
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    Ok((x0, y0, cw, ch))
}

/// Bilinear resize of a crop back to `h×w`, half-pixel centres.
fn resize_crop(img: &Tensor, (x0, y0, cw, ch): (usize, usize, usize, usize), h: usize, w: usize) -> Tensor {
    let src_w = img.shape()[1];
    let d = img.data();
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, ch), taps(w, cw));
    let mut out = Vec::with_capacity(h * w * 3);
    for &(ya, yb, fy) in &ty {
        for &(xa, xb, fx) in &tx {
            for c in 0..3 {
                let at = |y: usize, x: usize| d[((y0 + y) * src_w + x0 + x) * 3 + c];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bottom = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[h, w, 3], out).expect("resized shape")
}

fn jitter_factor<R: Rng>(strength: f64, rng: &mut R) -> f64 {
    if strength > 0.0 {
        rng.gen_range(1.0 - strength..=1.0 + strength)
    } else {
        1.0
    }
}

/// Rotates chroma by `angle` radians in YIQ space, keeping luma.
fn rotate_hue(data: &mut [f64], angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for px in data.chunks_exact_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i, q) = (i * cos - q * sin, i * sin + q * cos);
        px[0] = (y + 0.956 * i + 0.621 * q).clamp(0.0, 1.0);
        px[1] = (y - 0.272 * i - 0.647 * q).clamp(0.0, 1.0);
        px[2] = (y - 1.106 * i + 1.703 * q).clamp(0.0, 1.0);
    }
}

/// One augmented, un-normalized view with values in `[0, 1]`.
pub fn augment_view<R: Rng>(img: &Tensor, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let crop = sample_crop(h, w, policy, rng)?;
    let mut out = resize_crop(img, crop, h, w);
    if policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob) {
        let d = out.data_mut();
        for row in d.chunks_exact_mut(w * 3) {
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                }
            }
        }
    }
    let b = jitter_factor(policy.brightness, rng);
    let k = jitter_factor(policy.contrast, rng);
    let s = jitter_factor(policy.saturation, rng);
    if (b, k, s) != (1.0, 1.0, 1.0) {
        let d = out.data_mut();
        d.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        let gray = |p: &[f64]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let mean_gray = d.chunks_exact(3).map(gray).sum::<f64>() / (h * w) as f64;
        d.iter_mut().for_each(|v| *v = ((*v - mean_gray) * k + mean_gray).clamp(0.0, 1.0));
        for px in d.chunks_exact_mut(3) {
            let g = gray(px);
            px.iter_mut().for_each(|v| *v = ((*v - g) * s + g).clamp(0.0, 1.0));
        }
    }
    if policy.hue > 0.0 {
        let turn = rng.gen_range(-policy.hue..=policy.hue) * std::f64::consts::TAU;
        if turn != 0.0 {
            rotate_hue(out.data_mut(), turn);
        }
    }
    if policy.grayscale_prob > 0.0 && rng.gen_bool(policy.grayscale_prob) {
        for px in out.data_mut().chunks_exact_mut(3) {
            let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(g);
        }
    }
    Ok(out)
}

/// Two views drawn one after the other from `rng` with the same policy.
pub fn augment_two_views<R: Rng>(img: &Tensor, policy: &AugmentationPolicy, rng: &mut R) -> Result<TwoViews> {
    let v1_raw = augment_view(img, policy, rng)?;
    let v2_raw = augment_view(img, policy, rng)?;
    Ok(TwoViews {
        v1_norm: policy.normalize(&v1_raw),
        v2_norm: policy.normalize(&v2_raw),
        v1_raw,
    })
}
