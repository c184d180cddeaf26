//! Paired view generation. Teacher and student views share one sampled
//! crop box and flip flag, so token `n` covers the same image region in both
//! networks; photometric jitter is applied to the student view only.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorBuf;

/// Aspect-ratio range for random resized crops.
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;
// ITU-R 601 luma weights
const GRAY: [f64; 3] = [0.2989, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.2,
            scale_max: 1.0,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} strength {s} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn strengths(&self) -> JitterStrengths {
        JitterStrengths {
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Integer crop box in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
}

/// Factors actually applied, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub order: Vec<JitterOp>,
}

impl JitterFactors {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            order: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub crop: CropBox,
    pub flipped: bool,
    /// Jitter of the student view; the teacher view is never jittered.
    pub student_jitter: JitterFactors,
}

impl TransformRecord {
    /// Recomputes the (unjittered) geometric view from the source image.
    pub fn apply_geometry(&self, image: &TensorBuf, out_size: usize) -> Result<TensorBuf> {
        let cropped = resize_crop(image, self.crop, out_size)?;
        Ok(horizontal_flip(&cropped, self.flipped))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub teacher_view: TensorBuf,
    pub student_view: TensorBuf,
    pub record: TransformRecord,
}

fn dims(image: &TensorBuf) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Shape(format!("expected C×H×W image, got {s:?}"))),
    }
}

/// Samples a crop box with area fraction in `scale` and aspect ratio
/// log-uniform in `ratio`; after ten rejected draws falls back to a
/// centered crop with the closest admissible aspect ratio.
pub fn sample_crop_box(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> CropBox {
    let area = (h * w) as f64;
    let log_ratio = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_ratio.0..=log_ratio.1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, (h as f64 * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    CropBox {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of `crop` to `out × out` with half-pixel centers
/// (corner alignment off): the source coordinate of output index `i` is
/// `(i + 0.5) · in / out − 0.5`, clamped to `[0, in − 1]`.
pub fn resize_crop(image: &TensorBuf, crop: CropBox, out: usize) -> Result<TensorBuf> {
    let (c, h, w) = dims(image)?;
    if crop.height == 0
        || crop.width == 0
        || crop.top + crop.height > h
        || crop.left + crop.width > w
        || out == 0
    {
        return Err(Error::InvalidArgument(format!(
            "crop {crop:?} outside {h}×{w} image"
        )));
    }
    let axis = |in_len: usize| -> Vec<(usize, usize, f64)> {
        let s = in_len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(crop.height);
    let xs = axis(crop.width);
    let src = image.data();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |y: usize, x: usize| plane[(crop.top + y) * w + crop.left + x];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * wx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * wx;
                data.push((top + (bot - top) * wy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(TensorBuf::from_parts(vec![c, out, out], data))
}

/// Crop with area fraction in `scale_range` and aspect in `[3/4, 4/3]`,
/// resized bilinearly to `out_size × out_size`.
pub fn random_resized_crop(
    image: &TensorBuf,
    rng: &mut impl Rng,
    scale_range: (f64, f64),
    out_size: usize,
) -> Result<(TensorBuf, CropBox)> {
    random_resized_crop_with_ratio(image, rng, scale_range, CROP_RATIO, out_size)
}

pub fn random_resized_crop_with_ratio(
    image: &TensorBuf,
    rng: &mut impl Rng,
    scale_range: (f64, f64),
    ratio: (f64, f64),
    out_size: usize,
) -> Result<(TensorBuf, CropBox)> {
    let (_, h, w) = dims(image)?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "source image {h}×{w} is smaller than 2×2"
        )));
    }
    if !(0.0 < scale_range.0 && scale_range.0 <= scale_range.1 && scale_range.1 <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale range {scale_range:?} invalid"
        )));
    }
    let crop = sample_crop_box(h, w, scale_range, ratio, rng);
    Ok((resize_crop(image, crop, out_size)?, crop))
}

/// Reverses the width axis when `flag` is set.
pub fn horizontal_flip(image: &TensorBuf, flag: bool) -> TensorBuf {
    if !flag {
        return image.clone();
    }
    let w = image.shape()[image.ndim() - 1];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    TensorBuf::from_parts(image.shape().to_vec(), data)
}

fn gray(data: &[f64], plane: usize, k: usize) -> f64 {
    GRAY[0] * data[k] + GRAY[1] * data[plane + k] + GRAY[2] * data[2 * plane + k]
}

/// Applies recorded jitter factors in their recorded order, clamping to
/// `[0, 1]` after each operation.
pub fn apply_jitter(image: &TensorBuf, factors: &JitterFactors) -> Result<TensorBuf> {
    let (c, h, w) = dims(image)?;
    if c != 3 {
        return Err(Error::Shape(format!("color jitter needs RGB, got {c} channels")));
    }
    let plane = h * w;
    let mut data = image.data().to_vec();
    for op in &factors.order {
        match op {
            JitterOp::Brightness => {
                let b = factors.brightness;
                for v in &mut data {
                    *v = (*v * b).clamp(0.0, 1.0);
                }
            }
            JitterOp::Contrast => {
                let f = factors.contrast;
                let mean = (0..plane).map(|k| gray(&data, plane, k)).sum::<f64>() / plane as f64;
                for v in &mut data {
                    *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0);
                }
            }
            JitterOp::Saturation => {
                let f = factors.saturation;
                for k in 0..plane {
                    let g = gray(&data, plane, k);
                    for ch in 0..3 {
                        let v = &mut data[ch * plane + k];
                        *v = (f * *v + (1.0 - f) * g).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(TensorBuf::from_parts(image.shape().to_vec(), data))
}

/// Brightness, contrast and saturation scaling with factors drawn from
/// `[max(0, 1 − s), 1 + s]`, applied in a random order. Zero strengths are
/// skipped entirely and record a factor of exactly 1.
pub fn color_jitter(
    image: &TensorBuf,
    rng: &mut impl Rng,
    strengths: JitterStrengths,
) -> Result<(TensorBuf, JitterFactors)> {
    let mut ops = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation];
    ops.shuffle(rng);
    let mut factors = JitterFactors::identity();
    for op in ops {
        let s = match op {
            JitterOp::Brightness => strengths.brightness,
            JitterOp::Contrast => strengths.contrast,
            JitterOp::Saturation => strengths.saturation,
        };
        if s <= 0.0 {
            continue;
        }
        let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s);
        match op {
            JitterOp::Brightness => factors.brightness = f,
            JitterOp::Contrast => factors.contrast = f,
            JitterOp::Saturation => factors.saturation = f,
        }
        factors.order.push(op);
    }
    Ok((apply_jitter(image, &factors)?, factors))
}

/// One shared geometric transform for both views, jitter on the student view only.
pub fn make_views(image: &TensorBuf, rng: &mut impl Rng, config: &AugmentConfig) -> Result<ViewPair> {
    config.validate()?;
    let (_, h, _) = dims(image)?;
    let (cropped, crop) = random_resized_crop(image, rng, (config.scale_min, config.scale_max), h)?;
    let flipped = rng.random_bool(config.flip_prob);
    let teacher_view = horizontal_flip(&cropped, flipped);
    let (student_view, student_jitter) = color_jitter(&teacher_view, rng, config.strengths())?;
    Ok(ViewPair {
        teacher_view,
        student_view,
        record: TransformRecord {
            crop,
            flipped,
            student_jitter,
        },
    })
}
