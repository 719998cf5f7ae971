//! Training-time augmentation of images and wrenches. Labels are never touched.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collector::Sample;
use crate::error::RegressorError;
use crate::seed::SimRng;
use crate::sensors::{ImageTensor, WrenchReading};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Color transforms plus translation and cropping.
    pub visual: bool,
    /// Random scaling of the wrench.
    pub wrench: bool,
    /// Half-ranges of the uniform HSV noise (hue wraps modulo 1).
    pub jitter_ranges: [f32; 3],
    /// Standard deviation of the random 3×3 convolution taps.
    pub randconv_std: f32,
    pub pad: usize,
    pub crop_min_fraction: f64,
    /// Probabilities of (jitter, gray, random convolution).
    pub color_mode_probs: [f64; 3],
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            visual: true,
            wrench: true,
            jitter_ranges: [0.05, 0.2, 0.2],
            randconv_std: 1.0 / 3.0,
            pad: 8,
            crop_min_fraction: 0.8,
            color_mode_probs: [0.4, 0.4, 0.2],
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            visual: false,
            wrench: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegressorError> {
        let p = self.color_mode_probs;
        if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(RegressorError::InvalidConfig("color_mode_probs must sum to 1".into()));
        }
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0) {
            return Err(RegressorError::InvalidConfig("crop_min_fraction must be in (0, 1]".into()));
        }
        if self.jitter_ranges.iter().any(|v| !(*v >= 0.0)) || !(self.randconv_std >= 0.0) {
            return Err(RegressorError::InvalidConfig("augmentation ranges must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorMode {
    Jitter,
    Gray,
    RandConv,
}

/// 3×3 convolution taps indexed `[out][in][ky][kx]`.
pub type ConvKernel = [f32; 81];

pub fn identity_kernel() -> ConvKernel {
    let mut k = [0.0; 81];
    for c in 0..3 {
        k[c * 27 + c * 9 + 4] = 1.0;
    }
    k
}

pub fn random_kernel(std: f32, rng: &mut SimRng) -> ConvKernel {
    let mut k = [0.0; 81];
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("finite std");
        for v in &mut k {
            *v = n.sample(rng);
        }
    }
    k
}

/// Applies `kernel` with replicated borders and min-max renormalizes the
/// result to `[0, 1]` over the whole image.
pub fn convolve_normalized(img: &ImageTensor, kernel: &ConvKernel) -> ImageTensor {
    assert_eq!(img.channels, 3, "convolution expects RGB");
    let (h, w) = (img.height, img.width);
    let mut out = ImageTensor::zeros(h, w, 3);
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0f32; 3];
            for ky in 0..3 {
                let y = (i + ky).saturating_sub(1).min(h - 1);
                for kx in 0..3 {
                    let x = (j + kx).saturating_sub(1).min(w - 1);
                    let px = &img.data[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    for (o, a) in acc.iter_mut().enumerate() {
                        let base = o * 27 + ky * 3 + kx;
                        *a += kernel[base] * px[0] + kernel[base + 9] * px[1] + kernel[base + 18] * px[2];
                    }
                }
            }
            let k = (i * w + j) * 3;
            out.data[k..k + 3].copy_from_slice(&acc);
        }
    }
    let (lo, hi) = out
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in &mut out.data {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
    out
}

pub fn random_convolution(img: &ImageTensor, std: f32, rng: &mut SimRng) -> ImageTensor {
    convolve_normalized(img, &random_kernel(std, rng))
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max > 0.0 { d / max } else { 0.0 };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

/// Shifts hue (wrapping), saturation and value of every pixel by the same
/// offsets `(dh, ds, dv)`.
pub fn shift_hsv(img: &ImageTensor, dh: f32, ds: f32, dv: f32) -> ImageTensor {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb([(h + dh).rem_euclid(1.0), (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)]);
        px.copy_from_slice(&rgb);
    }
    out
}

fn sym(rng: &mut SimRng, half: f32) -> f32 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

pub fn color_jitter(img: &ImageTensor, ranges: [f32; 3], rng: &mut SimRng) -> ImageTensor {
    let dh = sym(rng, ranges[0]);
    let ds = sym(rng, ranges[1]);
    let dv = sym(rng, ranges[2]);
    shift_hsv(img, dh, ds, dv)
}

pub fn gray_scale(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(y.clamp(0.0, 1.0));
    }
    out
}

/// Geometry of one translate-and-crop draw, in padded-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// Where the image is embedded inside the zero frame.
    pub embed: (usize, usize),
    /// Top-left corner and size of the crop.
    pub origin: (usize, usize),
    pub size: (usize, usize),
}

impl CropWindow {
    pub fn draw(h: usize, w: usize, pad: usize, min_fraction: f64, rng: &mut SimRng) -> Self {
        let embed = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
        let s = if min_fraction < 1.0 {
            rng.random_range(min_fraction..=1.0)
        } else {
            1.0
        };
        let size = (
            ((s * h as f64).round() as usize).clamp(1, h),
            ((s * w as f64).round() as usize).clamp(1, w),
        );
        let origin = (
            rng.random_range(0..=h + 2 * pad - size.0),
            rng.random_range(0..=w + 2 * pad - size.1),
        );
        CropWindow { embed, origin, size }
    }
}

pub fn apply_crop(img: &ImageTensor, win: &CropWindow) -> ImageTensor {
    let (h, w, c) = img.dims();
    let mut out = ImageTensor::zeros(h, w, c);
    for i in 0..h {
        // padded-frame row, then back to the source image
        let fy = win.origin.0 + i * win.size.0 / h;
        let Some(sy) = fy.checked_sub(win.embed.0).filter(|y| *y < h) else {
            continue;
        };
        for j in 0..w {
            let fx = win.origin.1 + j * win.size.1 / w;
            let Some(sx) = fx.checked_sub(win.embed.1).filter(|x| *x < w) else {
                continue;
            };
            let (d, s) = ((i * w + j) * c, (sy * w + sx) * c);
            out.data[d..d + c].copy_from_slice(&img.data[s..s + c]);
        }
    }
    out
}

/// Random translation inside a zero frame of `pad` pixels, then a random
/// crop resized back with nearest neighbor.
pub fn translate_and_crop(img: &ImageTensor, pad: usize, min_fraction: f64, rng: &mut SimRng) -> ImageTensor {
    let win = CropWindow::draw(img.height, img.width, pad, min_fraction, rng);
    apply_crop(img, &win)
}

pub fn augment_wrench(w: &WrenchReading, rng: &mut SimRng) -> WrenchReading {
    let alpha: f64 = rng.random_range(0.0..=1.0);
    w.scaled(alpha)
}

pub fn pick_color_mode(probs: [f64; 3], rng: &mut SimRng) -> ColorMode {
    let u: f64 = rng.random();
    if u < probs[0] {
        ColorMode::Jitter
    } else if u < probs[0] + probs[1] {
        ColorMode::Gray
    } else {
        ColorMode::RandConv
    }
}

/// Full pipeline on one sample. Returns the color mode used (None when
/// visual augmentation is off).
pub fn augment_sample_traced(s: &Sample, cfg: &AugmentConfig, rng: &mut SimRng) -> (Sample, Option<ColorMode>) {
    let mut out = s.clone();
    let mut mode = None;
    if cfg.visual {
        let m = pick_color_mode(cfg.color_mode_probs, rng);
        let colored = match m {
            ColorMode::Jitter => color_jitter(&s.image, cfg.jitter_ranges, rng),
            ColorMode::Gray => gray_scale(&s.image),
            ColorMode::RandConv => random_convolution(&s.image, cfg.randconv_std, rng),
        };
        out.image = translate_and_crop(&colored, cfg.pad, cfg.crop_min_fraction, rng);
        mode = Some(m);
    }
    if cfg.wrench {
        out.wrench = augment_wrench(&s.wrench, rng);
    }
    (out, mode)
}

pub fn augment_sample(s: &Sample, cfg: &AugmentConfig, rng: &mut SimRng) -> Sample {
    augment_sample_traced(s, cfg, rng).0
}
