//! Training-time image transformations: crops, flips, lighting and
//! perspective warps that simulate viewing a planar surface from a new angle.

mod homography;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use homography::{cross, has_collinear_triple, Homography, MIN_ABS_DET};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::raster;

pub const DEFAULT_PERSPECTIVE_MAGNITUDE: f64 = 0.08;
const WARP_RETRIES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Area fraction kept by the random crop; 1 disables cropping.
    pub crop_fraction: f64,
    pub horizontal_flip: bool,
    /// Per-channel multiplicative range `[lo, hi]`.
    pub lighting_jitter: (f64, f64),
    /// Corner jitter as a fraction of `min(w, h)`; 0 disables warping.
    pub perspective_magnitude: f64,
    pub fill: [u8; 3],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            crop_fraction: 1.0,
            horizontal_flip: false,
            lighting_jitter: (1.0, 1.0),
            perspective_magnitude: 0.0,
            fill: [0, 0, 0],
        }
    }

    /// Crops, flips and lighting changes.
    pub fn standard() -> Self {
        Self {
            crop_fraction: 0.85,
            horizontal_flip: true,
            lighting_jitter: (0.8, 1.2),
            ..Self::identity()
        }
    }

    pub fn with_perspective(mut self, magnitude: f64) -> Self {
        self.perspective_magnitude = magnitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop_fraction {} outside (0, 1]",
                self.crop_fraction
            )));
        }
        let (lo, hi) = self.lighting_jitter;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "lighting range ({lo}, {hi}) is not ordered"
            )));
        }
        if !(self.perspective_magnitude >= 0.0 && self.perspective_magnitude.is_finite()) {
            return Err(Error::Config(format!(
                "perspective magnitude {} must be >= 0",
                self.perspective_magnitude
            )));
        }
        Ok(())
    }
}

fn image_corners(width: u32, height: u32) -> [(f64, f64); 4] {
    let (w, h) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Random homography moving each image corner by an independent uniform
/// offset of at most `magnitude * min(w, h)` per axis.
pub fn sample_perspective_warp<R: Rng + ?Sized>(
    rng: &mut R,
    magnitude: f64,
    width: u32,
    height: u32,
) -> Result<Homography> {
    Ok(sample_perspective_warp_with_corners(rng, magnitude, width, height)?.0)
}

/// Like [`sample_perspective_warp`], also returning the jittered corners.
pub fn sample_perspective_warp_with_corners<R: Rng + ?Sized>(
    rng: &mut R,
    magnitude: f64,
    width: u32,
    height: u32,
) -> Result<(Homography, [(f64, f64); 4])> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::invalid(format!(
            "warp magnitude {magnitude} must be >= 0"
        )));
    }
    let src = image_corners(width, height);
    if magnitude == 0.0 {
        return Ok((Homography::identity(), src));
    }
    let reach = magnitude * width.min(height) as f64;
    for _ in 0..WARP_RETRIES {
        let mut dst = src;
        for p in &mut dst {
            p.0 += rng.random_range(-reach..=reach);
            p.1 += rng.random_range(-reach..=reach);
        }
        if has_collinear_triple(&dst) {
            continue;
        }
        if let Ok(h) = Homography::from_four_points(&src, &dst) {
            return Ok((h, dst));
        }
    }
    Err(Error::Degenerate(format!(
        "no non-degenerate warp after {WARP_RETRIES} draws at magnitude {magnitude}"
    )))
}

/// Inverse-map every output pixel through `h` and sample bilinearly.
pub fn warp_image(image: &RgbImage, h: &Homography, fill: Rgb<u8>) -> Result<RgbImage> {
    let inv = h.inverse()?;
    let (w, hgt) = image.dimensions();
    Ok(RgbImage::from_fn(w, hgt, |x, y| {
        inv.apply(x as f64, y as f64)
            .and_then(|(sx, sy)| raster::sample_bilinear(image, sx, sy))
            .map(|p| Rgb([round_u8(p[0]), round_u8(p[1]), round_u8(p[2])]))
            .unwrap_or(fill)
    }))
}

fn warp_mask(mask: &GrayImage, h: &Homography) -> Result<GrayImage> {
    let inv = h.inverse()?;
    let (w, hgt) = mask.dimensions();
    Ok(GrayImage::from_fn(w, hgt, |x, y| {
        let v = inv
            .apply(x as f64, y as f64)
            .and_then(|(sx, sy)| raster::sample_bilinear_gray(mask, sx, sy))
            .unwrap_or(0.0);
        Luma([if v >= 127.5 { 255 } else { 0 }])
    }))
}

#[inline]
fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Random crop covering `fraction` of the area, resized back to full size.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &ImageSample,
    fraction: f64,
    rng: &mut R,
) -> ImageSample {
    if fraction >= 1.0 {
        return sample.clone();
    }
    let (w, h) = sample.dimensions();
    let side = fraction.sqrt();
    let cw = ((w as f64 * side).round() as u32).clamp(1, w);
    let ch = ((h as f64 * side).round() as u32).clamp(1, h);
    let x = rng.random_range(0..=w - cw) as f64;
    let y = rng.random_range(0..=h - ch) as f64;
    let mut out = sample.clone();
    out.pixels = raster::crop_resize(&sample.pixels, x, y, cw as f64, ch as f64, w, h);
    out.mask = sample
        .mask
        .as_ref()
        .map(|m| raster::crop_resize_mask(m, x, y, cw as f64, ch as f64, w, h));
    out
}

pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    let mut out = sample.clone();
    out.pixels = image::imageops::flip_horizontal(&sample.pixels);
    out.mask = sample.mask.as_ref().map(image::imageops::flip_horizontal);
    out
}

pub fn scale_channels(sample: &ImageSample, scale: [f64; 3]) -> ImageSample {
    let mut out = sample.clone();
    for p in out.pixels.pixels_mut() {
        for c in 0..3 {
            p.0[c] = round_u8(p.0[c] as f64 * scale[c]);
        }
    }
    out
}

/// Crop, flip, lighting, then perspective warp. Labels and pose pass through.
pub fn augment<R: Rng + ?Sized>(
    sample: &ImageSample,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ImageSample> {
    let (w, h) = sample.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    let mut out = random_crop(sample, policy.crop_fraction, rng);
    if policy.horizontal_flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    let (lo, hi) = policy.lighting_jitter;
    if lo != 1.0 || hi != 1.0 {
        let mut s = [1.0; 3];
        for v in &mut s {
            *v = if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            };
        }
        out = scale_channels(&out, s);
    }
    if policy.perspective_magnitude > 0.0 {
        let hom = sample_perspective_warp(rng, policy.perspective_magnitude, w, h)?;
        out.pixels = warp_image(&out.pixels, &hom, Rgb(policy.fill))?;
        if let Some(m) = &out.mask {
            out.mask = Some(warp_mask(m, &hom)?);
        }
    }
    Ok(out)
}
