//! Small raster utilities shared by augmentation, compositing and evaluation.

use image::{GrayImage, Luma, Rgb, RgbImage};

/// Foreground test for binary masks stored as 8-bit rasters.
#[inline]
pub fn is_foreground(v: u8) -> bool {
    v > 127
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample of an RGB raster at a real-valued location.
///
/// Returns `None` when the location lies outside `[0, w-1] x [0, h-1]`.
/// Integer locations return the stored pixel exactly.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = img.dimensions();
    let (x0, fx) = split_coord(x, w)?;
    let (y0, fy) = split_coord(y, h)?;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let p00 = img.get_pixel(x0, y0).0;
    let p10 = img.get_pixel(x1, y0).0;
    let p01 = img.get_pixel(x0, y1).0;
    let p11 = img.get_pixel(x1, y1).0;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Bilinear sample of a single-channel raster.
pub fn sample_bilinear_gray(img: &GrayImage, x: f64, y: f64) -> Option<f64> {
    let (w, h) = img.dimensions();
    let (x0, fx) = split_coord(x, w)?;
    let (y0, fy) = split_coord(y, h)?;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let g = |x, y| img.get_pixel(x, y).0[0] as f64;
    let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
    let bottom = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

// Splits a coordinate into an integer cell and fractional offset, tolerating
// tiny excursions past the last pixel center.
fn split_coord(v: f64, len: u32) -> Option<(u32, f64)> {
    const EPS: f64 = 1e-9;
    if !v.is_finite() || len == 0 {
        return None;
    }
    let max = (len - 1) as f64;
    if v < -EPS || v > max + EPS {
        return None;
    }
    let v = v.clamp(0.0, max);
    let base = v.floor();
    let frac = v - base;
    let mut i = base as u32;
    if i >= len - 1 {
        i = len - 1;
        return Some((i, 0.0));
    }
    Some((i, frac))
}

/// Resize a region of `img` to `out_w x out_h` with bilinear sampling.
///
/// The region is `[x, x + w) x [y, y + h)` in pixel units; samples are taken
/// at output pixel centers mapped into the region and clamped to the image.
pub fn crop_resize(
    img: &RgbImage,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    out_w: u32,
    out_h: u32,
) -> RgbImage {
    let (iw, ih) = img.dimensions();
    let max_x = iw.saturating_sub(1) as f64;
    let max_y = ih.saturating_sub(1) as f64;
    RgbImage::from_fn(out_w, out_h, |ox, oy| {
        let sx = x + (ox as f64 + 0.5) * w / out_w as f64 - 0.5;
        let sy = y + (oy as f64 + 0.5) * h / out_h as f64 - 0.5;
        let p =
            sample_bilinear(img, sx.clamp(0.0, max_x), sy.clamp(0.0, max_y)).unwrap_or([0.0; 3]);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

/// Mask counterpart of [`crop_resize`]; output is re-binarized at 50%.
pub fn crop_resize_mask(
    mask: &GrayImage,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    out_w: u32,
    out_h: u32,
) -> GrayImage {
    let (iw, ih) = mask.dimensions();
    let max_x = iw.saturating_sub(1) as f64;
    let max_y = ih.saturating_sub(1) as f64;
    GrayImage::from_fn(out_w, out_h, |ox, oy| {
        let sx = x + (ox as f64 + 0.5) * w / out_w as f64 - 0.5;
        let sy = y + (oy as f64 + 0.5) * h / out_h as f64 - 0.5;
        let v =
            sample_bilinear_gray(mask, sx.clamp(0.0, max_x), sy.clamp(0.0, max_y)).unwrap_or(0.0);
        Luma([if v >= 127.5 { 255 } else { 0 }])
    })
}

pub fn resize(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    if img.dimensions() == (out_w, out_h) {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    crop_resize(img, 0.0, 0.0, w as f64, h as f64, out_w, out_h)
}

/// Tight bounding box `(x0, y0, x1, y1)` (inclusive) of the foreground.
pub fn mask_bbox(mask: &GrayImage) -> Option<(u32, u32, u32, u32)> {
    let mut bbox: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in mask.enumerate_pixels() {
        if is_foreground(p.0[0]) {
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    bbox
}

pub fn foreground_count(mask: &GrayImage) -> usize {
    mask.pixels().filter(|p| is_foreground(p.0[0])).count()
}

/// Channel-major `[c][y][x]` floats in `[0, 1]`.
pub fn to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Rec. 601 luma in `[0, 1]`, row-major.
pub fn to_gray(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64) / 255.0)
        .collect()
}
