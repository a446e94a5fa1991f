//! Built-in corner detector, gradient-orientation descriptor and Lowe-style
//! ratio-test matching.
//!
//! The detector is a Harris corner response with non-maximum suppression.
//! The descriptor is a 4x4 grid of 8-bin orientation histograms (128
//! dimensions), which is enough to exercise ratio-test and geometric
//! verification the way SIFT-class pipelines use them.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::augment::Homography;
use crate::error::{Error, Result};
use crate::raster;

pub const DESCRIPTOR_CELLS: usize = 4;
pub const ORIENTATION_BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_CELLS * DESCRIPTOR_CELLS * ORIENTATION_BINS;
pub const DEFAULT_PATCH_RADIUS: u32 = 8;

const HARRIS_K: f64 = 0.04;
/// Absolute response floor (intensities in `[0, 1]`).
const HARRIS_MIN_RESPONSE: f64 = 1e-6;
const HARRIS_RELATIVE: f64 = 0.01;
const NMS_RADIUS: i64 = 2;
const KEYPOINT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub keypoint: Keypoint,
    /// L2-normalized, length [`DESCRIPTOR_LEN`].
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
    pub second_distance: f64,
}

/// Correspondences plus the two filtering stages applied to them.
/// `ratio_survivors` and `inliers` index into `pairs`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub ratio_survivors: Vec<usize>,
    pub inliers: Vec<usize>,
    pub model: Option<Homography>,
}

impl MatchSet {
    /// `inliers ⊆ ratio_survivors ⊆ pairs` and `distance <= second_distance`.
    pub fn check_invariants(&self) -> bool {
        let in_pairs = self.ratio_survivors.iter().all(|&i| i < self.pairs.len());
        let in_survivors = self
            .inliers
            .iter()
            .all(|i| self.ratio_survivors.contains(i));
        let ordered = self.pairs.iter().all(|p| p.distance <= p.second_distance);
        in_pairs && in_survivors && ordered
    }
}

struct GrayField {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl GrayField {
    fn new(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            w: w as usize,
            h: h as usize,
            v: raster::to_gray(img),
        }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    /// Central differences.
    #[inline]
    fn gradient(&self, x: i64, y: i64) -> (f64, f64) {
        (
            self.at(x + 1, y) - self.at(x - 1, y),
            self.at(x, y + 1) - self.at(x, y - 1),
        )
    }
}

fn gaussian_blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    // sigma = 1, radius 2
    const K: [f64; 5] = [
        0.054_488_684_549_642_32,
        0.244_201_342_003_233_6,
        0.402_619_946_894_247_5,
        0.244_201_342_003_233_6,
        0.054_488_684_549_642_32,
    ];
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in K.iter().enumerate() {
                let sx = (x as i64 + i as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += k * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in K.iter().enumerate() {
                let sy = (y as i64 + i as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Harris corners, non-maximum suppressed, strongest first.
pub fn detect_keypoints(image: &RgbImage, max_count: usize) -> Vec<Keypoint> {
    let g = GrayField::new(image);
    let (w, h) = (g.w, g.h);
    if w < 3 || h < 3 || max_count == 0 {
        return Vec::new();
    }
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            // Sobel
            let (xi, yi) = (x as i64, y as i64);
            let gx = (g.at(xi + 1, yi - 1) + 2.0 * g.at(xi + 1, yi) + g.at(xi + 1, yi + 1))
                - (g.at(xi - 1, yi - 1) + 2.0 * g.at(xi - 1, yi) + g.at(xi - 1, yi + 1));
            let gy = (g.at(xi - 1, yi + 1) + 2.0 * g.at(xi, yi + 1) + g.at(xi + 1, yi + 1))
                - (g.at(xi - 1, yi - 1) + 2.0 * g.at(xi, yi - 1) + g.at(xi + 1, yi - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (
        gaussian_blur(&ixx, w, h),
        gaussian_blur(&iyy, w, h),
        gaussian_blur(&ixy, w, h),
    );
    let response: Vec<f64> = (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * tr * tr
        })
        .collect();
    let max_r = response.iter().cloned().fold(0.0, f64::max);
    let threshold = HARRIS_MIN_RESPONSE.max(HARRIS_RELATIVE * max_r);

    let mut out = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = response[y * w + x];
            if r <= threshold {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dy in -NMS_RADIUS..=NMS_RADIUS {
                for dx in -NMS_RADIUS..=NMS_RADIUS {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nr = response[ny as usize * w + nx as usize];
                    // plateaus keep their first pixel in raster order
                    let earlier = (dy, dx) < (0, 0);
                    if nr > r || (earlier && nr == r) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                out.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    score: r,
                    scale: KEYPOINT_SCALE,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    out.truncate(max_count);
    out
}

/// Octant of a nonzero vector, computed with sign tests only so that a
/// quarter-turn of the vector shifts the bin by exactly two.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let (mut x, mut y) = (gx, gy);
    let mut quadrant = 0;
    // rotate by -90 degrees until the vector sits in [0, 90)
    while !(x > 0.0 && y >= 0.0) {
        let (nx, ny) = (y, -x);
        x = nx;
        y = ny;
        quadrant += 1;
    }
    2 * quadrant + usize::from(y >= x)
}

/// Orientation-histogram descriptors for keypoints far enough from the
/// border; the patch spans offsets `[-r, r-1]` on both axes.
pub fn describe_keypoints(
    image: &RgbImage,
    keypoints: &[Keypoint],
    patch_radius: u32,
) -> Vec<Descriptor> {
    let g = GrayField::new(image);
    let r = patch_radius.max(2) as i64;
    let side = 2 * r;
    let mut out = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        let (cx, cy) = (kp.x.round() as i64, kp.y.round() as i64);
        if cx - r - 1 < 0 || cy - r - 1 < 0 || cx + r > g.w as i64 - 1 || cy + r > g.h as i64 - 1 {
            continue;
        }
        let mut v = vec![0.0; DESCRIPTOR_LEN];
        for dy in -r..r {
            for dx in -r..r {
                let (gx, gy) = g.gradient(cx + dx, cy + dy);
                if gx == 0.0 && gy == 0.0 {
                    continue;
                }
                let mag = (gx * gx + gy * gy).sqrt();
                let cell_x = ((dx + r) * DESCRIPTOR_CELLS as i64 / side) as usize;
                let cell_y = ((dy + r) * DESCRIPTOR_CELLS as i64 / side) as usize;
                let bin = orientation_bin(gx, gy);
                v[(cell_y * DESCRIPTOR_CELLS + cell_x) * ORIENTATION_BINS + bin] += mag;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= 0.0 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(Descriptor {
            keypoint: *kp,
            vector: v,
        });
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest and second-nearest neighbor in `desc_b` for every entry of
/// `desc_a`; a pair survives when `distance / second_distance < ratio`.
/// `ratio == 1` keeps every pair.
pub fn match_ratio_test(desc_a: &[Vec<f64>], desc_b: &[Vec<f64>], ratio: f64) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} outside (0, 1]")));
    }
    if desc_b.len() < 2 {
        return Err(Error::invalid(format!(
            "ratio test needs >= 2 gallery descriptors, got {}",
            desc_b.len()
        )));
    }
    let mut set = MatchSet::default();
    for (ia, a) in desc_a.iter().enumerate() {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (ib, b) in desc_b.iter().enumerate() {
            if b.len() != a.len() {
                return Err(Error::Dimension(format!(
                    "descriptor lengths {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
            let d = euclidean(a, b);
            if d < best.1 {
                second = best.1;
                best = (ib, d);
            } else if d < second {
                second = d;
            }
        }
        let keep = if ratio >= 1.0 {
            true
        } else if second > 0.0 {
            best.1 / second < ratio
        } else {
            false
        };
        if keep {
            set.ratio_survivors.push(set.pairs.len());
        }
        set.pairs.push(MatchPair {
            index_a: ia,
            index_b: best.0,
            distance: best.1,
            second_distance: second,
        });
    }
    Ok(set)
}
