//! Turntable image collections, masks, background compositing and the
//! one-shot / leave-sequence-out splits.

mod io;
mod roster;

use std::collections::BTreeMap;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, load_dataset_with, load_images, read_mask, read_rgb, save_dataset, save_images,
    sort_samples, write_png, LoadOptions, ObjectMeta, ViewMeta, META_FILE, ROSTER_FILE,
};
pub use roster::TextureRoster;

use crate::error::{Error, Result};
use crate::raster;

/// Elevations closer than this are treated as the same turntable sequence.
const ELEVATION_TOLERANCE: f64 = 1e-6;

/// Viewing angle of a turntable image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLabel {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

impl PoseLabel {
    /// Azimuth is wrapped into `[0, 360)`; elevation must lie in `[0, 90)`.
    pub fn new(elevation_deg: f64, azimuth_deg: f64) -> Result<Self> {
        if !(0.0..90.0).contains(&elevation_deg) {
            return Err(Error::Validation(format!(
                "elevation {elevation_deg} outside [0, 90)"
            )));
        }
        if !azimuth_deg.is_finite() {
            return Err(Error::Validation(format!(
                "azimuth {azimuth_deg} is not finite"
            )));
        }
        let mut az = azimuth_deg.rem_euclid(360.0);
        if az >= 360.0 {
            az = 0.0;
        }
        Ok(Self {
            elevation_deg,
            azimuth_deg: az,
        })
    }

    fn same_elevation(&self, elevation_deg: f64) -> bool {
        (self.elevation_deg - elevation_deg).abs() < ELEVATION_TOLERANCE
    }
}

/// One observation of an object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: RgbImage,
    pub mask: Option<GrayImage>,
    pub pose: PoseLabel,
    /// Class label within its dataset; `[0, K)`.
    pub instance_id: u32,
    pub category_id: u32,
    pub category: String,
    pub textured: bool,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            if mask.dimensions() != self.pixels.dimensions() {
                return Err(Error::Validation(format!(
                    "mask is {:?} but pixels are {:?}",
                    mask.dimensions(),
                    self.pixels.dimensions()
                )));
            }
        }
        Ok(())
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub num_classes: usize,
}

/// Replace every pixel outside the mask by `fill`.
pub fn apply_mask(sample: &ImageSample, fill: Rgb<u8>) -> Result<ImageSample> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Precondition("apply_mask requires a mask".into()))?;
    sample.validate()?;
    let mut out = sample.clone();
    for (x, y, p) in out.pixels.enumerate_pixels_mut() {
        if !raster::is_foreground(mask.get_pixel(x, y).0[0]) {
            *p = fill;
        }
    }
    Ok(out)
}

/// Paste the masked object onto `background` at a uniformly random, fully
/// in-bounds offset. The result takes the background's dimensions and its
/// mask marks the pasted pixels.
pub fn composite_on_background<R: Rng + ?Sized>(
    sample: &ImageSample,
    background: &RgbImage,
    rng: &mut R,
) -> Result<ImageSample> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Precondition("compositing requires a mask".into()))?;
    sample.validate()?;
    let (x0, y0, x1, y1) = raster::mask_bbox(mask)
        .ok_or_else(|| Error::Degenerate("mask has no foreground pixels".into()))?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let (gw, gh) = background.dimensions();
    if gw < bw || gh < bh {
        return Err(Error::Size(format!(
            "background {gw}x{gh} smaller than object extent {bw}x{bh}"
        )));
    }
    let ox = rng.random_range(0..=gw - bw);
    let oy = rng.random_range(0..=gh - bh);

    let mut pixels = background.clone();
    let mut out_mask = GrayImage::new(gw, gh);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if raster::is_foreground(mask.get_pixel(x, y).0[0]) {
                let (tx, ty) = (ox + x - x0, oy + y - y0);
                pixels.put_pixel(tx, ty, *sample.pixels.get_pixel(x, y));
                out_mask.put_pixel(tx, ty, Luma([255]));
            }
        }
    }
    Ok(ImageSample {
        pixels,
        mask: Some(out_mask),
        ..sample.clone()
    })
}

/// Indices picked by [`subsample_views`]: `floor(k * len / count)`.
pub fn subsample_indices(len: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > len {
        return Err(Error::invalid(format!(
            "view count {count} outside [1, {len}]"
        )));
    }
    Ok((0..count).map(|k| (k * len / count).min(len - 1)).collect())
}

/// Evenly sample `count` views starting from the first one.
pub fn subsample_views(views: &[ImageSample], count: usize) -> Result<Vec<ImageSample>> {
    Ok(subsample_indices(views.len(), count)?
        .into_iter()
        .map(|i| views[i].clone())
        .collect())
}

fn group_by_instance(samples: &[ImageSample]) -> BTreeMap<u32, Vec<&ImageSample>> {
    let mut map: BTreeMap<u32, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.instance_id).or_default().push(s);
    }
    map
}

/// One training view per instance (smallest azimuth at `train_elevation`);
/// every view at `test_elevation` is a query.
pub fn make_one_shot_split(
    samples: &[ImageSample],
    train_elevation: f64,
    test_elevation: f64,
) -> Result<DatasetSplit> {
    let groups = group_by_instance(samples);
    let mut train = Vec::with_capacity(groups.len());
    let mut test = Vec::new();
    for (id, views) in &groups {
        let gallery = views
            .iter()
            .filter(|s| s.pose.same_elevation(train_elevation))
            .min_by(|a, b| a.pose.azimuth_deg.total_cmp(&b.pose.azimuth_deg))
            .ok_or_else(|| {
                Error::Split(format!(
                    "instance {id} has no view at {train_elevation} deg elevation"
                ))
            })?;
        let queries: Vec<&ImageSample> = views
            .iter()
            .copied()
            .filter(|s| s.pose.same_elevation(test_elevation) && !std::ptr::eq(*s, *gallery))
            .collect();
        if queries.is_empty() {
            return Err(Error::Split(format!(
                "instance {id} has no view at {test_elevation} deg elevation"
            )));
        }
        train.push((*gallery).clone());
        test.extend(queries.into_iter().cloned());
    }
    Ok(DatasetSplit {
        num_classes: groups.len(),
        train,
        test,
    })
}

pub const LEAVE_OUT_TRAIN_ELEVATIONS: [f64; 2] = [30.0, 60.0];
pub const LEAVE_OUT_TEST_ELEVATION: f64 = 45.0;

/// Train on every view at 30 and 60 degrees, test on the 45 degree sequence.
pub fn make_leave_sequence_out_split(samples: &[ImageSample]) -> Result<DatasetSplit> {
    let groups = group_by_instance(samples);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, views) in &groups {
        for elev in LEAVE_OUT_TRAIN_ELEVATIONS
            .iter()
            .chain([LEAVE_OUT_TEST_ELEVATION].iter())
        {
            if !views.iter().any(|s| s.pose.same_elevation(*elev)) {
                return Err(Error::Split(format!(
                    "instance {id} has no view at {elev} deg elevation"
                )));
            }
        }
        for s in views {
            if LEAVE_OUT_TRAIN_ELEVATIONS
                .iter()
                .any(|e| s.pose.same_elevation(*e))
            {
                train.push((*s).clone());
            } else if s.pose.same_elevation(LEAVE_OUT_TEST_ELEVATION) {
                test.push((*s).clone());
            }
        }
    }
    Ok(DatasetSplit {
        num_classes: groups.len(),
        train,
        test,
    })
}
