//! On-disk layout: `root/<instance_name>/meta.json` plus PNG rasters.
//!
//! ```json
//! { "instance_id": 0, "category": "cereal_box",
//!   "views": [ { "file": "v000.png", "elevation_deg": 30, "azimuth_deg": 0,
//!                "mask_file": "m000.png" } ] }
//! ```
//!
//! An optional `root/texture_roster.json` overrides the bundled roster.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageSample, PoseLabel, TextureRoster};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const ROSTER_FILE: &str = "texture_roster.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub file: String,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub instance_id: u32,
    pub category: String,
    pub views: Vec<ViewMeta>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Overrides both the bundled roster and `root/texture_roster.json`.
    pub roster: Option<TextureRoster>,
    /// Instance directory names to skip (e.g. objects overlapping another set).
    pub exclude: Vec<String>,
}

pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    load_dataset_with(root, &LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<Vec<ImageSample>> {
    let roster = match &opts.roster {
        Some(r) => r.clone(),
        None => {
            let p = root.join(ROSTER_FILE);
            if p.is_file() {
                TextureRoster::from_path(&p)?
            } else {
                TextureRoster::default()
            }
        }
    };

    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if opts.exclude.contains(&name) {
            continue;
        }
        dirs.push(path);
    }
    dirs.sort();

    let per_object: Vec<Vec<ImageSample>> = dirs
        .par_iter()
        .map(|dir| load_object(dir, &roster))
        .collect::<Result<_>>()?;

    let num_instances = per_object.len() as u32;
    let mut seen = BTreeMap::new();
    for (dir, views) in dirs.iter().zip(&per_object) {
        let Some(first) = views.first() else { continue };
        let id = first.instance_id;
        if id >= num_instances {
            return Err(Error::Validation(format!(
                "{}: instance_id {id} outside [0, {num_instances})",
                dir.display()
            )));
        }
        if let Some(prev) = seen.insert(id, dir) {
            return Err(Error::Validation(format!(
                "instance_id {id} used by both {} and {}",
                prev.display(),
                dir.display()
            )));
        }
    }

    let mut samples: Vec<ImageSample> = per_object.into_iter().flatten().collect();
    sort_samples(&mut samples);
    Ok(samples)
}

/// Canonical ordering by `(instance_id, elevation, azimuth)`.
pub fn sort_samples(samples: &mut [ImageSample]) {
    samples.sort_by(|a, b| {
        a.instance_id
            .cmp(&b.instance_id)
            .then(a.pose.elevation_deg.total_cmp(&b.pose.elevation_deg))
            .then(a.pose.azimuth_deg.total_cmp(&b.pose.azimuth_deg))
    });
}

fn load_object(dir: &Path, roster: &TextureRoster) -> Result<Vec<ImageSample>> {
    let object = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::Load {
        object: object.clone(),
        message: format!("cannot read {META_FILE}: {e}"),
    })?;
    let meta: ObjectMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: Some(e.line() as u64),
        message: e.to_string(),
    })?;
    let textured = roster
        .is_textured(&meta.category)
        .ok_or_else(|| Error::Load {
            object: object.clone(),
            message: format!("category {:?} is not in the texture roster", meta.category),
        })?;
    let category_id = roster
        .category_id(&meta.category)
        .expect("roster lookup succeeded above");

    meta.views
        .iter()
        .map(|view| {
            let pixels = read_rgb(&dir.join(&view.file))?;
            let mask = view
                .mask_file
                .as_ref()
                .map(|m| read_mask(&dir.join(m)))
                .transpose()?;
            let pose =
                PoseLabel::new(view.elevation_deg, view.azimuth_deg).map_err(|e| Error::Load {
                    object: object.clone(),
                    message: e.to_string(),
                })?;
            let sample = ImageSample {
                pixels,
                mask,
                pose,
                instance_id: meta.instance_id,
                category_id,
                category: meta.category.clone(),
                textured,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn read_mask(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_luma8())
}

pub fn write_png<P, C>(path: &Path, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Write `samples` under `root` in the loader's layout, one directory per
/// instance named `instance_<id>`.
pub fn save_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    let mut by_instance: BTreeMap<u32, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        by_instance.entry(s.instance_id).or_default().push(s);
    }
    for (id, views) in by_instance {
        let dir = root.join(format!("instance_{id:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut metas = Vec::with_capacity(views.len());
        for (i, s) in views.iter().enumerate() {
            let file = format!("v{i:03}.png");
            write_png(&dir.join(&file), &s.pixels)?;
            let mask_file = match &s.mask {
                Some(m) => {
                    let name = format!("m{i:03}.png");
                    write_png(&dir.join(&name), m)?;
                    Some(name)
                }
                None => None,
            };
            metas.push(ViewMeta {
                file,
                elevation_deg: s.pose.elevation_deg,
                azimuth_deg: s.pose.azimuth_deg,
                mask_file,
            });
        }
        let meta = ObjectMeta {
            instance_id: id,
            category: views[0].category.clone(),
            views: metas,
        };
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Write a flat directory of PNGs named `img_<index>.png`.
pub fn save_images(dir: &Path, images: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        write_png(&dir.join(format!("img_{i:04}.png")), img)?;
    }
    Ok(())
}

/// Every PNG directly under `dir`, in file-name order.
pub fn load_images(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            paths.push(path);
        }
    }
    paths.sort();
    paths.par_iter().map(|p| read_rgb(p)).collect()
}
