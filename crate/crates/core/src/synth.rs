//! Procedural turntable dataset: orthographic ray-cast prisms with per-face
//! colours and stripe textures, random background scenes, and noise-sweep
//! scenes with ground-truth boxes.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, ImageSample, PoseLabel, TextureRoster};
use crate::error::{Error, Result};
use crate::evalkit::{BoundingBox, NoiseScene};
use crate::pipeline::random_patch;
use crate::seed;

pub const CLASSLEVEL_DIR: &str = "classlevel";
pub const MULTIVIEW_DIR: &str = "multiview";
pub const SINGLEVIEW_DIR: &str = "singleview";
pub const BACKGROUND_TRAIN_DIR: &str = "backgrounds/train";
pub const BACKGROUND_TEST_DIR: &str = "backgrounds/test";

/// World half-extent covered by the image.
const VIEW_HALF: f64 = 1.45;
const LIGHT: [f64; 3] = [0.45, 0.6, 0.65];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: u32,
    /// Objects split into the multi-view pool and the one-shot set.
    pub num_objects: usize,
    pub multiview_objects: usize,
    pub azimuths: usize,
    pub elevations: Vec<f64>,
    pub classlevel_categories: usize,
    pub classlevel_objects_per_category: usize,
    pub classlevel_views: usize,
    pub backgrounds_train: usize,
    pub backgrounds_test: usize,
    pub background_size: u32,
    /// Give every object its own hue band.
    pub hue_disjoint: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_objects: 40,
            multiview_objects: 24,
            azimuths: 36,
            elevations: vec![30.0, 45.0],
            classlevel_categories: 12,
            classlevel_objects_per_category: 6,
            classlevel_views: 12,
            backgrounds_train: 24,
            backgrounds_test: 24,
            background_size: 64,
            hue_disjoint: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} must be >= 8", self.image_size));
        }
        if self.multiview_objects >= self.num_objects {
            return bad(format!(
                "multiview_objects {} must leave at least one of {} objects for the one-shot set",
                self.multiview_objects, self.num_objects
            ));
        }
        if self.azimuths == 0 || self.elevations.is_empty() {
            return bad("need at least one azimuth and one elevation".into());
        }
        if let Some(e) = self.elevations.iter().find(|e| !(0.0..90.0).contains(*e)) {
            return bad(format!("elevation {e} outside [0, 90)"));
        }
        if self.background_size < self.image_size {
            return bad(format!(
                "background_size {} smaller than image_size {}",
                self.background_size, self.image_size
            ));
        }
        if self.classlevel_categories > TextureRoster::default().categories().len() {
            return bad(format!(
                "only {} categories available",
                TextureRoster::default().categories().len()
            ));
        }
        Ok(())
    }

    pub fn azimuth_list(&self) -> Vec<f64> {
        (0..self.azimuths)
            .map(|i| i as f64 * 360.0 / self.azimuths as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FacePattern {
    Solid,
    /// Bands across the face height.
    HStripes {
        count: u32,
    },
    /// Bands along the face edge.
    VStripes {
        count: u32,
    },
    Checker {
        count: u32,
    },
}

/// A convex prism with one colour per face.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectParams {
    pub sides: usize,
    pub radius: f64,
    pub height: f64,
    pub phase: f64,
    pub side_colors: Vec<[f64; 3]>,
    pub side_accents: Vec<[f64; 3]>,
    pub side_patterns: Vec<FacePattern>,
    pub top_color: [f64; 3],
    pub bottom_color: [f64; 3],
}

/// Prism proportions tied to the category so categories share a shape.
pub fn category_shape(category_id: u32) -> (usize, f64) {
    let sides = 3 + (category_id as usize % 6);
    let height = [0.7, 1.05, 1.4][(category_id as usize / 6) % 3];
    (sides, height)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl ObjectParams {
    /// `hue_band` restricts every face to `[lo, hi)` degrees.
    pub fn random<R: Rng + ?Sized>(
        category_id: u32,
        textured: bool,
        hue_band: Option<(f64, f64)>,
        rng: &mut R,
    ) -> Self {
        let (sides, height) = category_shape(category_id);
        let color = |rng: &mut R| {
            let h = match hue_band {
                Some((lo, hi)) => rng.random_range(lo..hi),
                None => rng.random_range(0.0..360.0),
            };
            hsv_to_rgb(h, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0))
        };
        let side_colors: Vec<[f64; 3]> = (0..sides).map(|_| color(rng)).collect();
        let side_accents: Vec<[f64; 3]> = side_colors
            .iter()
            .map(|c| {
                let k = rng.random_range(0.3..0.6);
                [c[0] * k, c[1] * k, c[2] * k]
            })
            .collect();
        let side_patterns = (0..sides)
            .map(|_| {
                if !textured {
                    return FacePattern::Solid;
                }
                let count = rng.random_range(2..5);
                match rng.random_range(0..3) {
                    0 => FacePattern::HStripes { count },
                    1 => FacePattern::VStripes { count },
                    _ => FacePattern::Checker { count },
                }
            })
            .collect();
        let top_color = color(rng);
        let bottom_color = color(rng);
        Self {
            sides,
            radius: rng.random_range(0.85..1.0),
            height: height * rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            side_colors,
            side_accents,
            side_patterns,
            top_color,
            bottom_color,
        }
    }

    fn vertex(&self, k: usize) -> (f64, f64) {
        let a = self.phase + 2.0 * PI * k as f64 / self.sides as f64;
        (self.radius * a.cos(), self.radius * a.sin())
    }

    /// Inward-facing planes `n . x <= d`: sides, then top, then bottom.
    fn planes(&self) -> Vec<([f64; 3], f64)> {
        let apothem = self.radius * (PI / self.sides as f64).cos();
        let mut planes: Vec<([f64; 3], f64)> = (0..self.sides)
            .map(|k| {
                let a = self.phase + 2.0 * PI * (k as f64 + 0.5) / self.sides as f64;
                ([a.cos(), a.sin(), 0.0], apothem)
            })
            .collect();
        planes.push(([0.0, 0.0, 1.0], self.height / 2.0));
        planes.push(([0.0, 0.0, -1.0], self.height / 2.0));
        planes
    }

    fn face_color(&self, face: usize, p: [f64; 3]) -> [f64; 3] {
        if face == self.sides {
            return self.top_color;
        }
        if face == self.sides + 1 {
            return self.bottom_color;
        }
        let (ax, ay) = self.vertex(face);
        let (bx, by) = self.vertex(face + 1);
        let (ex, ey) = (bx - ax, by - ay);
        let s = (((p[0] - ax) * ex + (p[1] - ay) * ey) / (ex * ex + ey * ey)).clamp(0.0, 0.999);
        let t = ((p[2] + self.height / 2.0) / self.height).clamp(0.0, 0.999);
        let band = |u: f64, n: u32| (u * n as f64) as u32 % 2 == 1;
        let accent = match self.side_patterns[face] {
            FacePattern::Solid => false,
            FacePattern::HStripes { count } => band(t, count),
            FacePattern::VStripes { count } => band(s, count),
            FacePattern::Checker { count } => band(s, count) ^ band(t, count),
        };
        if accent {
            self.side_accents[face]
        } else {
            self.side_colors[face]
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn rotate_z(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Render one view with 2x2 supersampling. A pixel is foreground when at
/// least half its subsamples hit the object; misses contribute black.
pub fn render_view(obj: &ObjectParams, pose: &PoseLabel, size: u32) -> (RgbImage, GrayImage) {
    let e = pose.elevation_deg.to_radians();
    let a = pose.azimuth_deg.to_radians();
    let cam = [e.cos(), 0.0, e.sin()];
    let up = [-e.sin(), 0.0, e.cos()];
    let right = [0.0, 1.0, 0.0];
    // turning the object by `a` is the same as turning the camera by `-a`
    let dir = rotate_z([-cam[0], -cam[1], -cam[2]], -a);
    let planes = obj.planes();
    let light = {
        let n = dot(LIGHT, LIGHT).sqrt();
        // light is fixed in the camera frame
        let l = [LIGHT[0] / n, LIGHT[1] / n, LIGHT[2] / n];
        let world = [
            l[0] * right[0] + l[1] * up[0] + l[2] * cam[0],
            l[0] * right[1] + l[1] * up[1] + l[2] * cam[1],
            l[0] * right[2] + l[1] * up[2] + l[2] * cam[2],
        ];
        rotate_z(world, -a)
    };
    let mut img = RgbImage::new(size, size);
    let mut mask = GrayImage::new(size, size);
    let px = 2.0 * VIEW_HALF / size as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            let mut hits = 0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (x as f64 + sx) * px - VIEW_HALF;
                let v = VIEW_HALF - (y as f64 + sy) * px;
                let o = [
                    u * right[0] + v * up[0] + 4.0 * cam[0],
                    u * right[1] + v * up[1] + 4.0 * cam[1],
                    u * right[2] + v * up[2] + 4.0 * cam[2],
                ];
                let o = rotate_z(o, -a);
                if let Some((face, t)) = intersect(&planes, o, dir) {
                    let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
                    let n = planes[face].0;
                    let shade = 0.35 + 0.65 * dot(n, light).max(0.0);
                    let c = obj.face_color(face, p);
                    for ch in 0..3 {
                        acc[ch] += c[ch] * shade;
                    }
                    hits += 1;
                }
            }
            if hits > 0 {
                let px = Rgb(acc.map(|v| (v / 4.0 * 255.0).round().clamp(0.0, 255.0) as u8));
                img.put_pixel(x, y, px);
            }
            if hits >= 2 {
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
    (img, mask)
}

/// Slab clipping against a convex polyhedron: entry face and distance.
fn intersect(planes: &[([f64; 3], f64)], o: [f64; 3], dir: [f64; 3]) -> Option<(usize, f64)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut face = usize::MAX;
    for (i, (n, d)) in planes.iter().enumerate() {
        let denom = dot(*n, dir);
        let num = d - dot(*n, o);
        if denom.abs() < 1e-12 {
            if num < 0.0 {
                return None;
            }
        } else if denom < 0.0 {
            let t = num / denom;
            if t > t_in {
                t_in = t;
                face = i;
            }
        } else {
            t_out = t_out.min(num / denom);
        }
    }
    (face != usize::MAX && t_in < t_out).then_some((face, t_in))
}

/// Gradient plus random rectangles and discs.
pub fn render_background<R: Rng + ?Sized>(size: u32, rng: &mut R) -> RgbImage {
    let c0 = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.1..0.6),
        rng.random_range(0.3..0.9),
    );
    let c1 = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.1..0.6),
        rng.random_range(0.3..0.9),
    );
    let mut img = RgbImage::from_fn(size, size, |_, y| {
        let t = y as f64 / size as f64;
        Rgb(std::array::from_fn(|c| {
            ((c0[c] * (1.0 - t) + c1[c] * t) * 255.0) as u8
        }))
    });
    let shapes = rng.random_range(6..14);
    let s = size as f64;
    for _ in 0..shapes {
        let col = hsv_to_rgb(
            rng.random_range(0.0..360.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
        );
        let col = Rgb(col.map(|v| (v * 255.0) as u8));
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.05 * s..0.3 * s);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r * 0.6
                };
                if inside {
                    img.put_pixel(x, y, col);
                }
            }
        }
    }
    img
}

/// Everything `synth` produces, in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub classlevel: Vec<ImageSample>,
    pub multiview: Vec<ImageSample>,
    pub singleview: Vec<ImageSample>,
    pub backgrounds_train: Vec<RgbImage>,
    pub backgrounds_test: Vec<RgbImage>,
}

struct ObjectSpec {
    instance_id: u32,
    category_id: u32,
    category: String,
    textured: bool,
    params: ObjectParams,
}

fn render_object(spec: &ObjectSpec, poses: &[PoseLabel], size: u32) -> Vec<ImageSample> {
    poses
        .iter()
        .map(|pose| {
            let (pixels, mask) = render_view(&spec.params, pose, size);
            ImageSample {
                pixels,
                mask: Some(mask),
                pose: *pose,
                instance_id: spec.instance_id,
                category_id: spec.category_id,
                category: spec.category.clone(),
                textured: spec.textured,
            }
        })
        .collect()
}

fn render_all(
    specs: &[ObjectSpec],
    poses: impl Fn(usize) -> Vec<PoseLabel> + Sync,
    size: u32,
) -> Vec<ImageSample> {
    let mut out: Vec<ImageSample> = specs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| render_object(s, &poses(i), size))
        .collect();
    dataset::sort_samples(&mut out);
    out
}

pub fn synthesize(cfg: &SynthConfig, seed_v: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let roster = TextureRoster::default();
    let categories: Vec<String> = roster.categories().into_iter().map(String::from).collect();
    let category = |cid: u32| -> (String, bool) {
        let name = categories[cid as usize].clone();
        let textured = roster.is_textured(&name).unwrap_or(false);
        (name, textured)
    };

    // turntable objects: multi-view pool first, then the one-shot set
    let mut rng = seed::rng_from(seed_v, &["synth", "objects"]);
    let n = cfg.num_objects;
    let mut turntable: Vec<ObjectSpec> = (0..n)
        .map(|i| {
            let cid = rng.random_range(0..categories.len() as u32);
            let (name, textured) = category(cid);
            let band = cfg.hue_disjoint.then(|| {
                let w = 360.0 / n as f64;
                (i as f64 * w + 0.2 * w, i as f64 * w + 0.8 * w)
            });
            ObjectSpec {
                instance_id: i as u32,
                category_id: cid,
                category: name,
                textured,
                params: ObjectParams::random(cid, textured, band, &mut rng),
            }
        })
        .collect();
    let single_specs: Vec<ObjectSpec> = turntable
        .split_off(cfg.multiview_objects)
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.instance_id = i as u32;
            s
        })
        .collect();
    let turntable_poses: Vec<PoseLabel> = cfg
        .elevations
        .iter()
        .flat_map(|e| cfg.azimuth_list().into_iter().map(move |a| (*e, a)))
        .map(|(e, a)| PoseLabel::new(e, a))
        .collect::<Result<_>>()?;
    let multiview = render_all(&turntable, |_| turntable_poses.clone(), cfg.image_size);
    let singleview = render_all(&single_specs, |_| turntable_poses.clone(), cfg.image_size);

    // class-level set: fresh objects, shapes keyed by category
    let mut rng = seed::rng_from(seed_v, &["synth", "classlevel"]);
    let mut class_ids: Vec<u32> = (0..categories.len() as u32).collect();
    class_ids.shuffle(&mut rng);
    class_ids.truncate(cfg.classlevel_categories);
    class_ids.sort_unstable();
    let mut class_specs = Vec::new();
    let mut class_poses = Vec::new();
    for &cid in &class_ids {
        for _ in 0..cfg.classlevel_objects_per_category {
            let (name, textured) = category(cid);
            class_specs.push(ObjectSpec {
                instance_id: class_specs.len() as u32,
                category_id: cid,
                category: name,
                textured,
                params: ObjectParams::random(cid, textured, None, &mut rng),
            });
            let poses: Vec<PoseLabel> = (0..cfg.classlevel_views)
                .map(|_| PoseLabel::new(rng.random_range(10.0..60.0), rng.random_range(0.0..360.0)))
                .collect::<Result<_>>()?;
            class_poses.push(poses);
        }
    }
    let classlevel = render_all(&class_specs, |i| class_poses[i].clone(), cfg.image_size);

    let backgrounds = |tag: &str, count: usize| -> Vec<RgbImage> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                render_background(
                    cfg.background_size,
                    &mut seed::rng_from(seed_v, &["synth", tag, &i.to_string()]),
                )
            })
            .collect()
    };
    Ok(SynthDataset {
        classlevel,
        multiview,
        singleview,
        backgrounds_train: backgrounds("bg-train", cfg.backgrounds_train),
        backgrounds_test: backgrounds("bg-test", cfg.backgrounds_test),
    })
}

pub fn write_synth(ds: &SynthDataset, out: &Path) -> Result<()> {
    dataset::save_dataset(&out.join(CLASSLEVEL_DIR), &ds.classlevel)?;
    dataset::save_dataset(&out.join(MULTIVIEW_DIR), &ds.multiview)?;
    dataset::save_dataset(&out.join(SINGLEVIEW_DIR), &ds.singleview)?;
    dataset::save_images(&out.join(BACKGROUND_TRAIN_DIR), &ds.backgrounds_train)?;
    dataset::save_images(&out.join(BACKGROUND_TEST_DIR), &ds.backgrounds_test)
}

/// Composite each sample onto a random `canvas`-sized patch of a random
/// background and record the object's box.
pub fn noise_scenes(
    samples: &[ImageSample],
    backgrounds: &[RgbImage],
    canvas: u32,
    seed_v: u64,
) -> Result<Vec<NoiseScene>> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("noise scenes need at least one background"));
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed::rng_from(seed_v, &["noise-scene", &i.to_string()]);
            let bg = &backgrounds[rng.random_range(0..backgrounds.len())];
            let patch = random_patch(bg, canvas, canvas, &mut rng);
            let placed = dataset::composite_on_background(s, &patch, &mut rng)?;
            let mask = placed.mask.as_ref().expect("composite sets a mask");
            let bbox = BoundingBox::from_mask(mask)
                .ok_or_else(|| Error::Degenerate("empty object mask".into()))?;
            Ok(NoiseScene {
                image: placed.pixels,
                bbox,
                instance_id: s.instance_id,
            })
        })
        .collect()
}
