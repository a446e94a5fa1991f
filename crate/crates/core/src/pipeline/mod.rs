//! The general-to-specific training procedure: class-level, multi-view and
//! one-shot stages run back to back, each starting from the previous body
//! with a fresh head.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy};
use crate::dataset::{composite_on_background, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::network::{save_checkpoint, Batch, LearningSchedule, Network};
use crate::raster;
use crate::seed::{self, derive_seed};

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    #[default]
    Instance,
    /// One class per (instance, azimuth bin).
    PoseClass,
    /// One class per distinct category.
    Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    #[default]
    None,
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub name: String,
    pub split: DatasetSplit,
    pub labeling: Labeling,
    pub pose_bins: u32,
    pub freeze: Vec<String>,
    pub schedule: LearningSchedule,
    pub augment_policy: AugmentPolicy,
    pub background_pool: Option<Arc<Vec<RgbImage>>>,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate every this many iterations (and after the last); 0 disables.
    pub eval_every: u64,
    pub eval_on: EvalTarget,
    /// Cap on evaluated samples (evenly subsampled); 0 means all.
    pub eval_limit: usize,
}

impl StagePlan {
    pub fn new(name: &str, split: DatasetSplit, schedule: LearningSchedule, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            split,
            labeling: Labeling::Instance,
            pose_bins: 1,
            freeze: Vec::new(),
            schedule,
            augment_policy: AugmentPolicy::standard(),
            background_pool: None,
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
            eval_every: 0,
            eval_on: EvalTarget::None,
            eval_limit: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.train.is_empty() {
            return Err(Error::invalid(format!(
                "stage {}: empty train split",
                self.name
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "stage {}: batch size must be positive",
                self.name
            )));
        }
        if self.pose_bins == 0 {
            return Err(Error::invalid(format!(
                "stage {}: pose_bins must be >= 1",
                self.name
            )));
        }
        if self.background_pool.is_some() {
            if self.background_pool.as_ref().is_some_and(|p| p.is_empty()) {
                return Err(Error::invalid(format!(
                    "stage {}: empty background pool",
                    self.name
                )));
            }
            if self.split.train.iter().any(|s| s.mask.is_none()) {
                return Err(Error::Precondition(format!(
                    "stage {}: background compositing needs masks on every train sample",
                    self.name
                )));
            }
        }
        self.schedule.validate()?;
        self.augment_policy.validate()
    }
}

/// Relabel as `instance_id * pose_bins + floor(azimuth / (360 / pose_bins))`.
/// The images themselves are untouched.
pub fn pose_class_relabel(split: &DatasetSplit, pose_bins: u32) -> Result<DatasetSplit> {
    if pose_bins == 0 {
        return Err(Error::invalid("pose_bins must be >= 1"));
    }
    if pose_bins == 1 {
        return Ok(split.clone());
    }
    let width = 360.0 / pose_bins as f64;
    let relabel = |s: &ImageSample| {
        let az = s.pose.azimuth_deg;
        if !az.is_finite() {
            return Err(Error::invalid(format!(
                "sample of instance {} has no valid pose",
                s.instance_id
            )));
        }
        let bin = ((az / width).floor() as u32).min(pose_bins - 1);
        let mut out = s.clone();
        out.instance_id = s.instance_id * pose_bins + bin;
        Ok(out)
    };
    Ok(DatasetSplit {
        train: split.train.iter().map(relabel).collect::<Result<_>>()?,
        test: split.test.iter().map(relabel).collect::<Result<_>>()?,
        num_classes: split.num_classes * pose_bins as usize,
    })
}

/// Relabel every sample by category, compacting category ids to `0..C` in
/// increasing order.
pub fn category_relabel(split: &DatasetSplit) -> DatasetSplit {
    let ids: BTreeMap<u32, u32> = split
        .train
        .iter()
        .chain(&split.test)
        .map(|s| s.category_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i as u32))
        .collect();
    let relabel = |s: &ImageSample| {
        let mut o = s.clone();
        o.instance_id = ids[&s.category_id];
        o
    };
    DatasetSplit {
        train: split.train.iter().map(relabel).collect(),
        test: split.test.iter().map(relabel).collect(),
        num_classes: ids.len(),
    }
}

fn labeled_split(plan: &StagePlan) -> Result<DatasetSplit> {
    match plan.labeling {
        Labeling::Instance => Ok(plan.split.clone()),
        Labeling::PoseClass => pose_class_relabel(&plan.split, plan.pose_bins),
        Labeling::Category => Ok(category_relabel(&plan.split)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    /// Mean training loss since the previous point.
    pub loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub points: Vec<TracePoint>,
}

impl StageTrace {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.iter().rev().find_map(|p| p.eval_accuracy)
    }

    /// `(iteration, accuracy)` pairs with an evaluation.
    pub fn accuracy_series(&self) -> Vec<(u64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.eval_accuracy.map(|a| (p.iteration, a)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "loss", "eval_accuracy"])
            .map_err(|e| Error::Validation(e.to_string()))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for p in &self.points {
            wr.write_record([p.iteration.to_string(), opt(p.loss), opt(p.eval_accuracy)])
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::io("<trace>", e))
    }
}

/// Resize to the network input when needed.
fn fit_to<'a>(img: &'a RgbImage, w: u32, h: u32) -> std::borrow::Cow<'a, RgbImage> {
    if img.dimensions() == (w, h) {
        std::borrow::Cow::Borrowed(img)
    } else {
        std::borrow::Cow::Owned(raster::resize(img, w, h))
    }
}

/// Random `w x h` window of `bg`, resized up if `bg` is smaller.
pub fn random_patch<R: Rng + ?Sized>(bg: &RgbImage, w: u32, h: u32, rng: &mut R) -> RgbImage {
    let (bw, bh) = bg.dimensions();
    if bw < w || bh < h {
        return raster::resize(bg, w.max(bw), h.max(bh));
    }
    let x = rng.random_range(0..=bw - w);
    let y = rng.random_range(0..=bh - h);
    image::imageops::crop_imm(bg, x, y, w, h).to_image()
}

/// Training input for one minibatch slot: composite, augment, resize.
fn prepare_sample(
    plan: &StagePlan,
    sample: &ImageSample,
    w: u32,
    h: u32,
    rng: &mut seed::Rng,
) -> Result<RgbImage> {
    let mut s = std::borrow::Cow::Borrowed(sample);
    if let Some(pool) = &plan.background_pool {
        let bg = &pool[rng.random_range(0..pool.len())];
        let (sw, sh) = sample.dimensions();
        let patch = random_patch(bg, sw, sh, rng);
        s = std::borrow::Cow::Owned(composite_on_background(sample, &patch, rng)?);
    }
    let a = augment(&s, &plan.augment_policy, rng)?;
    Ok(fit_to(&a.pixels, w, h).into_owned())
}

/// Classification accuracy of `net` on `samples` (labels = `instance_id`).
pub fn accuracy(net: &Network<f32>, samples: &[ImageSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let preds = predict(net, samples)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.instance_id)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Predicted label per sample, evaluated in chunks.
pub fn predict(net: &Network<f32>, samples: &[ImageSample]) -> Result<Vec<u32>> {
    let s = net.input_shape();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let imgs: Vec<_> = chunk
            .iter()
            .map(|x| fit_to(&x.pixels, s.w as u32, s.h as u32))
            .collect();
        let batch = Batch::from_images(imgs.iter().map(|c| c.as_ref()))?;
        out.extend(net.classify(&batch)?);
    }
    Ok(out)
}

/// Activations at `layer` per sample, evaluated in chunks.
pub fn embed(net: &Network<f32>, samples: &[ImageSample], layer: &str) -> Result<Vec<Vec<f32>>> {
    let s = net.input_shape();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let imgs: Vec<_> = chunk
            .iter()
            .map(|x| fit_to(&x.pixels, s.w as u32, s.h as u32))
            .collect();
        let batch = Batch::from_images(imgs.iter().map(|c| c.as_ref()))?;
        out.extend(net.extract_embeddings(&batch, layer)?);
    }
    Ok(out)
}

fn eval_subset(plan: &StagePlan, split: &DatasetSplit) -> Vec<ImageSample> {
    let src = match plan.eval_on {
        EvalTarget::None => return Vec::new(),
        EvalTarget::Train => &split.train,
        EvalTarget::Test => &split.test,
    };
    if plan.eval_limit == 0 || src.len() <= plan.eval_limit {
        return src.clone();
    }
    crate::dataset::subsample_indices(src.len(), plan.eval_limit)
        .expect("limit within bounds")
        .into_iter()
        .map(|i| src[i].clone())
        .collect()
}

/// Replace the head, apply the freeze set and train for the plan's
/// schedule. Minibatches are drawn uniformly with replacement from a
/// per-iteration seed.
pub fn run_stage(mut net: Network<f32>, plan: &StagePlan) -> Result<(Network<f32>, StageTrace)> {
    plan.validate()?;
    let split = labeled_split(plan)?;
    if split.num_classes < 2 {
        return Err(Error::invalid(format!(
            "stage {} needs >= 2 classes",
            plan.name
        )));
    }
    if let Some(s) = split
        .train
        .iter()
        .chain(&split.test)
        .find(|s| s.instance_id as usize >= split.num_classes)
    {
        return Err(Error::Validation(format!(
            "stage {}: label {} outside [0, {})",
            plan.name, s.instance_id, split.num_classes
        )));
    }
    net.replace_head(
        split.num_classes,
        &mut seed::rng_from(plan.seed, &["head", &plan.name]),
    )?;
    net.set_freeze(&plan.freeze)?;

    let shape = net.input_shape();
    let (w, h) = (shape.w as u32, shape.h as u32);
    let eval_set = eval_subset(plan, &split);
    let mut trace = StageTrace {
        stage: plan.name.clone(),
        points: Vec::new(),
    };
    let stop = plan.schedule.stop_at_iteration;
    let evaluate = |net: &Network<f32>| -> Result<Option<f64>> {
        if eval_set.is_empty() || plan.eval_every == 0 {
            return Ok(None);
        }
        accuracy(net, &eval_set).map(Some)
    };
    if stop > 0 {
        if let Some(a) = evaluate(&net)? {
            trace.points.push(TracePoint {
                iteration: 0,
                loss: None,
                eval_accuracy: Some(a),
            });
        }
    }
    let mut loss_sum = 0.0;
    let mut loss_n = 0u64;
    for it in 0..stop {
        let it_tag = it.to_string();
        let mut pick = seed::rng_from(plan.seed, &["batch", &plan.name, &it_tag]);
        let idx: Vec<usize> = (0..plan.batch_size)
            .map(|_| pick.random_range(0..split.train.len()))
            .collect();
        let images: Vec<RgbImage> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = seed::rng(derive_seed(
                    plan.seed,
                    &["sample", &plan.name, &it_tag, &slot.to_string()],
                ));
                prepare_sample(plan, &split.train[i], w, h, &mut rng)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<u32> = idx.iter().map(|&i| split.train[i].instance_id).collect();
        let batch = Batch::from_images(&images)?;
        let loss = net.train_step(&batch, &labels, &plan.schedule, it)?;
        loss_sum += loss as f64;
        loss_n += 1;
        let done = it + 1;
        let at_eval = plan.eval_every > 0 && (done % plan.eval_every == 0 || done == stop);
        if at_eval || done == stop {
            trace.points.push(TracePoint {
                iteration: done,
                loss: Some(loss_sum / loss_n as f64),
                eval_accuracy: if at_eval { evaluate(&net)? } else { None },
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    log::info!(
        "stage {} finished after {stop} iterations (final accuracy {:?})",
        plan.name,
        trace.final_accuracy()
    );
    Ok((net, trace))
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub name: String,
    pub trace: StageTrace,
    /// Network as it stood after this stage.
    pub checkpoint: Network<f32>,
    pub schedule: LearningSchedule,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub network: Network<f32>,
    pub stages: Vec<StageOutcome>,
}

impl PipelineResult {
    /// `<dir>/<stage>.ckpt` and `<dir>/<stage>_trace.csv` per stage.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.stages {
            let ck = dir.join(format!("{}.ckpt", s.name));
            save_checkpoint(
                &ck,
                &s.checkpoint,
                Some((&s.schedule, s.schedule.stop_at_iteration)),
            )?;
            let tp = dir.join(format!("{}_trace.csv", s.name));
            let f = std::fs::File::create(&tp).map_err(|e| Error::io(&tp, e))?;
            s.trace.write_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Run the plans in order, each from the previous stage's network.
pub fn run_multistage(plans: &[StagePlan], initial: Network<f32>) -> Result<PipelineResult> {
    if plans.is_empty() {
        return Err(Error::invalid("at least one stage plan is required"));
    }
    let mut names = std::collections::BTreeSet::new();
    for p in plans {
        if !names.insert(p.name.as_str()) {
            return Err(Error::invalid(format!("duplicate stage name {}", p.name)));
        }
    }
    let mut net = initial;
    let mut stages = Vec::with_capacity(plans.len());
    for plan in plans {
        let (next, trace) = run_stage(net, plan)?;
        stages.push(StageOutcome {
            name: plan.name.clone(),
            trace,
            checkpoint: next.clone(),
            schedule: plan.schedule.clone(),
        });
        net = next;
    }
    Ok(PipelineResult {
        network: net,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PoseLabel;
    use image::{GrayImage, Luma, Rgb};

    fn sample(id: u32, az: f64) -> ImageSample {
        ImageSample {
            pixels: RgbImage::from_fn(8, 8, |x, _| {
                let mut c = [0u8; 3];
                c[id as usize % 3] = if x < 4 { 255 } else { 128 };
                Rgb(c)
            }),
            mask: None,
            pose: PoseLabel::new(30.0, az).unwrap(),
            instance_id: id,
            category_id: id % 2,
            category: "c".into(),
            textured: false,
        }
    }

    #[test]
    fn pose_relabel_enumeration() {
        let train: Vec<ImageSample> = (0..3)
            .flat_map(|i| [0.0, 90.0, 180.0, 270.0].map(|a| sample(i, a)))
            .collect();
        let split = DatasetSplit {
            train,
            test: vec![],
            num_classes: 3,
        };
        let r = pose_class_relabel(&split, 4).unwrap();
        assert_eq!(r.num_classes, 12);
        let labels: Vec<u32> = r.train.iter().map(|s| s.instance_id).collect();
        assert_eq!(labels, (0..12).collect::<Vec<_>>());
        for (a, b) in r.train.iter().zip(&split.train) {
            assert_eq!(a.pixels, b.pixels);
        }
        let same = pose_class_relabel(&split, 1).unwrap();
        assert_eq!(same, split);
        let big = DatasetSplit {
            train: vec![sample(0, 0.0)],
            test: vec![],
            num_classes: 124,
        };
        assert_eq!(pose_class_relabel(&big, 20).unwrap().num_classes, 2480);
    }

    #[test]
    fn category_relabel_compacts() {
        let split = DatasetSplit {
            train: (0..5).map(|i| sample(i, 0.0)).collect(),
            test: vec![],
            num_classes: 5,
        };
        let c = category_relabel(&split);
        assert_eq!(c.num_classes, 2);
        assert_eq!(
            c.train.iter().map(|s| s.instance_id).collect::<Vec<_>>(),
            vec![0, 1, 0, 1, 0]
        );
    }

    fn tiny_net(classes: usize) -> Network<f32> {
        use crate::network::{LayerSpec, Shape};
        Network::new(
            Shape::new(3, 8, 8),
            vec![
                LayerSpec::conv("conv1", 2, 3),
                LayerSpec::relu("relu1"),
                LayerSpec::fc("fc6", 8),
                LayerSpec::relu("relu6"),
                LayerSpec::fc("head", classes),
            ],
            &mut seed::rng(1),
        )
        .unwrap()
    }

    fn colour_split() -> DatasetSplit {
        let train = (0..3)
            .flat_map(|i| [0.0, 120.0].map(|a| sample(i, a)))
            .collect();
        DatasetSplit {
            train,
            test: (0..3).map(|i| sample(i, 60.0)).collect(),
            num_classes: 3,
        }
    }

    #[test]
    fn zero_iteration_stage_only_replaces_head() {
        let net = tiny_net(5);
        let body = net.body_checksum();
        let plan = StagePlan::new("s", colour_split(), LearningSchedule::paper_recipe(0), 3);
        let (out, trace) = run_stage(net, &plan).unwrap();
        assert_eq!(out.body_checksum(), body);
        assert_eq!(out.num_classes(), 3);
        assert!(trace.points.is_empty());
    }

    #[test]
    fn stage_is_deterministic_and_learns() {
        let mut plan = StagePlan::new(
            "s",
            colour_split(),
            LearningSchedule::constant(0.1, 0.1, 150).unwrap(),
            7,
        );
        plan.augment_policy = AugmentPolicy::identity();
        plan.batch_size = 8;
        plan.eval_every = 50;
        plan.eval_on = EvalTarget::Test;
        let (a, ta) = run_stage(tiny_net(3), &plan).unwrap();
        let (b, tb) = run_stage(tiny_net(3), &plan).unwrap();
        assert_eq!(a.layers(), b.layers());
        assert_eq!(ta, tb);
        assert_eq!(ta.final_accuracy(), Some(1.0), "{ta:?}");
        let its: Vec<u64> = ta.points.iter().map(|p| p.iteration).collect();
        assert_eq!(its, vec![0, 50, 100, 150]);
    }

    #[test]
    fn multistage_inherits_body() {
        let mut s1 = StagePlan::new(
            "one",
            colour_split(),
            LearningSchedule::constant(0.05, 0.05, 20).unwrap(),
            1,
        );
        s1.batch_size = 4;
        let mut s2 = StagePlan::new(
            "two",
            colour_split(),
            LearningSchedule::constant(0.05, 0.05, 0).unwrap(),
            2,
        );
        s2.labeling = Labeling::PoseClass;
        s2.pose_bins = 2;
        let r = run_multistage(&[s1, s2], tiny_net(3)).unwrap();
        assert_eq!(r.stages.len(), 2);
        assert_eq!(
            r.stages[0].checkpoint.body_checksum(),
            r.stages[1].checkpoint.body_checksum()
        );
        assert_eq!(r.network.num_classes(), 6);
        assert!(run_multistage(&[], tiny_net(3)).is_err());
    }

    #[test]
    fn background_requires_masks() {
        let mut plan = StagePlan::new(
            "bg",
            colour_split(),
            LearningSchedule::constant(0.05, 0.05, 2).unwrap(),
            1,
        );
        plan.background_pool = Some(Arc::new(vec![RgbImage::from_pixel(8, 8, Rgb([0, 200, 0]))]));
        assert!(matches!(
            run_stage(tiny_net(3), &plan),
            Err(Error::Precondition(_))
        ));
        for s in &mut plan.split.train {
            let mut m = GrayImage::new(8, 8);
            for y in 2..6 {
                for x in 2..6 {
                    m.put_pixel(x, y, Luma([255]));
                }
            }
            s.mask = Some(m);
        }
        run_stage(tiny_net(3), &plan).unwrap();
        let empty = StagePlan {
            split: DatasetSplit {
                train: vec![],
                test: vec![],
                num_classes: 3,
            },
            ..plan
        };
        assert!(run_stage(tiny_net(3), &empty).is_err());
    }
}
