//! Measurement: per-query reports, azimuth-binned curves, bounding-box
//! noise sweeps, convergence comparisons and report files.

mod report;

use std::collections::BTreeMap;

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, ImageSample, PoseLabel};
use crate::error::{Error, Result};
use crate::raster;
use crate::seed;

pub use report::{read_report, write_curve_csv, write_report};

pub const DEFAULT_BIN_WIDTH_DEG: f64 = 22.5;
pub const SCALE_SIGMA_PER_N: f64 = 0.025;
pub const SHIFT_SIGMA_PER_N: f64 = 2.0;

/// Smallest angle between two azimuths, in `[0, 180]`.
pub fn azimuth_difference(a: &PoseLabel, b: &PoseLabel) -> f64 {
    azimuth_difference_deg(a.azimuth_deg, b.azimuth_deg)
}

pub fn azimuth_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    pub true_id: u32,
    /// `None` when the classifier failed on this query.
    pub predicted: Option<u32>,
    pub correct: bool,
    pub train_azimuth_deg: Option<f64>,
    pub test_azimuth_deg: f64,
    pub elevation_diff_deg: Option<f64>,
    pub textured: bool,
}

/// Accuracies are ratios of the stored counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub textured_total: usize,
    pub textured_correct: usize,
    pub textured_accuracy: Option<f64>,
    pub untextured_total: usize,
    pub untextured_correct: usize,
    pub untextured_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Aggregates {
    pub fn from_records(records: &[QueryRecord]) -> Self {
        let mut a = Aggregates::default();
        for r in records {
            a.total += 1;
            a.correct += usize::from(r.correct);
            if r.textured {
                a.textured_total += 1;
                a.textured_correct += usize::from(r.correct);
            } else {
                a.untextured_total += 1;
                a.untextured_correct += usize::from(r.correct);
            }
        }
        a.accuracy = ratio(a.correct, a.total);
        a.textured_accuracy = ratio(a.textured_correct, a.textured_total);
        a.untextured_accuracy = ratio(a.untextured_correct, a.untextured_total);
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleBin {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub center_deg: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub n: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub name: String,
    pub first_iteration: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryError {
    pub query_id: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub name: String,
    /// Resolved configuration that produced the report.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub aggregates: Aggregates,
    #[serde(default)]
    pub angle_curve: Option<Vec<AngleBin>>,
    #[serde(default)]
    pub noise_curve: Option<Vec<NoisePoint>>,
    #[serde(default)]
    pub convergence: Option<Vec<ConvergenceRow>>,
    #[serde(default)]
    pub errors: Vec<QueryError>,
    /// Stored in the CSV companion file, not the JSON.
    #[serde(skip)]
    pub records: Vec<QueryRecord>,
}

impl EvaluationReport {
    pub fn new(name: &str, records: Vec<QueryRecord>, errors: Vec<QueryError>) -> Self {
        Self {
            name: name.to_string(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            aggregates: Aggregates::from_records(&records),
            angle_curve: None,
            noise_curve: None,
            convergence: None,
            errors,
            records,
        }
    }

    /// Counts add up and every stored accuracy equals its count ratio.
    pub fn check_consistency(&self) -> bool {
        let a = Aggregates::from_records(&self.records);
        let bins_ok = self.angle_curve.as_ref().is_none_or(|bins| {
            let n: usize = bins.iter().map(|b| b.count).sum();
            let c: usize = bins.iter().map(|b| b.correct).sum();
            let with_pose = self
                .records
                .iter()
                .filter(|r| r.train_azimuth_deg.is_some())
                .count();
            n == with_pose && (with_pose != a.total || c == a.correct)
        });
        a == self.aggregates && a.textured_total + a.untextured_total == a.total && bins_ok
    }
}

/// First train sample's pose per instance.
fn train_poses(split: &DatasetSplit) -> BTreeMap<u32, PoseLabel> {
    let mut m = BTreeMap::new();
    for s in &split.train {
        m.entry(s.instance_id).or_insert(s.pose);
    }
    m
}

/// Classify every test sample of `split`. Records follow test order;
/// classifier failures count as incorrect and are listed in `errors`.
pub fn evaluate<F>(name: &str, classify: F, split: &DatasetSplit) -> EvaluationReport
where
    F: Fn(&ImageSample) -> Result<u32> + Sync,
{
    let poses = train_poses(split);
    let results: Vec<(QueryRecord, Option<QueryError>)> = split
        .test
        .par_iter()
        .enumerate()
        .map(|(qid, s)| {
            let pred = classify(s);
            let train = poses.get(&s.instance_id);
            let (predicted, err) = match pred {
                Ok(p) => (Some(p), None),
                Err(e) => (
                    None,
                    Some(QueryError {
                        query_id: qid,
                        message: e.to_string(),
                    }),
                ),
            };
            let rec = QueryRecord {
                query_id: qid,
                true_id: s.instance_id,
                predicted,
                correct: predicted == Some(s.instance_id),
                train_azimuth_deg: train.map(|p| p.azimuth_deg),
                test_azimuth_deg: s.pose.azimuth_deg,
                elevation_diff_deg: train.map(|p| s.pose.elevation_deg - p.elevation_deg),
                textured: s.textured,
            };
            (rec, err)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (r, e) in results {
        records.push(r);
        errors.extend(e);
    }
    EvaluationReport::new(name, records, errors)
}

/// Accuracy per azimuth-difference bin over `[0, 180]`; the last bin is
/// closed on the right. Records without a train pose are left out.
pub fn angle_binned_accuracy(
    report: &EvaluationReport,
    bin_width_deg: f64,
) -> Result<Vec<AngleBin>> {
    angle_bins(&report.records, bin_width_deg)
}

pub fn angle_bins(records: &[QueryRecord], bin_width_deg: f64) -> Result<Vec<AngleBin>> {
    if !(bin_width_deg > 0.0 && bin_width_deg.is_finite()) {
        return Err(Error::invalid(format!(
            "bin width {bin_width_deg} must be positive"
        )));
    }
    let nbins = ((180.0 / bin_width_deg).ceil() as usize).max(1);
    let mut bins: Vec<AngleBin> = (0..nbins)
        .map(|i| {
            let lo = i as f64 * bin_width_deg;
            let hi = ((i + 1) as f64 * bin_width_deg).min(180.0);
            AngleBin {
                lo_deg: lo,
                hi_deg: hi,
                center_deg: (lo + hi) / 2.0,
                count: 0,
                correct: 0,
                accuracy: None,
            }
        })
        .collect();
    for r in records {
        let Some(train) = r.train_azimuth_deg else {
            continue;
        };
        let d = azimuth_difference_deg(train, r.test_azimuth_deg);
        let i = ((d / bin_width_deg).floor() as usize).min(nbins - 1);
        bins[i].count += 1;
        bins[i].correct += usize::from(r.correct);
    }
    for b in &mut bins {
        b.accuracy = ratio(b.correct, b.count);
    }
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxNoiseParams {
    pub n: f64,
    pub scale_sigma_per_n: f64,
    pub shift_sigma_per_n: f64,
}

impl BoxNoiseParams {
    pub fn new(n: f64) -> Self {
        Self {
            n,
            scale_sigma_per_n: SCALE_SIGMA_PER_N,
            shift_sigma_per_n: SHIFT_SIGMA_PER_N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxNoise {
    pub s: f64,
    pub dx: f64,
    pub dy: f64,
}

impl BoxNoise {
    pub const NONE: BoxNoise = BoxNoise {
        s: 1.0,
        dx: 0.0,
        dy: 0.0,
    };
}

/// `s = |N(1, 0.025 n)|`, `dx, dy ~ N(0, 2 n)` with the second parameter a
/// standard deviation. `n == 0` returns exactly `(1, 0, 0)` without drawing.
pub fn sample_box_noise<R: Rng + ?Sized>(params: &BoxNoiseParams, rng: &mut R) -> Result<BoxNoise> {
    if !(params.n >= 0.0 && params.n.is_finite()) {
        return Err(Error::invalid(format!(
            "noise level {} must be >= 0",
            params.n
        )));
    }
    if params.n == 0.0 {
        return Ok(BoxNoise::NONE);
    }
    let scale = Normal::new(1.0, params.scale_sigma_per_n * params.n)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let shift = Normal::new(0.0, params.shift_sigma_per_n * params.n)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(BoxNoise {
        s: scale.sample(rng).abs(),
        dx: shift.sample(rng),
        dy: shift.sample(rng),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center_x: f64, center_y: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::invalid(format!(
                "box size {width}x{height} must be positive"
            )));
        }
        Ok(Self {
            center_x,
            center_y,
            width,
            height,
        })
    }

    /// Tight box around a mask's foreground, in pixel-edge coordinates.
    pub fn from_mask(mask: &image::GrayImage) -> Option<Self> {
        let (x0, y0, x1, y1) = raster::mask_bbox(mask)?;
        let (w, h) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        Some(Self {
            center_x: x0 as f64 + w / 2.0,
            center_y: y0 as f64 + h / 2.0,
            width: w,
            height: h,
        })
    }

    pub fn left(&self) -> f64 {
        self.center_x - self.width / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center_y - self.height / 2.0
    }
}

/// Scale about the center by `s`, then shift by `(dx, dy)`.
pub fn apply_box_noise(bbox: &BoundingBox, noise: &BoxNoise) -> Result<BoundingBox> {
    if !(noise.s > 0.0) {
        return Err(Error::invalid(format!(
            "scale factor {} must be > 0",
            noise.s
        )));
    }
    BoundingBox::new(
        bbox.center_x + noise.dx,
        bbox.center_y + noise.dy,
        bbox.width * noise.s,
        bbox.height * noise.s,
    )
}

/// Crop `bbox` out of `image` and resize to `out_w x out_h`. A box lying
/// entirely outside the image is moved back until it overlaps by 1 px.
pub fn crop_box(image: &RgbImage, bbox: &BoundingBox, out_w: u32, out_h: u32) -> RgbImage {
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let mut x = bbox.left();
    let mut y = bbox.top();
    x = x.clamp(1.0 - bbox.width, iw - 1.0);
    y = y.clamp(1.0 - bbox.height, ih - 1.0);
    raster::crop_resize(image, x, y, bbox.width, bbox.height, out_w, out_h)
}

/// A test image with a ground-truth box around the query object.
#[derive(Debug, Clone)]
pub struct NoiseScene {
    pub image: RgbImage,
    pub bbox: BoundingBox,
    pub instance_id: u32,
}

/// Accuracy at each noise level. Every (level, scene) pair draws from its
/// own seed, `derive_seed(seed, ["box-noise", n, scene])`.
pub fn noise_sweep<F>(
    classify: F,
    scenes: &[NoiseScene],
    levels: &[f64],
    seed_v: u64,
    crop: (u32, u32),
) -> Result<Vec<NoisePoint>>
where
    F: Fn(&RgbImage) -> Result<u32> + Sync,
{
    if let Some(n) = levels.iter().find(|n| !(**n >= 0.0)) {
        return Err(Error::invalid(format!("noise level {n} must be >= 0")));
    }
    let mut out = Vec::with_capacity(levels.len());
    for &n in levels {
        let params = BoxNoiseParams::new(n);
        let n_tag = format!("{n}");
        let hits: Vec<bool> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, sc)| {
                let mut rng = seed::rng_from(seed_v, &["box-noise", &n_tag, &i.to_string()]);
                let noise = sample_box_noise(&params, &mut rng)?;
                let noisy = apply_box_noise(&sc.bbox, &noise)?;
                let img = crop_box(&sc.image, &noisy, crop.0, crop.1);
                Ok(classify(&img)? == sc.instance_id)
            })
            .collect::<Result<_>>()?;
        let correct = hits.iter().filter(|h| **h).count();
        out.push(NoisePoint {
            n,
            count: hits.len(),
            correct,
            accuracy: ratio(correct, hits.len()),
        });
    }
    Ok(out)
}

/// First iteration at which each trace reaches `target`.
pub fn convergence_compare(
    traces: &[(String, Vec<(u64, f64)>)],
    target: f64,
) -> Result<Vec<ConvergenceRow>> {
    if traces.is_empty() {
        return Err(Error::invalid("no traces to compare"));
    }
    Ok(traces
        .iter()
        .map(|(name, t)| ConvergenceRow {
            name: name.clone(),
            first_iteration: t.iter().find(|(_, a)| *a >= target).map(|(i, _)| *i),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(az: f64) -> PoseLabel {
        PoseLabel::new(30.0, az).unwrap()
    }

    #[test]
    fn azimuth_cases() {
        assert_eq!(azimuth_difference(&pose(10.0), &pose(350.0)), 20.0);
        assert_eq!(azimuth_difference(&pose(0.0), &pose(180.0)), 180.0);
        assert_eq!(azimuth_difference(&pose(37.0), &pose(212.0)), 175.0);
        assert_eq!(azimuth_difference(&pose(212.0), &pose(37.0)), 175.0);
        assert_eq!(azimuth_difference_deg(5.0, 365.0), 0.0);
    }

    fn rec(qid: usize, train: f64, test: f64, correct: bool, textured: bool) -> QueryRecord {
        QueryRecord {
            query_id: qid,
            true_id: 0,
            predicted: Some(if correct { 0 } else { 1 }),
            correct,
            train_azimuth_deg: Some(train),
            test_azimuth_deg: test,
            elevation_diff_deg: Some(15.0),
            textured,
        }
    }

    #[test]
    fn bins_partition_and_degenerate() {
        let recs: Vec<QueryRecord> = (0..5).map(|i| rec(i, 0.0, 0.0, true, false)).collect();
        let bins = angle_bins(&recs, DEFAULT_BIN_WIDTH_DEG).unwrap();
        assert_eq!(bins.len(), 8);
        assert_eq!(bins[0].accuracy, Some(1.0));
        assert!(bins[1..]
            .iter()
            .all(|b| b.count == 0 && b.accuracy.is_none()));
        let recs: Vec<QueryRecord> = (0..37)
            .map(|i| rec(i, 0.0, i as f64 * 10.0, i % 3 == 0, i % 2 == 0))
            .collect();
        let bins = angle_bins(&recs, 22.5).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 37);
        let last = bins.last().unwrap();
        assert!(last.count > 0 && last.hi_deg == 180.0);
        assert!(angle_bins(&recs, 0.0).is_err());
    }

    #[test]
    fn zero_noise_is_exact() {
        let mut rng = seed::rng(0);
        for _ in 0..100 {
            assert_eq!(
                sample_box_noise(&BoxNoiseParams::new(0.0), &mut rng).unwrap(),
                BoxNoise::NONE
            );
        }
        let bx = BoundingBox::new(10.0, 12.0, 10.0, 10.0).unwrap();
        assert_eq!(apply_box_noise(&bx, &BoxNoise::NONE).unwrap(), bx);
        let big = apply_box_noise(
            &bx,
            &BoxNoise {
                s: 2.0,
                dx: 0.0,
                dy: 0.0,
            },
        )
        .unwrap();
        assert_eq!(
            (big.width, big.height, big.center_x, big.center_y),
            (20.0, 20.0, 10.0, 12.0)
        );
        assert!(apply_box_noise(
            &bx,
            &BoxNoise {
                s: 0.0,
                dx: 0.0,
                dy: 0.0
            }
        )
        .is_err());
        assert!(sample_box_noise(&BoxNoiseParams::new(-1.0), &mut rng).is_err());
    }

    #[test]
    fn noise_composition() {
        let mut rng = seed::rng(4);
        for _ in 0..50 {
            let bx = BoundingBox::new(
                rng.random_range(0.0..50.0),
                rng.random_range(0.0..50.0),
                8.0,
                5.0,
            )
            .unwrap();
            let a = BoxNoise {
                s: rng.random_range(0.5..2.0),
                dx: rng.random_range(-5.0..5.0),
                dy: rng.random_range(-5.0..5.0),
            };
            let b = BoxNoise {
                s: rng.random_range(0.5..2.0),
                dx: rng.random_range(-5.0..5.0),
                dy: rng.random_range(-5.0..5.0),
            };
            let two = apply_box_noise(&apply_box_noise(&bx, &a).unwrap(), &b).unwrap();
            let one = apply_box_noise(
                &bx,
                &BoxNoise {
                    s: a.s * b.s,
                    dx: a.dx + b.dx,
                    dy: a.dy + b.dy,
                },
            )
            .unwrap();
            assert!(
                (two.center_x - one.center_x).abs() < 1e-12
                    && (two.center_y - one.center_y).abs() < 1e-12
            );
            assert!(
                (two.width - one.width).abs() < 1e-12 && (two.height - one.height).abs() < 1e-12
            );
        }
    }

    #[test]
    fn crop_clamps_to_overlap() {
        let img = RgbImage::from_fn(10, 10, |x, _| image::Rgb([x as u8 * 20, 0, 0]));
        let far = BoundingBox::new(-100.0, 5.0, 4.0, 4.0).unwrap();
        let c = crop_box(&img, &far, 4, 4);
        assert_eq!(c.dimensions(), (4, 4));
        // rightmost output column samples image column 0
        assert_eq!(c.get_pixel(3, 0).0[0], 0);
    }

    #[test]
    fn convergence_table() {
        let traces = vec![
            ("hi".to_string(), vec![(0, 1.0), (10, 1.0)]),
            ("lo".to_string(), vec![(0, 0.1), (10, 0.1)]),
            ("a".to_string(), vec![(0, 0.0), (120, 0.95), (340, 0.99)]),
            ("b".to_string(), vec![(0, 0.0), (120, 0.5), (340, 0.91)]),
        ];
        let rows = convergence_compare(&traces, 0.9).unwrap();
        let got: Vec<Option<u64>> = rows.iter().map(|r| r.first_iteration).collect();
        assert_eq!(got, vec![Some(0), None, Some(120), Some(340)]);
        assert!(convergence_compare(&[], 0.5).is_err());
    }

    #[test]
    fn noise_sweep_zero_matches_clean() {
        let scenes: Vec<NoiseScene> = (0..6)
            .map(|i| NoiseScene {
                image: RgbImage::from_fn(24, 24, |x, y| {
                    image::Rgb([((x + y + i) * 9) as u8, i as u8 * 30, 0])
                }),
                bbox: BoundingBox::new(12.0, 12.0, 8.0, 8.0).unwrap(),
                instance_id: i,
            })
            .collect();
        // classifier keyed on the green channel of the crop centre
        let clf = |img: &RgbImage| Ok((img.get_pixel(4, 4).0[1] / 30) as u32);
        let clean = scenes
            .iter()
            .filter(|s| clf(&crop_box(&s.image, &s.bbox, 8, 8)).unwrap() == s.instance_id)
            .count();
        let levels: Vec<f64> = (0..=10).map(f64::from).collect();
        let curve = noise_sweep(clf, &scenes, &levels, 3, (8, 8)).unwrap();
        assert_eq!(curve.len(), 11);
        assert_eq!(curve[0].correct, clean);
        assert!(curve.windows(2).all(|w| w[0].n < w[1].n));
        assert_eq!(
            curve,
            noise_sweep(clf, &scenes, &levels, 3, (8, 8)).unwrap()
        );
    }

    fn folded_normal_mean(mu: f64, sigma: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal as SNormal};
        let phi = SNormal::new(0.0, 1.0).unwrap();
        sigma * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * sigma * sigma)).exp()
            + mu * (1.0 - 2.0 * phi.cdf(-mu / sigma))
    }

    #[test]
    fn noise_moments() {
        let mut rng = seed::rng(11);
        for n in [2.0, 8.0, 20.0] {
            let p = BoxNoiseParams::new(n);
            let draws: Vec<BoxNoise> = (0..40_000)
                .map(|_| sample_box_noise(&p, &mut rng).unwrap())
                .collect();
            let k = draws.len() as f64;
            let mean_s = draws.iter().map(|d| d.s).sum::<f64>() / k;
            let sd = 0.025 * n;
            let expect = folded_normal_mean(1.0, sd);
            assert!(
                (mean_s - expect).abs() < 4.0 * sd / k.sqrt(),
                "n={n} {mean_s} vs {expect}"
            );
            let var_dx = draws.iter().map(|d| d.dx * d.dx).sum::<f64>() / k;
            let sd_dx = var_dx.sqrt();
            assert!((sd_dx / (2.0 * n) - 1.0).abs() < 0.02, "n={n} sd {sd_dx}");
            assert!(draws.iter().all(|d| d.s >= 0.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn azimuth_difference_props(a in -720.0f64..720.0, b in -720.0f64..720.0) {
            let d = azimuth_difference_deg(a, b);
            proptest::prop_assert!((0.0..=180.0).contains(&d));
            proptest::prop_assert_eq!(d, azimuth_difference_deg(b, a));
            proptest::prop_assert!(azimuth_difference_deg(a, a) < 1e-9);
        }
    }
}
