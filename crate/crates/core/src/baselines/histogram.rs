//! Hue/saturation color histograms and the four comparison metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::raster;

pub const HUE_BINS: usize = 50;
pub const SAT_BINS: usize = 60;

const CHI_SQUARED_EPS: f64 = 1e-10;

/// Row-major `[hue][saturation]` bin masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HueSatHistogram {
    hue_bins: usize,
    sat_bins: usize,
    bins: Vec<f64>,
    normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMetric {
    Intersection,
    Correlation,
    ChiSquared,
    Bhattacharyya,
}

impl HistogramMetric {
    pub const ALL: [HistogramMetric; 4] = [
        HistogramMetric::Intersection,
        HistogramMetric::Correlation,
        HistogramMetric::ChiSquared,
        HistogramMetric::Bhattacharyya,
    ];

    /// Orient a raw metric value so that larger means more similar.
    ///
    /// Chi-squared (with the 1/2 factor) and Bhattacharyya distance both lie
    /// in `[0, 1]` for normalized inputs, so `1 - d` keeps self-similarity at
    /// 1 and disjoint supports at 0.
    pub fn similarity(self, raw: f64) -> f64 {
        match self {
            HistogramMetric::Intersection | HistogramMetric::Correlation => raw,
            HistogramMetric::ChiSquared | HistogramMetric::Bhattacharyya => 1.0 - raw,
        }
    }
}

impl std::str::FromStr for HistogramMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(Self::Intersection),
            "correlation" => Ok(Self::Correlation),
            "chi_squared" | "chi-squared" | "chisquared" => Ok(Self::ChiSquared),
            "bhattacharyya" => Ok(Self::Bhattacharyya),
            other => Err(Error::Config(format!("unknown histogram metric {other:?}"))),
        }
    }
}

/// Hexcone RGB to (hue in degrees `[0, 360)`, saturation `[0, 1]`).
/// Achromatic pixels get hue 0.
pub fn rgb_to_hue_sat(rgb: [u8; 3]) -> (f64, f64) {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let sat = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma == 0.0 {
        return (0.0, sat);
    }
    let hue = if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    (hue.rem_euclid(360.0), sat)
}

impl HueSatHistogram {
    pub fn empty(hue_bins: usize, sat_bins: usize) -> Self {
        Self {
            hue_bins,
            sat_bins,
            bins: vec![0.0; hue_bins * sat_bins],
            normalized: false,
        }
    }

    /// Wrap raw bin masses; normalizes when they sum to something positive.
    pub fn from_bins(hue_bins: usize, sat_bins: usize, bins: Vec<f64>) -> Result<Self> {
        if bins.len() != hue_bins * sat_bins {
            return Err(Error::Dimension(format!(
                "{} bins for a {hue_bins}x{sat_bins} histogram",
                bins.len()
            )));
        }
        if bins.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("histogram bins must be non-negative"));
        }
        let mut h = Self {
            hue_bins,
            sat_bins,
            bins,
            normalized: false,
        };
        h.normalize()?;
        Ok(h)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.hue_bins, self.sat_bins)
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, hue_bin: usize, sat_bin: usize) -> f64 {
        self.bins[hue_bin * self.sat_bins + sat_bin]
    }

    fn add_pixel(&mut self, rgb: [u8; 3]) {
        let (h, s) = rgb_to_hue_sat(rgb);
        let hb = ((h / 360.0 * self.hue_bins as f64) as usize).min(self.hue_bins - 1);
        let sb = ((s * self.sat_bins as f64) as usize).min(self.sat_bins - 1);
        self.bins[hb * self.sat_bins + sb] += 1.0;
        self.normalized = false;
    }

    fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.bins.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("histogram has no mass".into()));
        }
        for v in &mut self.bins {
            *v /= total;
        }
        self.normalized = true;
        Ok(())
    }
}

/// Normalized hue/saturation histogram over foreground pixels.
pub fn compute_hs_histogram(sample: &ImageSample) -> Result<HueSatHistogram> {
    sample.validate()?;
    let mut hist = HueSatHistogram::empty(HUE_BINS, SAT_BINS);
    let (w, h) = sample.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Degenerate("image has no pixels".into()));
    }
    match &sample.mask {
        Some(mask) => {
            for (p, m) in sample.pixels.pixels().zip(mask.pixels()) {
                if raster::is_foreground(m.0[0]) {
                    hist.add_pixel(p.0);
                }
            }
        }
        None => sample.pixels.pixels().for_each(|p| hist.add_pixel(p.0)),
    }
    hist.normalize()
        .map_err(|_| Error::Degenerate("mask selects no foreground pixels".into()))?;
    Ok(hist)
}

/// Raw metric value; see [`HistogramMetric::similarity`] for orientation.
pub fn compare_histograms(
    a: &HueSatHistogram,
    b: &HueSatHistogram,
    metric: HistogramMetric,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "histogram shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.normalized || !b.normalized {
        return Err(Error::Precondition("histograms must be normalized".into()));
    }
    let (a, b) = (&a.bins, &b.bins);
    let value = match metric {
        HistogramMetric::Intersection => a.iter().zip(b).map(|(x, y)| x.min(*y)).sum(),
        HistogramMetric::ChiSquared => {
            0.5 * a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2) / (x + y + CHI_SQUARED_EPS))
                .sum::<f64>()
        }
        HistogramMetric::Bhattacharyya => {
            // divide out the totals so rounding in normalization cancels
            let bc: f64 = a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum::<f64>()
                / (a.iter().sum::<f64>() * b.iter().sum::<f64>()).sqrt();
            (1.0 - bc).max(0.0).sqrt()
        }
        HistogramMetric::Correlation => {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (x, y) in a.iter().zip(b) {
                cov += (x - ma) * (y - mb);
                va += (x - ma).powi(2);
                vb += (y - mb).powi(2);
            }
            let denom = (va * vb).sqrt();
            if denom > 0.0 {
                cov / denom
            } else if a == b {
                1.0
            } else {
                0.0
            }
        }
    };
    Ok(value)
}

/// One-shot gallery of precomputed histograms.
#[derive(Debug, Clone)]
pub struct HistogramClassifier {
    metric: HistogramMetric,
    gallery: Vec<(u32, HueSatHistogram)>,
}

impl HistogramClassifier {
    pub fn new(gallery: &[ImageSample], metric: HistogramMetric) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::invalid("empty gallery"));
        }
        let gallery = gallery
            .iter()
            .map(|s| Ok((s.instance_id, compute_hs_histogram(s)?)))
            .collect::<Result<_>>()?;
        Ok(Self { metric, gallery })
    }

    pub fn classify(&self, query: &ImageSample) -> Result<u32> {
        let q = compute_hs_histogram(query)?;
        let scores = self
            .gallery
            .iter()
            .map(|(id, h)| {
                Ok((
                    *id,
                    self.metric
                        .similarity(compare_histograms(&q, h, self.metric)?),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(super::argmax_lowest_id(&scores).expect("gallery is non-empty"))
    }
}

/// Highest-similarity gallery instance; ties go to the lowest id.
pub fn histogram_classify(
    query: &ImageSample,
    gallery: &[ImageSample],
    metric: HistogramMetric,
) -> Result<u32> {
    HistogramClassifier::new(gallery, metric)?.classify(query)
}
