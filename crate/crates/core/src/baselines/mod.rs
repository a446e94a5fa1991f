//! Classical one-shot classifiers used as reference points for the network.

pub mod cache;
pub mod embedding;
pub mod histogram;
pub mod keypoints;
pub mod ransac;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::seed;

pub use embedding::{
    classify_ovo, knn_classify, knn_classify_k, train_ovo_linear, LinearClassifierConfig,
    OvoClassifier,
};
pub use histogram::{
    compare_histograms, compute_hs_histogram, histogram_classify, HistogramClassifier,
    HistogramMetric, HueSatHistogram,
};
pub use keypoints::{
    describe_keypoints, detect_keypoints, match_ratio_test, Descriptor, Keypoint, MatchPair,
    MatchSet,
};
pub use ransac::{ransac_verify, RansacParams};

/// Highest score wins; equal scores go to the lowest id.
pub(crate) fn argmax_lowest_id(scores: &[(u32, f64)]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for &(id, s) in scores {
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) if s > bs || (s == bs && id < bid) => Some((id, s)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchScore {
    #[default]
    Count,
    /// Count divided by the number of query keypoints.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointConfig {
    pub ratio: f64,
    pub use_ransac: bool,
    pub threshold_px: f64,
    pub iterations: usize,
    pub max_keypoints: usize,
    pub patch_radius: u32,
    pub score: MatchScore,
    pub seed: u64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            ratio: 0.6,
            use_ransac: false,
            threshold_px: ransac::DEFAULT_INLIER_THRESHOLD_PX,
            iterations: ransac::DEFAULT_RANSAC_ITERATIONS,
            max_keypoints: 200,
            patch_radius: keypoints::DEFAULT_PATCH_RADIUS,
            score: MatchScore::Count,
            seed: 0,
        }
    }
}

impl KeypointConfig {
    /// Ratio 0.7 with RANSAC verification.
    pub fn with_ransac() -> Self {
        Self {
            ratio: 0.7,
            use_ransac: true,
            ..Self::default()
        }
    }
}

struct Features {
    keypoints: Vec<Keypoint>,
    vectors: Vec<Vec<f64>>,
    detected: usize,
}

fn features(sample: &ImageSample, cfg: &KeypointConfig) -> Features {
    let detected = detect_keypoints(&sample.pixels, cfg.max_keypoints);
    let descs = describe_keypoints(&sample.pixels, &detected, cfg.patch_radius);
    Features {
        detected: detected.len(),
        keypoints: descs.iter().map(|d| d.keypoint).collect(),
        vectors: descs.into_iter().map(|d| d.vector).collect(),
    }
}

/// Ratio-test matcher with optional RANSAC; gallery features are computed once.
pub struct KeypointClassifier {
    config: KeypointConfig,
    gallery: Vec<(u32, Features)>,
}

impl KeypointClassifier {
    pub fn new(gallery: &[ImageSample], config: KeypointConfig) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::invalid("empty gallery"));
        }
        if !(config.ratio > 0.0 && config.ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "ratio {} outside (0, 1]",
                config.ratio
            )));
        }
        let gallery = gallery
            .iter()
            .map(|s| (s.instance_id, features(s, &config)))
            .collect();
        Ok(Self { config, gallery })
    }

    /// Match score against every gallery entry, in gallery order.
    pub fn scores(&self, query: &ImageSample) -> Result<Vec<(u32, f64)>> {
        let q = features(query, &self.config);
        let mut out = Vec::with_capacity(self.gallery.len());
        for (id, g) in &self.gallery {
            let count = if q.vectors.is_empty() || g.vectors.len() < 2 {
                0
            } else {
                let m = match_ratio_test(&q.vectors, &g.vectors, self.config.ratio)?;
                if self.config.use_ransac {
                    let mut rng = seed::rng_from(self.config.seed, &["ransac", &id.to_string()]);
                    let params = RansacParams {
                        threshold_px: self.config.threshold_px,
                        iterations: self.config.iterations,
                    };
                    ransac_verify(m, &q.keypoints, &g.keypoints, params, &mut rng)?
                        .inliers
                        .len()
                } else {
                    m.ratio_survivors.len()
                }
            };
            let score = match self.config.score {
                MatchScore::Count => count as f64,
                MatchScore::Normalized => count as f64 / q.detected.max(1) as f64,
            };
            out.push((*id, score));
        }
        Ok(out)
    }

    pub fn classify(&self, query: &ImageSample) -> Result<u32> {
        let scores = self.scores(query)?;
        Ok(argmax_lowest_id(&scores).expect("gallery is non-empty"))
    }
}

pub fn keypoint_classify(
    query: &ImageSample,
    gallery: &[ImageSample],
    config: KeypointConfig,
) -> Result<u32> {
    KeypointClassifier::new(gallery, config)?.classify(query)
}
