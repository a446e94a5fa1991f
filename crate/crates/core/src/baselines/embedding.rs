//! Nearest-neighbor and one-vs-one linear classifiers over embeddings.

use serde::{Deserialize, Serialize};

use super::argmax_lowest_id;
use crate::error::{Error, Result};

pub const DEFAULT_OVO_EPOCHS: usize = 200;
pub const DEFAULT_OVO_C: f64 = 1.0;
pub const DEFAULT_OVO_STEP: f64 = 0.1;

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum()
}

fn check_gallery(gallery: &[(Vec<f32>, u32)]) -> Result<usize> {
    let first = gallery
        .first()
        .ok_or_else(|| Error::invalid("empty gallery"))?;
    let d = first.0.len();
    if let Some((v, id)) = gallery.iter().find(|(v, _)| v.len() != d) {
        return Err(Error::Dimension(format!(
            "gallery entry {id} has dimension {}, expected {d}",
            v.len()
        )));
    }
    Ok(d)
}

/// Label of the Euclidean-nearest gallery vector; ties go to the lowest label.
pub fn knn_classify(query: &[f32], gallery: &[(Vec<f32>, u32)]) -> Result<u32> {
    knn_classify_k(query, gallery, 1)
}

/// Majority vote of the `k` nearest gallery vectors (squared Euclidean).
/// Distance and vote ties are broken by lowest label.
pub fn knn_classify_k(query: &[f32], gallery: &[(Vec<f32>, u32)], k: usize) -> Result<u32> {
    let d = check_gallery(gallery)?;
    if query.len() != d {
        return Err(Error::Dimension(format!(
            "query dimension {} vs gallery {d}",
            query.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut dist: Vec<(f64, u32)> = gallery
        .iter()
        .map(|(v, id)| (sq_dist(query, v), *id))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: std::collections::BTreeMap<u32, f64> = Default::default();
    for (_, id) in dist.iter().take(k) {
        *votes.entry(*id).or_default() += 1.0;
    }
    let scored: Vec<(u32, f64)> = votes.into_iter().collect();
    Ok(argmax_lowest_id(&scored).expect("k >= 1"))
}

/// Step size at epoch `t` is `step_size / sqrt(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearClassifierConfig {
    pub c_value: f64,
    pub epochs: usize,
    pub step_size: f64,
}

impl Default for LinearClassifierConfig {
    fn default() -> Self {
        Self {
            c_value: DEFAULT_OVO_C,
            epochs: DEFAULT_OVO_EPOCHS,
            step_size: DEFAULT_OVO_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseLinear {
    pub positive: u32,
    pub negative: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// One-vs-one linear SVMs trained by full-batch hinge-loss subgradient
/// descent. Deterministic: no sampling is involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvoClassifier {
    pub classes: Vec<u32>,
    pub machines: Vec<PairwiseLinear>,
}

fn train_pair(
    pos: &[&[f32]],
    neg: &[&[f32]],
    dim: usize,
    params: &LinearClassifierConfig,
) -> (Vec<f64>, f64) {
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let n = (pos.len() + neg.len()) as f64;
    for t in 1..=params.epochs {
        let eta = params.step_size / (t as f64).sqrt();
        // objective: 0.5 |w|^2 + C * mean(hinge)
        let mut gw = w.clone();
        let mut gb = 0.0;
        for (set, y) in [(pos, 1.0), (neg, -1.0)] {
            for x in set.iter() {
                let margin = y * (x.iter().zip(&w).map(|(a, b)| *a as f64 * b).sum::<f64>() + b);
                if margin < 1.0 {
                    for (g, a) in gw.iter_mut().zip(x.iter()) {
                        *g -= params.c_value * y * *a as f64 / n;
                    }
                    gb -= params.c_value * y / n;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= eta * g;
        }
        b -= eta * gb;
    }
    (w, b)
}

impl OvoClassifier {
    pub fn train(gallery: &[(Vec<f32>, u32)], params: LinearClassifierConfig) -> Result<Self> {
        let dim = check_gallery(gallery)?;
        if params.epochs == 0 || params.step_size <= 0.0 || params.c_value <= 0.0 {
            return Err(Error::invalid(
                "linear classifier needs positive epochs, step_size and c_value",
            ));
        }
        let mut classes: Vec<u32> = gallery.iter().map(|(_, c)| *c).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid(
                "one-vs-one training needs at least two classes",
            ));
        }
        let mut machines = Vec::new();
        for (i, &p) in classes.iter().enumerate() {
            for &q in &classes[i + 1..] {
                let pos: Vec<&[f32]> = gallery
                    .iter()
                    .filter(|(_, c)| *c == p)
                    .map(|(v, _)| v.as_slice())
                    .collect();
                let neg: Vec<&[f32]> = gallery
                    .iter()
                    .filter(|(_, c)| *c == q)
                    .map(|(v, _)| v.as_slice())
                    .collect();
                let (weights, bias) = train_pair(&pos, &neg, dim, &params);
                machines.push(PairwiseLinear {
                    positive: p,
                    negative: q,
                    weights,
                    bias,
                });
            }
        }
        Ok(Self { classes, machines })
    }

    pub fn dim(&self) -> Option<usize> {
        self.machines.first().map(|m| m.weights.len())
    }

    /// Pairwise vote; ties go to the lowest class id.
    pub fn classify(&self, query: &[f32]) -> Result<u32> {
        if let Some(d) = self.dim() {
            if query.len() != d {
                return Err(Error::Dimension(format!(
                    "query dimension {} vs {d}",
                    query.len()
                )));
            }
        }
        let mut votes: Vec<(u32, f64)> = self.classes.iter().map(|&c| (c, 0.0)).collect();
        for m in &self.machines {
            let s = query
                .iter()
                .zip(&m.weights)
                .map(|(a, b)| *a as f64 * b)
                .sum::<f64>()
                + m.bias;
            let winner = if s >= 0.0 { m.positive } else { m.negative };
            let slot = self.classes.binary_search(&winner).expect("known class");
            votes[slot].1 += 1.0;
        }
        argmax_lowest_id(&votes).ok_or_else(|| Error::invalid("classifier has no classes"))
    }
}

pub fn train_ovo_linear(
    gallery: &[(Vec<f32>, u32)],
    config: LinearClassifierConfig,
) -> Result<OvoClassifier> {
    OvoClassifier::train(gallery, config)
}

pub fn classify_ovo(classifier: &OvoClassifier, query: &[f32]) -> Result<u32> {
    classifier.classify(query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn knn_basic_cases() {
        let g = vec![(vec![1.0, 0.0], 0), (vec![0.0, 2.0], 1)];
        assert_eq!(knn_classify(&[0.0, 0.0], &g).unwrap(), 0);
        assert_eq!(knn_classify(&[0.0, 2.0], &g).unwrap(), 1);
        assert!(knn_classify(&[0.0], &g).is_err());
        assert!(knn_classify(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn knn_ties_go_to_lowest_id() {
        let g = vec![(vec![1.0], 7), (vec![-1.0], 2)];
        assert_eq!(knn_classify(&[0.0], &g).unwrap(), 2);
        let g = vec![
            (vec![0.0, 0.0], 3),
            (vec![1.0, 0.0], 1),
            (vec![0.0, 1.0], 2),
        ];
        assert_eq!(knn_classify_k(&[0.5, 0.5], &g, 2).unwrap(), 1);
    }

    #[test]
    fn knn_agrees_with_linear_scan() {
        let mut rng = seed::rng(5);
        let g: Vec<(Vec<f32>, u32)> = (0..100)
            .map(|i| ((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), i))
            .collect();
        for _ in 0..1000 {
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut best = (f64::INFINITY, u32::MAX);
            for (v, id) in &g {
                let d: f64 = v
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                if d < best.0 || (d == best.0 && *id < best.1) {
                    best = (d, *id);
                }
            }
            assert_eq!(knn_classify(&q, &g).unwrap(), best.1);
        }
    }

    #[test]
    fn ovo_single_example_pair() {
        let g = vec![(vec![1.0, 1.0], 4), (vec![-1.0, -0.5], 9)];
        let clf = train_ovo_linear(&g, LinearClassifierConfig::default()).unwrap();
        assert_eq!(classify_ovo(&clf, &g[0].0).unwrap(), 4);
        assert_eq!(classify_ovo(&clf, &g[1].0).unwrap(), 9);
        assert!(train_ovo_linear(&g[..1], LinearClassifierConfig::default()).is_err());
        let bad = LinearClassifierConfig {
            c_value: 0.0,
            ..Default::default()
        };
        assert!(train_ovo_linear(&g, bad).is_err());
    }

    #[test]
    fn ovo_matches_nearest_mean() {
        let means = [[3.0f32, 0.0], [-3.0, 0.0], [0.0, 3.5]];
        let noise = Normal::new(0.0, 0.4).unwrap();
        let mut rng = seed::rng(11);
        let mut g = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..5 {
                g.push((
                    vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)],
                    c as u32,
                ));
            }
        }
        let clf = train_ovo_linear(&g, LinearClassifierConfig::default()).unwrap();
        for _ in 0..200 {
            let c = rng.random_range(0..3);
            let q = [
                means[c][0] + noise.sample(&mut rng),
                means[c][1] + noise.sample(&mut rng),
            ];
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = (q[0] - means[a][0]).powi(2) + (q[1] - means[a][1]).powi(2);
                    let db = (q[0] - means[b][0]).powi(2) + (q[1] - means[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(clf.classify(&q).unwrap(), nearest as u32);
        }
    }

    #[test]
    fn duplicate_vectors_tie_deterministically() {
        let g = vec![
            (vec![1.0, 0.0], 5),
            (vec![1.0, 0.0], 2),
            (vec![1.0, 0.0], 8),
        ];
        let clf = train_ovo_linear(&g, LinearClassifierConfig::default()).unwrap();
        let first = clf.classify(&[1.0, 0.0]).unwrap();
        assert_eq!(first, clf.classify(&[1.0, 0.0]).unwrap());
        assert_eq!(
            first,
            train_ovo_linear(&g, LinearClassifierConfig::default())
                .unwrap()
                .classify(&[1.0, 0.0])
                .unwrap()
        );
    }
}
