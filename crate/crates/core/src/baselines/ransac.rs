//! Homography RANSAC over ratio-test survivors.

use rand::seq::index;

use super::keypoints::{Keypoint, MatchSet};
use crate::augment::Homography;
use crate::error::{Error, Result};
use crate::seed::Rng;

pub const DEFAULT_INLIER_THRESHOLD_PX: f64 = 3.0;
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub iterations: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold_px: DEFAULT_INLIER_THRESHOLD_PX,
            iterations: DEFAULT_RANSAC_ITERATIONS,
        }
    }
}

fn point(k: &Keypoint) -> (f64, f64) {
    (k.x, k.y)
}

/// Pair indices (into `matches.pairs`) whose forward reprojection error
/// under `h` is below `threshold`.
pub fn inliers_for(
    h: &Homography,
    matches: &MatchSet,
    candidates: &[usize],
    keypoints_a: &[Keypoint],
    keypoints_b: &[Keypoint],
    threshold: f64,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| {
            let p = &matches.pairs[i];
            let (ax, ay) = point(&keypoints_a[p.index_a]);
            let (bx, by) = point(&keypoints_b[p.index_b]);
            match h.apply(ax, ay) {
                Some((x, y)) => ((x - bx).powi(2) + (y - by).powi(2)).sqrt() < threshold,
                None => false,
            }
        })
        .collect()
}

/// Fill `matches.inliers` and `matches.model` with the best 4-point
/// hypothesis found among the ratio-test survivors, refit on its inliers.
/// Fewer than four survivors leaves the inlier set empty.
pub fn ransac_verify(
    mut matches: MatchSet,
    keypoints_a: &[Keypoint],
    keypoints_b: &[Keypoint],
    params: RansacParams,
    rng: &mut Rng,
) -> Result<MatchSet> {
    if params.threshold_px <= 0.0 || params.iterations == 0 {
        return Err(Error::invalid(
            "RANSAC needs a positive threshold and iteration count",
        ));
    }
    for p in &matches.pairs {
        if p.index_a >= keypoints_a.len() || p.index_b >= keypoints_b.len() {
            return Err(Error::invalid("match refers to a missing keypoint"));
        }
    }
    matches.inliers.clear();
    matches.model = None;
    let survivors = matches.ratio_survivors.clone();
    if survivors.len() < 4 {
        return Ok(matches);
    }
    let mut best: Vec<usize> = Vec::new();
    let mut best_h = None;
    for _ in 0..params.iterations {
        let pick = index::sample(rng, survivors.len(), 4);
        let mut src = [(0.0, 0.0); 4];
        let mut dst = [(0.0, 0.0); 4];
        for (slot, idx) in pick.iter().enumerate() {
            let p = &matches.pairs[survivors[idx]];
            src[slot] = point(&keypoints_a[p.index_a]);
            dst[slot] = point(&keypoints_b[p.index_b]);
        }
        let Ok(h) = Homography::from_four_points(&src, &dst) else {
            continue;
        };
        let inl = inliers_for(
            &h,
            &matches,
            &survivors,
            keypoints_a,
            keypoints_b,
            params.threshold_px,
        );
        if inl.len() > best.len() {
            best = inl;
            best_h = Some(h);
            if best.len() == survivors.len() {
                break;
            }
        }
    }
    if best.len() >= 4 {
        let src: Vec<(f64, f64)> = best
            .iter()
            .map(|&i| point(&keypoints_a[matches.pairs[i].index_a]))
            .collect();
        let dst: Vec<(f64, f64)> = best
            .iter()
            .map(|&i| point(&keypoints_b[matches.pairs[i].index_b]))
            .collect();
        if let Ok(refit) = Homography::fit(&src, &dst) {
            best_h = Some(refit);
        }
    }
    matches.inliers = best;
    matches.model = best_h;
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::keypoints::MatchPair;
    use crate::seed;
    use rand::Rng as _;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            score: 1.0,
            scale: 2.0,
        }
    }

    fn planted(
        n_in: usize,
        n_out: usize,
        seed_v: u64,
    ) -> (MatchSet, Vec<Keypoint>, Vec<Keypoint>, Homography) {
        let h =
            Homography::new([[1.05, 0.04, 6.0], [-0.03, 0.97, -4.0], [2e-4, -1e-4, 1.0]]).unwrap();
        let mut rng = seed::rng(seed_v);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n_in {
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let (u, v) = h.apply(x, y).unwrap();
            a.push(kp(x, y));
            b.push(kp(u, v));
        }
        for _ in 0..n_out {
            a.push(kp(
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            ));
            b.push(kp(
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            ));
        }
        let pairs: Vec<MatchPair> = (0..a.len())
            .map(|i| MatchPair {
                index_a: i,
                index_b: i,
                distance: 0.1,
                second_distance: 0.5,
            })
            .collect();
        let survivors = (0..pairs.len()).collect();
        (
            MatchSet {
                pairs,
                ratio_survivors: survivors,
                inliers: vec![],
                model: None,
            },
            a,
            b,
            h,
        )
    }

    #[test]
    fn recovers_planted_homography() {
        let (m, a, b, truth) = planted(30, 20, 1);
        let out = ransac_verify(m, &a, &b, RansacParams::default(), &mut seed::rng(2)).unwrap();
        assert!(out.check_invariants());
        for i in 0..30 {
            assert!(out.inliers.contains(&i));
        }
        // random outliers almost never fall within 3 px by chance
        assert!(out.inliers.len() <= 32);
        let fitted = out.model.unwrap();
        let (x, y) = fitted.apply(50.0, 50.0).unwrap();
        let (u, v) = truth.apply(50.0, 50.0).unwrap();
        assert!((x - u).abs() < 1e-6 && (y - v).abs() < 1e-6);
    }

    #[test]
    fn larger_threshold_never_fewer_inliers() {
        let (m, a, b, _) = planted(15, 25, 5);
        let h = ransac_verify(
            m.clone(),
            &a,
            &b,
            RansacParams::default(),
            &mut seed::rng(3),
        )
        .unwrap()
        .model
        .unwrap();
        let surv = m.ratio_survivors.clone();
        let mut prev = 0;
        for t in [0.5, 1.0, 3.0, 10.0, 50.0, 200.0] {
            let n = inliers_for(&h, &m, &surv, &a, &b, t).len();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn eight_exact_four_outliers() {
        let (m, a, b, truth) = planted(8, 4, 17);
        let out = ransac_verify(m, &a, &b, RansacParams::default(), &mut seed::rng(4)).unwrap();
        assert_eq!(out.inliers, (0..8).collect::<Vec<_>>());
        assert!(out.model.unwrap().max_abs_diff(&truth) < 1e-6);
    }

    #[test]
    fn identity_correspondences() {
        let a: Vec<Keypoint> = [
            (1.0, 2.0),
            (30.0, 4.0),
            (28.0, 25.0),
            (3.0, 31.0),
            (15.0, 15.0),
        ]
        .iter()
        .map(|&(x, y)| kp(x, y))
        .collect();
        let pairs = (0..5)
            .map(|i| MatchPair {
                index_a: i,
                index_b: i,
                distance: 0.0,
                second_distance: 1.0,
            })
            .collect();
        let m = MatchSet {
            pairs,
            ratio_survivors: (0..5).collect(),
            inliers: vec![],
            model: None,
        };
        let out = ransac_verify(m, &a, &a, RansacParams::default(), &mut seed::rng(0)).unwrap();
        assert_eq!(out.inliers.len(), 5);
        assert!(out.model.unwrap().max_abs_diff(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn too_few_survivors() {
        let (mut m, a, b, _) = planted(3, 0, 9);
        m.ratio_survivors.truncate(3);
        let out = ransac_verify(m, &a, &b, RansacParams::default(), &mut seed::rng(1)).unwrap();
        assert!(out.inliers.is_empty());
        assert!(out.model.is_none());
    }
}
