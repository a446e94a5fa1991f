//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as SNormal};

use instarec::augment::{Homography, DEFAULT_PERSPECTIVE_MAGNITUDE};
use instarec::baselines::{
    compare_histograms, knn_classify, ransac_verify, HistogramClassifier, HistogramMetric,
    HueSatHistogram, Keypoint, MatchPair, MatchSet, RansacParams,
};
use instarec::cli::{self, composite_queries, default_stages, BackgroundMode, StageConfig};
use instarec::dataset::{make_one_shot_split, DatasetSplit, ImageSample};
use instarec::evalkit::{
    angle_bins, evaluate, sample_box_noise, BoxNoise, BoxNoiseParams, EvaluationReport,
    DEFAULT_BIN_WIDTH_DEG,
};
use instarec::network::{gradient_check, ArchConfig, Batch, LayerKind, LayerSpec, Network, Shape};
use instarec::pipeline::{self, run_stage, Labeling, StageTrace};
use instarec::seed;
use instarec::synth::{synthesize, SynthConfig};

const SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
/// Pinned after the first calibrated run (observed mean margin 7.8 points).
const MV_MARGIN: f64 = 0.05;
const MV_BUDGET: Duration = Duration::from_secs(15 * 60);
const MIN_SEED_WINS: usize = 4;
const CONVERGENCE_FRACTION: f64 = 0.8;
const NOISE_DRAWS: usize = 100_000;
const NOISE_BUDGET: Duration = Duration::from_secs(5);
const RANSAC_TRIALS: u64 = 100;
const AXIOM_PAIRS: usize = 1000;

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!(
        "[{}] criterion {:>2}: {} | {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.detail
    );
}

fn random_batch(shape: Shape, n: usize, seed_v: u64) -> Batch<f64> {
    let mut rng = seed::rng(seed_v);
    Batch::new(
        shape,
        (0..shape.len() * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let s = Shape::new(2, 6, 6);
    let mut cases: Vec<(&str, Network<f64>)> = Vec::new();
    let mk = |specs: Vec<LayerSpec>, input: Shape, seed_v: u64| {
        Network::new(input, specs, &mut seed::rng(seed_v)).unwrap()
    };
    cases.push(("fc", mk(vec![LayerSpec::fc("head", 3)], s, 1)));
    cases.push((
        "conv",
        mk(
            vec![LayerSpec::conv("c", 3, 3), LayerSpec::fc("head", 3)],
            s,
            2,
        ),
    ));
    cases.push((
        "conv-strided-padded",
        mk(
            vec![
                LayerSpec::new(
                    "c",
                    LayerKind::Conv {
                        filters: 2,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                ),
                LayerSpec::fc("head", 3),
            ],
            s,
            3,
        ),
    ));
    cases.push((
        "relu",
        mk(
            vec![
                LayerSpec::fc("f", 6),
                LayerSpec::relu("r"),
                LayerSpec::fc("head", 3),
            ],
            s,
            4,
        ),
    ));
    cases.push((
        "maxpool",
        mk(
            vec![LayerSpec::pool("p", 2), LayerSpec::fc("head", 3)],
            s,
            5,
        ),
    ));
    cases.push((
        "default-arch",
        ArchConfig::default().build(3, &mut seed::rng(6)).unwrap(),
    ));
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, net)) in cases.iter().enumerate() {
        let b = random_batch(net.input_shape(), 2, 100 + i as u64);
        let r = gradient_check(net, &b, &[0, 2], 1e-3, 40).unwrap();
        ok &= r.checked > 0 && r.max_rel_error < GRAD_TOL;
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{name}={:.1e}", r.max_rel_error));
    }
    let el = t.elapsed();
    Outcome {
        id: 1,
        title: "gradient check",
        pass: ok && el < GRAD_BUDGET,
        detail: format!(
            "max rel err {worst:.2e} < {GRAD_TOL:e} [{}]; {:.1}s < {}s",
            parts.join(" "),
            el.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    }
}

struct SeedRuns {
    no_mv: f64,
    mv: f64,
    pose: f64,
    mv_composited: f64,
    black_composited: f64,
    mv_trace: StageTrace,
    warp_trace: StageTrace,
}

fn first_reaching(t: &StageTrace, target: f64) -> Option<u64> {
    t.accuracy_series()
        .iter()
        .find(|p| p.1 >= target)
        .map(|p| p.0)
}

fn fmt_iter(i: Option<u64>) -> String {
    i.map_or("never".into(), |v| v.to_string())
}

/// Criteria 2-5 share one stage-1 network and the per-seed stage runs.
fn trend_criteria() -> (Vec<Outcome>, Option<EvaluationReport>) {
    let t0 = Instant::now();
    let ds = synthesize(&SynthConfig::default(), 0).unwrap();
    let stages = default_stages();
    let (class, mv, one) = (&stages[0], &stages[1], &stages[2]);
    let class_split = DatasetSplit {
        num_classes: 0,
        train: ds.classlevel.clone(),
        test: Vec::new(),
    };
    let init = ArchConfig::default()
        .build(2, &mut seed::rng_from(0, &["init"]))
        .unwrap();
    let (body, _) = run_stage(init, &class.plan(class_split, None, 0).unwrap()).unwrap();
    let oneshot = make_one_shot_split(&ds.singleview, 30.0, 45.0).unwrap();
    let mv_split = DatasetSplit {
        num_classes: 24,
        train: ds.multiview.clone(),
        test: Vec::new(),
    };
    let bgs = Arc::new(ds.backgrounds_train.clone());
    let stage1_time = t0.elapsed();
    let mut mv_time = Duration::ZERO;

    let run = |stages: &[&StageConfig], seed_v: u64| -> (Network<f32>, StageTrace) {
        let mut net = body.clone();
        let mut trace = None;
        for s in stages {
            let split = if s.name == one.name {
                oneshot.clone()
            } else {
                mv_split.clone()
            };
            let plan = s.plan(split, Some(bgs.clone()), seed_v).unwrap();
            let (n, t) = run_stage(net, &plan).unwrap();
            net = n;
            trace = Some(t);
        }
        (net, trace.unwrap())
    };
    let mut pose_stage = mv.clone();
    pose_stage.labeling = Labeling::PoseClass;
    let mut black_stage = mv.clone();
    black_stage.background = BackgroundMode::Black;
    let mut warp_stage = one.clone();
    warp_stage.augment = warp_stage
        .augment
        .clone()
        .with_perspective(DEFAULT_PERSPECTIVE_MAGNITUDE);

    let mut runs = Vec::new();
    let mut report = None;
    for s in 0..SEEDS {
        let t = Instant::now();
        let (_, a) = run(&[one], s);
        let (mv_net, b) = run(&[mv, one], s);
        mv_time += t.elapsed();
        let (_, c) = run(&[&pose_stage, one], s);
        let (black_net, _) = run(&[&black_stage, one], s);
        let (_, e) = run(&[&warp_stage], s);
        let comp = composite_queries(
            &oneshot.test,
            &ds.backgrounds_test,
            seed::derive_seed(s, &["eval"]),
        )
        .unwrap();
        let r = SeedRuns {
            no_mv: a.final_accuracy().unwrap(),
            mv: b.final_accuracy().unwrap(),
            pose: c.final_accuracy().unwrap(),
            mv_composited: pipeline::accuracy(&mv_net, &comp).unwrap(),
            black_composited: pipeline::accuracy(&black_net, &comp).unwrap(),
            mv_trace: b,
            warp_trace: e,
        };
        println!(
            "  seed {s}: no-mv {:.3} mv {:.3} pose-class {:.3} | composited mv {:.3} black {:.3}",
            r.no_mv, r.mv, r.pose, r.mv_composited, r.black_composited
        );
        if s == 0 {
            let preds = pipeline::predict(&mv_net, &oneshot.test).unwrap();
            let lookup: std::collections::HashMap<usize, u32> = oneshot
                .test
                .iter()
                .zip(preds)
                .map(|(q, p)| (q as *const ImageSample as usize, p))
                .collect();
            let mut rep = evaluate(
                "mv",
                |q| Ok(lookup[&(q as *const ImageSample as usize)]),
                &oneshot,
            );
            rep.angle_curve = Some(angle_bins(&rep.records, DEFAULT_BIN_WIDTH_DEG).unwrap());
            report = Some(rep);
        }
        runs.push(r);
    }
    let n = runs.len() as f64;
    let mean_a = runs.iter().map(|r| r.no_mv).sum::<f64>() / n;
    let mean_b = runs.iter().map(|r| r.mv).sum::<f64>() / n;
    let budget = stage1_time + mv_time;
    let c2 = Outcome {
        id: 2,
        title: "multi-view pre-training benefit",
        pass: mean_b - mean_a >= MV_MARGIN && budget < MV_BUDGET,
        detail: format!(
            "mean one-shot acc 3-stage {mean_b:.3} vs 2-stage {mean_a:.3}, margin {:.3} >= {MV_MARGIN}; {:.0}s < {}s",
            mean_b - mean_a,
            budget.as_secs_f64(),
            MV_BUDGET.as_secs()
        ),
    };
    let wins3 = runs.iter().filter(|r| r.mv > r.pose).count();
    let c3 = Outcome {
        id: 3,
        title: "instance vs pose-class labeling",
        pass: wins3 >= MIN_SEED_WINS,
        detail: format!("instance labeling wins {wins3}/{SEEDS} seeds (need {MIN_SEED_WINS})"),
    };
    let wins4 = runs
        .iter()
        .filter(|r| r.mv_composited > r.black_composited)
        .count();
    let c4 = Outcome {
        id: 4,
        title: "random vs black background (composited tests)",
        pass: wins4 >= MIN_SEED_WINS,
        detail: format!("random background wins {wins4}/{SEEDS} seeds (need {MIN_SEED_WINS})"),
    };
    let mut conv = Vec::new();
    let mut conv_common = Vec::new();
    let mut wins5 = 0;
    for r in &runs {
        let tb = first_reaching(
            &r.mv_trace,
            CONVERGENCE_FRACTION * r.mv_trace.final_accuracy().unwrap(),
        );
        let te = first_reaching(
            &r.warp_trace,
            CONVERGENCE_FRACTION * r.warp_trace.final_accuracy().unwrap(),
        );
        // a run that never reaches its target counts as infinitely slow
        if tb.unwrap_or(u64::MAX) < te.unwrap_or(u64::MAX) {
            wins5 += 1;
        }
        conv.push(format!("{}/{}", fmt_iter(tb), fmt_iter(te)));
        let common = CONVERGENCE_FRACTION * r.mv_trace.final_accuracy().unwrap();
        conv_common.push(format!(
            "{}/{}",
            fmt_iter(first_reaching(&r.mv_trace, common)),
            fmt_iter(first_reaching(&r.warp_trace, common))
        ));
    }
    let c5 = Outcome {
        id: 5,
        title: "convergence, multi-view vs perspective-only",
        pass: wins5 >= MIN_SEED_WINS,
        detail: format!(
            "iterations to {CONVERGENCE_FRACTION} x own final (mv/warp) [{}]; mv faster in {wins5}/{SEEDS} (need {MIN_SEED_WINS}); common target [{}]",
            conv.join(" "),
            conv_common.join(" ")
        ),
    };
    (vec![c2, c3, c4, c5], report)
}

fn folded_normal_mean(mu: f64, sigma: f64) -> f64 {
    let phi = SNormal::new(0.0, 1.0).unwrap();
    sigma * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * sigma * sigma)).exp()
        + mu * (1.0 - 2.0 * phi.cdf(-mu / sigma))
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut rng = seed::rng(6);
    let p = BoxNoiseParams::new(10.0);
    let draws: Vec<BoxNoise> = (0..NOISE_DRAWS)
        .map(|_| sample_box_noise(&p, &mut rng).unwrap())
        .collect();
    let k = draws.len() as f64;
    let mean_dx = draws.iter().map(|d| d.dx).sum::<f64>() / k;
    let sd_dx = (draws.iter().map(|d| (d.dx - mean_dx).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let mean_s = draws.iter().map(|d| d.s).sum::<f64>() / k;
    let expect = folded_normal_mean(1.0, 0.25);
    let rel = (mean_s - expect).abs() / expect;
    let zero = BoxNoiseParams::new(0.0);
    let exact =
        (0..NOISE_DRAWS).all(|_| sample_box_noise(&zero, &mut rng).unwrap() == BoxNoise::NONE);
    let el = t.elapsed();
    Outcome {
        id: 6,
        title: "box-noise statistics",
        pass: (19.6..=20.4).contains(&sd_dx) && rel < 0.01 && exact && el < NOISE_BUDGET,
        detail: format!(
            "sd(dx) {sd_dx:.3} in [19.6, 20.4]; mean(s) {mean_s:.5} vs folded-normal {expect:.5} (rel {rel:.2e} < 1e-2); n=0 exact: {exact}; {:.2}s < {}s",
            el.as_secs_f64(),
            NOISE_BUDGET.as_secs()
        ),
    }
}

fn kp(x: f64, y: f64) -> Keypoint {
    Keypoint {
        x,
        y,
        score: 1.0,
        scale: 2.0,
    }
}

/// `n_in` correspondences under `h` (optionally jittered) followed by
/// `n_out` random pairs.
fn planted(
    h: &Homography,
    n_in: usize,
    n_out: usize,
    noise: f64,
    rng: &mut seed::Rng,
) -> (MatchSet, Vec<Keypoint>, Vec<Keypoint>) {
    let jitter = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..n_in {
        let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let (u, v) = h.apply(x, y).unwrap();
        let (du, dv) = if noise > 0.0 {
            (jitter.sample(rng), jitter.sample(rng))
        } else {
            (0.0, 0.0)
        };
        a.push(kp(x, y));
        b.push(kp(u + du, v + dv));
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
    let ratio_survivors = (0..pairs.len()).collect();
    (
        MatchSet {
            pairs,
            ratio_survivors,
            inliers: Vec::new(),
            model: None,
        },
        a,
        b,
    )
}

/// Exhaustive check over all 4-point samples: the planted model must be the
/// only one reaching `n_in` inliers, else the scene has no unique answer
/// under inlier-count maximization.
fn uniquely_planted(
    m: &MatchSet,
    a: &[Keypoint],
    b: &[Keypoint],
    n_in: usize,
    threshold: f64,
) -> bool {
    let n = m.pairs.len();
    let pts = |i: usize| ((a[i].x, a[i].y), (b[i].x, b[i].y));
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let idx = [i, j, k, l];
                    let src = idx.map(|t| pts(t).0);
                    let dst = idx.map(|t| pts(t).1);
                    let Ok(h) = Homography::from_four_points(&src, &dst) else {
                        continue;
                    };
                    let count = (0..n)
                        .filter(|&t| {
                            let (p, q) = pts(t);
                            h.apply(p.0, p.1).is_some_and(|(x, y)| {
                                ((x - q.0).powi(2) + (y - q.1).powi(2)).sqrt() < threshold
                            })
                        })
                        .count();
                    let planted_sample = idx.iter().all(|&t| t < n_in);
                    if count > n_in || (!planted_sample && count >= n_in) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn criterion_7() -> Outcome {
    let params = RansacParams::default();
    let mut exact_ok = 0;
    let mut redrawn = 0;
    let mut worst_err = 0.0f64;
    let mut found = 0usize;
    let mut planted_total = 0usize;
    for trial in 0..RANSAC_TRIALS {
        let mut rng = seed::rng_from(7, &["ransac-trial", &trial.to_string()]);
        let (h, m, a, b) = loop {
            let h = Homography::new([
                [
                    rng.random_range(0.9..1.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-10.0..10.0),
                ],
                [
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.9..1.1),
                    rng.random_range(-10.0..10.0),
                ],
                [
                    rng.random_range(-5e-4..5e-4),
                    rng.random_range(-5e-4..5e-4),
                    1.0,
                ],
            ])
            .unwrap();
            let (m, a, b) = planted(&h, 8, 4, 0.0, &mut rng);
            if uniquely_planted(&m, &a, &b, 8, params.threshold_px) {
                break (h, m, a, b);
            }
            redrawn += 1;
        };
        let out = ransac_verify(m, &a, &b, params, &mut rng).unwrap();
        let err = out.model.map_or(f64::INFINITY, |f| f.max_abs_diff(&h));
        worst_err = worst_err.max(err);
        if out.inliers == (0..8).collect::<Vec<_>>() && err < 1e-6 {
            exact_ok += 1;
        }
        let (m, a, b) = planted(&h, 20, 10, 0.5, &mut rng);
        let out = ransac_verify(m, &a, &b, params, &mut rng).unwrap();
        found += out.inliers.iter().filter(|&&i| i < 20).count();
        planted_total += 20;
    }
    let recall = found as f64 / planted_total as f64;
    Outcome {
        id: 7,
        title: "RANSAC planted-homography oracle",
        pass: exact_ok == RANSAC_TRIALS && recall >= 0.95,
        detail: format!(
            "exact inliers + matrix err < 1e-6 in {exact_ok}/{RANSAC_TRIALS} (worst {worst_err:.1e}; {redrawn} ambiguous scenes redrawn); noisy (sigma 0.5, 3 px) recall {recall:.3} >= 0.95"
        ),
    }
}

fn random_hist(rng: &mut seed::Rng, support: &[usize], bins: usize) -> HueSatHistogram {
    let mut v = vec![0.0; bins];
    for &i in support {
        v[i] = rng.random_range(0.01..1.0);
    }
    HueSatHistogram::from_bins(8, bins / 8, v).unwrap()
}

fn criterion_8() -> Outcome {
    let bins = 64;
    let mut rng = seed::rng(8);
    let mut failures = Vec::new();
    for _ in 0..AXIOM_PAIRS {
        let all: Vec<usize> = (0..bins).collect();
        let pick = |rng: &mut seed::Rng| -> Vec<usize> {
            let k = rng.random_range(1..=bins);
            let mut s = all.clone();
            s.shuffle(rng);
            s.truncate(k);
            s
        };
        let (sa, sb) = (pick(&mut rng), pick(&mut rng));
        let a = random_hist(&mut rng, &sa, bins);
        let b = random_hist(&mut rng, &sb, bins);
        let mut perm: Vec<usize> = (0..bins).collect();
        perm.shuffle(&mut rng);
        let permute = |h: &HueSatHistogram| {
            let v: Vec<f64> = perm.iter().map(|&i| h.bins()[i]).collect();
            HueSatHistogram::from_bins(8, bins / 8, v).unwrap()
        };
        let (pa, pb) = (permute(&a), permute(&b));
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut rng);
        let cut = rng.random_range(1..bins);
        let da = random_hist(&mut rng, &shuffled[..cut], bins);
        let db = random_hist(&mut rng, &shuffled[cut..], bins);
        for m in HistogramMetric::ALL {
            let sim = |x: &HueSatHistogram, y: &HueSatHistogram| {
                m.similarity(compare_histograms(x, y, m).unwrap())
            };
            if (sim(&a, &a) - 1.0).abs() > 1e-9 {
                failures.push(format!("{m:?} self"));
            }
            if (sim(&a, &b) - sim(&b, &a)).abs() > 1e-12 {
                failures.push(format!("{m:?} symmetry"));
            }
            if (sim(&a, &b) - sim(&pa, &pb)).abs() > 1e-9 {
                failures.push(format!("{m:?} permutation"));
            }
        }
        if compare_histograms(&da, &db, HistogramMetric::Intersection).unwrap() != 0.0 {
            failures.push("intersection disjoint".into());
        }
    }
    // kNN against an exhaustive scan, with planted exact ties
    let dim = 8;
    let mut gallery: Vec<(Vec<f32>, u32)> = (0..100)
        .map(|_| {
            (
                (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                rng.random_range(0..30),
            )
        })
        .collect();
    for i in 0..10 {
        let v = gallery[i].0.clone();
        gallery.push((v, rng.random_range(0..30)));
    }
    let mut knn_mismatch = 0;
    for q in 0..1000 {
        let query: Vec<f32> = if q % 10 == 0 {
            gallery[q / 10 % gallery.len()].0.clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        let mut best: Option<(f64, u32)> = None;
        for (v, id) in &gallery {
            let d: f64 = v
                .iter()
                .zip(&query)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            best = match best {
                Some((bd, bid)) if bd < d || (bd == d && bid <= *id) => Some((bd, bid)),
                _ => Some((d, *id)),
            };
        }
        if knn_classify(&query, &gallery).unwrap() != best.unwrap().1 {
            knn_mismatch += 1;
        }
    }
    Outcome {
        id: 8,
        title: "baseline axioms",
        pass: failures.is_empty() && knn_mismatch == 0,
        detail: format!(
            "histogram axioms on {AXIOM_PAIRS} pairs x 4 metrics: {} failures{}; kNN vs exhaustive scan: {knn_mismatch}/1000 mismatches",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

fn bookkeeping_ok(r: &EvaluationReport) -> Result<(), String> {
    let bins = angle_bins(&r.records, DEFAULT_BIN_WIDTH_DEG).map_err(|e| e.to_string())?;
    let a = &r.aggregates;
    let (n, c): (usize, usize) = bins
        .iter()
        .fold((0, 0), |(n, c), b| (n + b.count, c + b.correct));
    if n != a.total {
        return Err(format!("{}: bins hold {n} of {} queries", r.name, a.total));
    }
    // weighted bin mean equals the overall ratio as integers: c / n == correct / total
    if c * a.total != a.correct * n {
        return Err(format!(
            "{}: weighted bin mean {c}/{n} vs {}/{}",
            r.name, a.correct, a.total
        ));
    }
    if a.textured_total + a.untextured_total != a.total {
        return Err(format!("{}: textured split does not sum", r.name));
    }
    if !r.check_consistency() {
        return Err(format!(
            "{}: stored aggregates disagree with records",
            r.name
        ));
    }
    Ok(())
}

fn criterion_9(network_report: Option<EvaluationReport>) -> Outcome {
    let ds = synthesize(&SynthConfig::default(), 0).unwrap();
    let split = make_one_shot_split(&ds.singleview, 30.0, 45.0).unwrap();
    let k = split.num_classes as u32;
    let random = evaluate(
        "random",
        |q| {
            let key = format!(
                "{}-{}-{}",
                q.instance_id, q.pose.elevation_deg, q.pose.azimuth_deg
            );
            Ok(seed::rng_from(9, &["guess", &key]).random_range(0..k))
        },
        &split,
    );
    let hist = HistogramClassifier::new(&split.train, HistogramMetric::Intersection).unwrap();
    let hist_report = evaluate("histogram", |q| hist.classify(q), &split);
    let mut problems = Vec::new();
    for r in [Some(&random), Some(&hist_report), network_report.as_ref()]
        .into_iter()
        .flatten()
    {
        if let Err(e) = bookkeeping_ok(r) {
            problems.push(e);
        }
    }
    let p = 1.0 / k as f64;
    let n = random.aggregates.total as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let acc = random.aggregates.accuracy.unwrap();
    let within = (acc - p).abs() <= 3.0 * sigma;
    Outcome {
        id: 9,
        title: "evaluation bookkeeping",
        pass: problems.is_empty() && within,
        detail: format!(
            "bins partition, exact weighted mean and textured split on {} reports{}; random guess {acc:.4} within 1/{k} +- 3 sigma [{:.4}, {:.4}]",
            2 + usize::from(network_report.is_some()),
            problems.first().map(|p| format!(" (problem: {p})")).unwrap_or_default(),
            p - 3.0 * sigma,
            p + 3.0 * sigma
        ),
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let cfg = serde_json::json!({
        "seed": 11,
        "data": {"root": data},
        "synth": {"num_objects": 8, "multiview_objects": 4, "azimuths": 12, "classlevel_categories": 4,
                  "classlevel_objects_per_category": 2, "classlevel_views": 4, "backgrounds_train": 4, "backgrounds_test": 4},
        "stages": [
            {"name": "class", "labeling": "category", "iterations": 30},
            {"name": "multiview", "dataset": "multiview", "iterations": 30, "background": "random"},
            {"name": "oneshot", "dataset": "singleview", "split": {"kind": "one_shot", "train_elevation": 30, "test_elevation": 45},
             "freeze": ["conv1", "conv2"], "iterations": 30, "fine_tune": true, "eval_every": 10, "eval_on": "test"}
        ],
        "eval": {"checkpoint": root.join("train1").join("oneshot.ckpt"), "test_background": "random"}
    });
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let run = |args: &[&str]| -> i32 {
        let mut v = vec!["instarec"];
        v.extend_from_slice(args);
        cli::run_from_args(v)
    };
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = cfg_path.to_string_lossy().into_owned();
    let mut codes = vec![
        run(&["synth", "--config", &c, "--out", &data.to_string_lossy()]),
        run(&["train", "--config", &c, "--out", &p("train1")]),
        run(&["eval", "--config", &c, "--out", &p("eval1")]),
    ];
    // rerun from the echoed configs, with a different worker cap
    codes.push(run(&[
        "train",
        "--config",
        &p("train1/config.json"),
        "--out",
        &p("train2"),
        "--threads",
        "2",
    ]));
    codes.push(run(&[
        "eval",
        "--config",
        &p("eval1/config.json"),
        "--out",
        &p("eval2"),
        "--threads",
        "2",
    ]));
    let train_same = dir_bytes(&root.join("train1")) == dir_bytes(&root.join("train2"));
    let eval_same = dir_bytes(&root.join("eval1")) == dir_bytes(&root.join("eval2"));
    let files = dir_bytes(&root.join("train1")).len() + dir_bytes(&root.join("eval1")).len();
    Outcome {
        id: 10,
        title: "determinism from echoed config",
        pass: codes.iter().all(|c| *c == 0) && train_same && eval_same && files >= 10,
        detail: format!(
            "exit codes {codes:?}; {files} files compared; checkpoints/traces identical: {train_same}; reports identical: {eval_same}"
        ),
    }
}

/// `ACCEPTANCE_ONLY=7,8` runs a subset; 2-5 always run together.
fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let t = Instant::now();
    let only = selected();
    let want = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut outcomes = Vec::new();
    let quick: [(u32, fn() -> Outcome); 5] = [
        (1, criterion_1),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (10, criterion_10),
    ];
    for (id, f) in quick {
        if want(id) {
            let o = f();
            line(&o);
            outcomes.push(o);
        }
    }
    let mut report = None;
    if (2..=5).any(want) {
        let (trend, r) = trend_criteria();
        for o in &trend {
            line(o);
        }
        outcomes.extend(trend);
        report = r;
    }
    if want(9) {
        let o = criterion_9(report);
        line(&o);
        outcomes.push(o);
    }

    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary ({:.0}s):", t.elapsed().as_secs_f64());
    for o in &outcomes {
        line(o);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
