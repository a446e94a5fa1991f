//! Central-difference gradient check in 64-bit arithmetic.

use super::{softmax_cross_entropy, Batch, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU or pooling kink.
    pub skipped: usize,
    /// Worst parameter as `(layer, index)`.
    pub worst: Option<(String, usize)>,
}

fn loss_and_signature(
    net: &Network<f64>,
    batch: &Batch<f64>,
    labels: &[u32],
) -> Result<(f64, Vec<u32>)> {
    let out = net.forward(batch)?;
    let (loss, _) = softmax_cross_entropy(&out.logits, out.num_classes, labels)?;
    Ok((loss, out.cache.kink_signature()))
}

/// Max relative error `|ga - gn| / max(|ga|, |gn|, 1e-8)` between analytic
/// and central-difference gradients of the mean cross-entropy. At most
/// `per_layer` evenly spaced parameters are checked in each trainable
/// layer; frozen layers are skipped entirely.
pub fn gradient_check(
    net: &Network<f64>,
    batch: &Batch<f64>,
    labels: &[u32],
    epsilon: f64,
    per_layer: usize,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || per_layer == 0 {
        return Err(Error::invalid("epsilon and per_layer must be positive"));
    }
    let out = net.forward(batch)?;
    let (_, dlogits) = softmax_cross_entropy(&out.logits, out.num_classes, labels)?;
    let grads = net.backward(&out.cache, &dlogits)?;
    let base_sig = out.cache.kink_signature();

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (li, layer) in net.layers().iter().enumerate() {
        let Some(g) = grads.layers[li].as_ref() else {
            continue;
        };
        let name = layer.spec.name.clone();
        let nw = layer.weights.len();
        let total = nw + layer.bias.len();
        let step = (total / per_layer).max(1);
        for idx in (0..total).step_by(step).take(per_layer) {
            let analytic = if idx < nw {
                g.weights[idx]
            } else {
                g.bias[idx - nw]
            };
            let mut eval = |delta: f64| -> Result<(f64, Vec<u32>)> {
                {
                    let (w, b) = probe.params_mut(&name)?;
                    let p = if idx < nw {
                        &mut w[idx]
                    } else {
                        &mut b[idx - nw]
                    };
                    *p += delta;
                }
                let r = loss_and_signature(&probe, batch, labels);
                let (w, b) = probe.params_mut(&name)?;
                let p = if idx < nw {
                    &mut w[idx]
                } else {
                    &mut b[idx - nw]
                };
                *p = if idx < nw {
                    layer.weights[idx]
                } else {
                    layer.bias[idx - nw]
                };
                r
            };
            let (lp, sp) = eval(epsilon)?;
            let (lm, sm) = eval(-epsilon)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * epsilon);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchConfig, LayerKind, LayerSpec, Shape};
    use crate::seed;
    use rand::Rng;

    fn batch(shape: Shape, n: usize, seed_v: u64) -> Batch<f64> {
        let mut rng = seed::rng(seed_v);
        Batch::new(
            shape,
            (0..shape.len() * n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn check(specs: Vec<LayerSpec>, input: Shape, classes: u32, seed_v: u64) -> GradCheckReport {
        let net: Network<f64> = Network::new(input, specs, &mut seed::rng(seed_v)).unwrap();
        let b = batch(input, 3, seed_v + 100);
        let labels: Vec<u32> = (0..3).map(|i| i % classes).collect();
        let r = gradient_check(&net, &b, &labels, 1e-3, 200).unwrap();
        assert!(r.checked > 0);
        r
    }

    #[test]
    fn each_layer_kind_in_isolation() {
        let s = Shape::new(2, 6, 6);
        let fc_only = check(vec![LayerSpec::fc("head", 3)], s, 3, 1);
        assert!(fc_only.max_rel_error < 1e-4, "{fc_only:?}");
        let conv = check(
            vec![LayerSpec::conv("c", 3, 3), LayerSpec::fc("head", 3)],
            s,
            3,
            2,
        );
        assert!(conv.max_rel_error < 1e-4, "{conv:?}");
        let strided = check(
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
            3,
        );
        assert!(strided.max_rel_error < 1e-4, "{strided:?}");
        let relu = check(
            vec![
                LayerSpec::fc("f", 6),
                LayerSpec::relu("r"),
                LayerSpec::fc("head", 3),
            ],
            s,
            3,
            4,
        );
        assert!(relu.max_rel_error < 1e-4, "{relu:?}");
        let pool = check(
            vec![LayerSpec::pool("p", 2), LayerSpec::fc("head", 3)],
            s,
            3,
            5,
        );
        assert!(pool.max_rel_error < 1e-4, "{pool:?}");
    }

    #[test]
    fn composed_three_layer_toy() {
        let r = check(
            vec![
                LayerSpec::conv("c1", 3, 3),
                LayerSpec::relu("r1"),
                LayerSpec::pool("p1", 2),
                LayerSpec::fc("f1", 8),
                LayerSpec::relu("r2"),
                LayerSpec::fc("head", 4),
            ],
            Shape::new(2, 8, 8),
            4,
            6,
        );
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn default_arch_small_input() {
        let arch = ArchConfig {
            input_size: 16,
            conv1_filters: 2,
            conv2_filters: 3,
            kernel: 3,
            fc_units: 6,
        };
        let net: Network<f64> = arch.build(3, &mut seed::rng(7)).unwrap();
        let b = batch(net.input_shape(), 2, 8);
        let r = gradient_check(&net, &b, &[0, 2], 1e-3, 60).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn frozen_layers_excluded() {
        let mut net: Network<f64> = Network::new(
            Shape::new(1, 4, 4),
            vec![
                LayerSpec::fc("f", 5),
                LayerSpec::relu("r"),
                LayerSpec::fc("head", 2),
            ],
            &mut seed::rng(9),
        )
        .unwrap();
        net.set_freeze(&["head"]).unwrap();
        let b = batch(net.input_shape(), 2, 10);
        let r = gradient_check(&net, &b, &[0, 1], 1e-3, 1000).unwrap();
        assert_eq!(r.checked + r.skipped, 16 * 5 + 5);
        assert_eq!(r.worst.unwrap().0, "f");
    }
}
