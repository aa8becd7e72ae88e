use std::collections::BTreeMap;

use canon_core::attribute::{attribute, AttributionMap, LrpComposite, Method, MethodConfig};
use canon_core::canonize::canonize_pass;
use canon_core::evaluate::*;
use canon_core::kernels::DenseParams;
use canon_core::toy::{make_toy_dataset, make_toy_localizer};
use canon_core::{GraphBuilder, Op, Tensor};

fn linear_model(weights: Vec<f32>, bias: f32) -> canon_core::ModelGraph {
    let n = weights.len();
    let mut b = GraphBuilder::new(&[1, 1, n], (-1.0, 1.0));
    b.push("flatten", Op::Flatten).push(
        "head",
        Op::Dense(DenseParams {
            weight: Tensor::new(vec![1, n], weights).unwrap(),
            bias: Tensor::full(&[1], bias),
        }),
    );
    b.build().unwrap()
}

fn as_map(values: Tensor) -> AttributionMap {
    AttributionMap {
        values,
        method: Method::Gradient,
        target_class: 0,
    }
}

#[test]
fn trivial_curves() {
    let g = linear_model(vec![1.0, -1.0, 2.0], 0.5);
    let x = Tensor::new(vec![1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap();
    let map = as_map(Tensor::new(vec![1, 1, 3], vec![3.0, 2.0, 1.0]).unwrap());
    let c = perturbation_curve(&g, &map, &x, 0, 0, 1, "s").unwrap();
    assert_eq!(c.scores, vec![0.0]);
    let c = perturbation_curve(&g, &map, &x, 0, 3, 1, "s").unwrap();
    assert_eq!(c.scores.len(), 4);
    assert_eq!(c.scores[0], 0.0);
    assert!(perturbation_curve(&g, &map, &x, 0, 4, 1, "s").is_err());
    assert_eq!(perturbation_curve(&g, &map, &x, 0, 3, 1, "s").unwrap(), c);

    let constant = linear_model(vec![0.0; 3], 2.0);
    for seed in 0..5 {
        let c = perturbation_curve(&constant, &map, &x, 0, 3, seed, "s").unwrap();
        assert!(c.scores.iter().all(|&s| s == 0.0));
    }
}

#[test]
fn multi_channel_pixels_are_perturbed_together() {
    let w: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
    let mut b = GraphBuilder::new(&[2, 2, 2], (-1.0, 1.0));
    b.push("flatten", Op::Flatten).push(
        "head",
        Op::Dense(DenseParams {
            weight: Tensor::new(vec![1, 8], w.clone()).unwrap(),
            bias: Tensor::zeros(&[1]),
        }),
    );
    let g = b.build().unwrap();
    let x = Tensor::from_fn(&[2, 2, 2], |i| 0.1 * i as f32 - 0.3);
    // channel sums per pixel: 1, -1, 4, 0 -> order 2, 0, 3, 1
    let map = as_map(Tensor::new(vec![2, 2, 2], vec![0.5, 0.0, 2.0, 1.0, 0.5, -1.0, 2.0, -1.0]).unwrap());
    let c = perturbation_curve(&g, &map, &x, 0, 4, 11, "s").unwrap();
    let draws = replacement_draws(11, 4, 2, (-1.0, 1.0));
    let mut acc = 0f64;
    for (k, p) in [2usize, 0, 3, 1].into_iter().enumerate() {
        for ch in 0..2 {
            let i = ch * 4 + p;
            acc += w[i] as f64 * (x.data()[i] as f64 - draws[2 * k + ch] as f64);
        }
        assert!((c.scores[k + 1] as f64 - acc).abs() <= 1e-6);
    }
}

#[test]
fn gradient_curves_agree_across_canonization() {
    let g = make_toy_localizer(1, true);
    let c = canonize_pass(&g).unwrap().graph;
    for s in make_toy_dataset(1, 10) {
        let seed = derive_seed(3, &s.id);
        for m in [Method::Gradient, Method::IntegratedGradients] {
            let cfg = MethodConfig::new(m);
            let a = attribute(&g, &s.image, s.label, &cfg).unwrap();
            let b = attribute(&c, &s.image, s.label, &cfg).unwrap();
            let pa = perturbation_curve(&g, &a, &s.image, s.label, 50, seed, &s.id).unwrap();
            let pb = perturbation_curve(&c, &b, &s.image, s.label, 50, seed, &s.id).unwrap();
            for d in curve_difference(&pb, &pa).unwrap() {
                assert!(d.abs() <= 1e-4, "{m} {}: {d}", s.id);
            }
        }
    }
}

#[test]
fn mean_descending_curve_dominates_ascending() {
    const STEPS: usize = 100;
    let g = canonize_pass(&make_toy_localizer(2, true)).unwrap().graph;
    let cfg = MethodConfig::new(Method::Lrp(LrpComposite::EpsilonOnly));
    let samples = make_toy_dataset(2, 30);
    let (mut desc, mut asc) = (vec![0f64; STEPS + 1], vec![0f64; STEPS + 1]);
    for s in &samples {
        let map = attribute(&g, &s.image, s.label, &cfg).unwrap();
        let seed = derive_seed(0, &s.id);
        for (order, acc) in [(Order::Descending, &mut desc), (Order::Ascending, &mut asc)] {
            let c = perturbation_curve_ordered(&g, &map, &s.image, s.label, STEPS, seed, &s.id, order).unwrap();
            for (a, v) in acc.iter_mut().zip(&c.scores) {
                *a += *v as f64 / samples.len() as f64;
            }
        }
    }
    for k in 1..=STEPS {
        assert!(desc[k] > asc[k], "k={k}: {} vs {}", desc[k], asc[k]);
    }
}

#[test]
fn aggregation_matches_recomputation() {
    let g = make_toy_localizer(0, true);
    let cfg = MethodConfig::new(Method::InputXGradient);
    let records: Vec<LocalizationRecord> = make_toy_dataset(9, 300)
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let map = attribute(&g, &s.image, s.label, &cfg).unwrap();
            localization_score(&map, &s.bboxes, &s.id, i % 2 == 0).unwrap()
        })
        .collect();
    let summaries = aggregate_localization(&records);
    assert_eq!(summaries.len(), 2);
    for s in &summaries {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.canonized == s.canonized) {
            let Some(mu) = r.mu else { continue };
            let f = r.bbox_area_fraction;
            for (name, inside) in [("all", true), ("lt_0.5", f < 0.5), ("lt_0.25", f < 0.25)] {
                if inside {
                    let e = sums.entry(name).or_default();
                    e.0 += mu as f64;
                    e.1 += 1;
                }
            }
        }
        assert_eq!(s.buckets.len(), sums.len());
        for (name, (sum, n)) in sums {
            let b = &s.buckets[name];
            assert_eq!(b.count, n);
            assert!((b.mean_mu - sum / n as f64).abs() <= 1e-12);
        }
    }
}
