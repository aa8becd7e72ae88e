//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use canon_core::attribute::{
    attribute, excitation_assignment, gradient, integrated_gradients, lrp_composite_assignment, lrp_trace, BnRule,
    LrpComposite, Method, MethodConfig, RelevanceTrace,
};
use canon_core::canonize::{canonize_pass, verify_equivalence, DEFAULT_TOLERANCE};
use canon_core::dataset::BBox;
use canon_core::evaluate::{cosine_distance, localization_score, perturbation_curve, replacement_draws, Bucket};
use canon_core::experiment::{localization_csv, perturbation_csv, run_on, CanonMode, ExperimentConfig};
use canon_core::kernels::{BnParams, ConvParams, DenseParams};
use canon_core::toy::{make_random_net, make_toy_dataset, make_toy_localizer, RandomNetSpec};
use canon_core::{GraphBuilder, ModelGraph, Op, OpKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

mod common;
use common::{finite_difference_gradient, reference_forward};

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn bn_net(seed: u64) -> ModelGraph {
    make_random_net(
        seed,
        RandomNetSpec {
            with_bn: true,
            with_bias: true,
            positive_weights: false,
        },
    )
}

/// Ten BN graphs: five toy localizers and five random residual nets.
fn bn_graphs() -> Vec<ModelGraph> {
    (0..5)
        .map(|s| make_toy_localizer(s, true))
        .chain((0..5).map(|s| bn_net(100 + s)))
        .collect()
}

/// A graph whose BN follows a residual sum and so has no linear producer.
fn graph_with_unfusable_bn(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ConvParams {
        weight: random_input(&mut rng, &[2, 2, 3, 3], -0.5, 0.5),
        bias: random_input(&mut rng, &[2], -0.1, 0.1),
        stride: (1, 1),
        padding: (1, 1),
    };
    let bn = |rng: &mut ChaCha8Rng| BnParams {
        gamma: random_input(rng, &[2], 0.5, 2.0),
        beta: random_input(rng, &[2], -1.0, 1.0),
        running_mean: random_input(rng, &[2], -1.0, 1.0),
        running_var: random_input(rng, &[2], 0.25, 4.0),
        epsilon: 1e-5,
    };
    let mut b = GraphBuilder::new(&[2, 6, 6], (-1.0, 1.0));
    b.push("conv", Op::Conv(conv.clone()))
        .push("conv_bn", Op::Bn(bn(&mut rng)))
        .push_from("sum", Op::Add, &["conv_bn", "input"])
        .push("sum_bn", Op::Bn(bn(&mut rng)))
        .push("relu", Op::Relu)
        .push("flatten", Op::Flatten)
        .push(
            "head",
            Op::Dense(DenseParams {
                weight: random_input(&mut rng, &[3, 72], -0.3, 0.3),
                bias: Tensor::zeros(&[3]),
            }),
        );
    b.build().unwrap()
}

/// BN nodes whose producer is a conv or dense layer feeding nothing else.
fn count_fusable(g: &ModelGraph) -> usize {
    g.nodes()
        .filter(|n| n.op.kind() == OpKind::Bn)
        .filter(|n| {
            let p = g.node(&n.inputs[0]).unwrap();
            matches!(p.op.kind(), OpKind::Conv | OpKind::Dense) && g.consumers(&p.id).len() == 1
        })
        .count()
}

/// Twenty (model, sample, target) triples on BN models with non-trivial statistics.
fn model_sample_pairs() -> Vec<(ModelGraph, Tensor, usize)> {
    let mut pairs = Vec::new();
    for s in 0..10u64 {
        let sample = make_toy_dataset(500 + s, 1).remove(0);
        pairs.push((make_toy_localizer(s, true), sample.image, sample.label));
    }
    for s in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + s);
        let x = random_input(&mut rng, &[2, 8, 8], -1.0, 1.0);
        pairs.push((bn_net(200 + s), x, (s % 3) as usize));
    }
    pairs
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f32;
    for (i, g) in bn_graphs().iter().enumerate() {
        let c = canonize_pass(g).unwrap();
        let r = verify_equivalence(g, &c.graph, 100, DEFAULT_TOLERANCE, 40 + i as u64).unwrap();
        worst = worst.max(r.max_abs_diff);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(10),
        format!("max_abs_diff {:.3e} over 10 graphs, {:.2?}", worst, elapsed),
    )
}

fn criterion_2() -> Outcome {
    let mut graphs = bn_graphs();
    graphs.extend((0..3).map(graph_with_unfusable_bn));
    let mut problems = Vec::new();
    let (mut removed, mut fusable_total) = (0, 0);
    for (i, g) in graphs.iter().enumerate() {
        let fusable = count_fusable(g);
        let before = g.count_kind(OpKind::Bn);
        let c = canonize_pass(g).unwrap();
        let after = c.graph.count_kind(OpKind::Bn);
        fusable_total += fusable;
        removed += before - after;
        if c.fusions.len() != fusable || after != before - fusable || c.unfused.len() != after {
            problems.push(format!("graph {i}: {} fusions of {} fusable", c.fusions.len(), fusable));
        }
        let again = canonize_pass(&c.graph).unwrap();
        if !again.fusions.is_empty() || again.graph != c.graph {
            problems.push(format!("graph {i}: second pass changed the graph"));
        }
    }
    outcome(
        problems.is_empty() && fusable_total > 0,
        if problems.is_empty() {
            format!("{removed}/{fusable_total} fusable BN removed, second pass no-op on {} graphs", graphs.len())
        } else {
            problems.join("; ")
        },
    )
}

fn canon_distances(method: Method, pairs: &[(ModelGraph, Tensor, usize)]) -> Vec<Result<f32, String>> {
    let cfg = MethodConfig::new(method).with_bn_rule(BnRule::AffineEpsilon);
    pairs
        .par_iter()
        .map(|(g, x, t)| {
            let c = canonize_pass(g).map_err(|e| e.to_string())?.graph;
            let a = attribute(g, x, *t, &cfg).map_err(|e| e.to_string())?;
            let b = attribute(&c, x, *t, &cfg).map_err(|e| e.to_string())?;
            cosine_distance(&a.values, &b.values).map_err(|e| e.to_string())
        })
        .collect()
}

fn criterion_3(pairs: &[(ModelGraph, Tensor, usize)]) -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for m in [
        Method::Gradient,
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GuidedBackprop,
    ] {
        let d = canon_distances(m, pairs);
        let worst = d.iter().map(|r| r.clone().unwrap_or(f32::INFINITY)).fold(0f32, f32::max);
        passed &= worst <= 1e-4;
        details.push(format!("{m} max {:.2e}", worst));
    }
    outcome(passed, details.join(", "))
}

fn criterion_4(pairs: &[(ModelGraph, Tensor, usize)]) -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for m in [Method::Lrp(LrpComposite::EpsilonOnly), Method::ExcitationBackprop] {
        let d = canon_distances(m, pairs);
        let errors = d.iter().filter(|r| r.is_err()).count();
        let least = d.iter().map(|r| r.clone().unwrap_or(0.0)).fold(f32::INFINITY, f32::min);
        passed &= least > 1e-3 && errors == 0;
        details.push(format!("{m} min {:.2e}", least));
        if errors > 0 {
            details.push(format!("{m} {errors} undefined"));
        }
    }
    outcome(passed, details.join(", "))
}

fn bucket_means(summary: &canon_core::experiment::Summary, method: Method, canonized: bool) -> Vec<Option<f64>> {
    let s = summary
        .localization
        .iter()
        .find(|s| s.method == method && s.canonized == canonized);
    Bucket::ALL
        .iter()
        .map(|b| s.and_then(|s| s.buckets.get(b.as_str())).map(|m| m.mean_mu))
        .collect()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let g = make_toy_localizer(0, true);
    let samples = make_toy_dataset(0, 300);
    let lrp = Method::Lrp(LrpComposite::EpsilonOnly);
    let grads = [
        Method::Gradient,
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GuidedBackprop,
    ];
    let cfg = ExperimentConfig {
        methods: std::iter::once(lrp).chain(grads).map(MethodConfig::new).collect(),
        steps: 0,
        canonized: CanonMode::Both,
        bn_rule: Some(BnRule::AffineEpsilon),
        ..Default::default()
    };
    let out = run_on(&g, &samples, &cfg).unwrap();
    let elapsed = start.elapsed();

    let mut passed = out.summary.samples_ok == 300 && elapsed < Duration::from_secs(120);
    let plain = bucket_means(&out.summary, lrp, false);
    let canon = bucket_means(&out.summary, lrp, true);
    let mut details = Vec::new();
    for (i, b) in Bucket::ALL.iter().enumerate() {
        match (plain[i], canon[i]) {
            (Some(p), Some(c)) => {
                passed &= c > p;
                details.push(format!("{} {:.3}->{:.3}", b.as_str(), p, c));
            }
            _ => {
                passed = false;
                details.push(format!("{} empty", b.as_str()));
            }
        }
    }
    let mut worst = 0f64;
    for m in grads {
        for (p, c) in bucket_means(&out.summary, m, false).into_iter().zip(bucket_means(&out.summary, m, true)) {
            match (p, c) {
                (Some(p), Some(c)) => worst = worst.max((p - c).abs()),
                _ => worst = f64::INFINITY,
            }
        }
    }
    passed &= worst <= 1e-6;
    details.push(format!("gradient-family max diff {:.1e}", worst));
    details.push(format!("{:.1?}", elapsed));
    outcome(passed, details.join(", "))
}

/// Largest relative mismatch between what a node received and what it passed on.
fn worst_leak(trace: &RelevanceTrace) -> f64 {
    trace
        .emitted
        .iter()
        .map(|(id, &out)| {
            let inc = trace.incoming[id].sum();
            (out - inc).abs() / inc.abs().max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let (mut eps_worst, mut ab_worst, mut total_worst) = (0f64, 0f64, 0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let x = random_input(&mut rng, &[2, 8, 8], -1.0, 1.0);
        let target = (seed % 3) as usize;
        for positive in [false, true] {
            let g = make_random_net(
                300 + seed,
                RandomNetSpec {
                    with_bn: false,
                    with_bias: false,
                    positive_weights: positive,
                },
            );
            let f = g.forward(&x).unwrap().data()[target] as f64;
            let eps = lrp_trace(
                &g,
                &x,
                target,
                &lrp_composite_assignment(&g, LrpComposite::EpsilonOnly, BnRule::AffineEpsilon),
                1e-6,
            )
            .unwrap();
            eps_worst = eps_worst.max(worst_leak(&eps));
            total_worst = total_worst.max((eps.input.sum() - f).abs() / f.abs().max(1e-12));
            if positive {
                let ab = lrp_trace(&g, &x, target, &excitation_assignment(&g, BnRule::AffineEpsilon), 1e-6).unwrap();
                ab_worst = ab_worst.max(worst_leak(&ab));
                total_worst = total_worst.max((ab.input.sum() - f).abs() / f.abs().max(1e-12));
            }
        }
    }
    outcome(
        eps_worst <= 1e-4 && ab_worst <= 1e-4 && total_worst <= 1e-4,
        format!(
            "epsilon layer {:.1e}, alpha1beta0 layer {:.1e}, output-to-input {:.1e}",
            eps_worst, ab_worst, total_worst
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut worst = 0f64;
    let mut oracle_gap = 0f64;
    for seed in 0..20u64 {
        let g = bn_net(400 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random_input(&mut rng, &[2, 8, 8], -1.0, 1.0);
        let target = (seed % 3) as usize;
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let engine = g.forward(&x).unwrap();
        for (a, b) in engine.data().iter().zip(reference_forward(&g, &x64)) {
            oracle_gap = oracle_gap.max((*a as f64 - b).abs());
        }
        let analytic = gradient(&g, &x, target).unwrap();
        let numeric = finite_difference_gradient(&g, &x64, target, 1e-6);
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    outcome(
        worst <= 1e-3 && oracle_gap <= 1e-4,
        format!(
            "max relative error {:.2e} over 20 seeds (f64 oracle forward gap {:.1e})",
            worst, oracle_gap
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut worst = 0f64;
    for seed in 0..10u64 {
        let g = make_toy_localizer(seed, true);
        let s = make_toy_dataset(600 + seed, 1).remove(0);
        let map = integrated_gradients(&g, &s.image, s.label, 256, None).unwrap();
        let fx = g.forward(&s.image).unwrap().data()[s.label] as f64;
        let f0 = g.forward(&Tensor::zeros(s.image.shape())).unwrap().data()[s.label] as f64;
        let gap = ((map.sum() - (fx - f0)) / (fx - f0)).abs();
        worst = worst.max(gap);
    }
    outcome(worst <= 0.02, format!("max completeness gap {:.2}% over 10 seeds", 100.0 * worst))
}

fn brute_force_mu(values: &Tensor, boxes: &[BBox]) -> Option<f64> {
    let (c, h, w) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let (mut inside, mut total) = (0f64, 0f64);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0f64;
            for ch in 0..c {
                v += values.data()[(ch * h + y) * w + x] as f64;
            }
            if v <= 0.0 {
                continue;
            }
            total += v;
            if boxes.iter().any(|b| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) {
                inside += v;
            }
        }
    }
    (total > 0.0).then(|| inside / total)
}

fn criterion_9() -> Outcome {
    let mut notes = Vec::new();
    let mut passed = true;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(4..20), rng.gen_range(4..20));
        let values = random_input(&mut rng, &[c, h, w], -1.0, 1.0);
        let boxes: Vec<BBox> = (0..rng.gen_range(1..4))
            .map(|_| {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                BBox::new(x0, y0, rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h))
            })
            .collect();
        let map = canon_core::attribute::AttributionMap {
            values: values.clone(),
            method: Method::Gradient,
            target_class: 0,
        };
        let got = localization_score(&map, &boxes, "r", false).unwrap().mu;
        match (got, brute_force_mu(&values, &boxes)) {
            (Some(a), Some(b)) => worst = worst.max((a as f64 - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    passed &= worst <= 1e-6;
    notes.push(format!("mu vs pixel loop {:.1e}", worst));

    let w = [0.5f32, -2.0, 1.5, 3.0];
    let x = Tensor::new(vec![1, 2, 2], vec![0.2, -0.4, 0.9, 0.1]).unwrap();
    let mut b = GraphBuilder::new(&[1, 2, 2], (-1.0, 1.0));
    b.push("flatten", Op::Flatten).push(
        "head",
        Op::Dense(DenseParams {
            weight: Tensor::new(vec![1, 4], w.to_vec()).unwrap(),
            bias: Tensor::zeros(&[1]),
        }),
    );
    let g = b.build().unwrap();
    let map = canon_core::attribute::AttributionMap {
        values: Tensor::new(vec![1, 2, 2], vec![0.1, 0.7, -0.3, 0.7]).unwrap(),
        method: Method::Gradient,
        target_class: 0,
    };
    let curve = perturbation_curve(&g, &map, &x, 0, 4, 5, "lin").unwrap();
    let draws = replacement_draws(5, 4, 1, (-1.0, 1.0));
    // descending by value, ties by index: 1, 3, 0, 2
    let order = [1usize, 3, 0, 2];
    let mut expected = vec![0f64];
    for (k, &p) in order.iter().enumerate() {
        expected.push(expected[k] + w[p] as f64 * (x.data()[p] as f64 - draws[k] as f64));
    }
    let lin = curve
        .scores
        .iter()
        .zip(&expected)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    passed &= lin <= 1e-6;
    notes.push(format!("linear curve {:.1e}", lin));

    let g = make_toy_localizer(3, true);
    let samples = make_toy_dataset(3, 12);
    let cfg = ExperimentConfig {
        methods: vec![
            MethodConfig::new(Method::Gradient),
            MethodConfig::new(Method::Lrp(LrpComposite::EpsAlpha2Beta1Flat)),
        ],
        steps: 20,
        seed: 9,
        ..Default::default()
    };
    let a = run_on(&g, &samples, &cfg).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| run_on(&g, &samples, &cfg)).unwrap();
    let same = localization_csv(&a.localization) == localization_csv(&b.localization)
        && perturbation_csv(&a.perturbation) == perturbation_csv(&b.perturbation);
    passed &= same;
    notes.push(format!("csv determinism {}", if same { "identical" } else { "differs" }));
    outcome(passed, notes.join(", "))
}

fn main() {
    let pairs = model_sample_pairs();
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("1 canonization equivalence", Box::new(criterion_1)),
        ("2 idempotence and structure", Box::new(criterion_2)),
        ("3 gradient-family invariance", Box::new(|| criterion_3(&pairs))),
        ("4 rule-method sensitivity", Box::new(|| criterion_4(&pairs))),
        ("5 localization improvement", Box::new(criterion_5)),
        ("6 relevance conservation", Box::new(criterion_6)),
        ("7 gradient correctness", Box::new(criterion_7)),
        ("8 integrated gradients completeness", Box::new(criterion_8)),
        ("9 metric oracles", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let o = run();
        if !o.passed {
            failed += 1;
        }
        println!("criterion {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
