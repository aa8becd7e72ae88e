//! Deterministic handcrafted models and synthetic datasets.
//!
//! The toy localizer detects three period-2 textures (horizontal stripes,
//! vertical stripes, checkerboard). Its parameters are set by hand, so nothing
//! here depends on training. With BN enabled, each conv is followed by a BN with
//! seeded non-trivial statistics and the conv parameters are pre-divided so that
//! the Conv -> BN pair computes the same function as the BN-free network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BBox, Sample};
use crate::ir::{GraphBuilder, ModelGraph, Op};
use crate::kernels::{BnParams, ConvParams, DenseParams, PoolParams};
use crate::tensor::Tensor;

pub const TOY_SIZE: usize = 32;
pub const TOY_CLASSES: [&str; 3] = ["horizontal", "vertical", "checker"];
pub const TOY_NOISE: f32 = 0.5;
pub const TOY_INPUT_RANGE: (f32, f32) = (-1.5, 1.5);
const TEMPLATE_MIN: usize = 6;
const TEMPLATE_MAX: usize = 28;
const BN_EPS: f32 = 1e-5;

/// `+1/-1` texture value of class `class` at template-local `(row, col)`.
pub fn texture(class: usize, row: usize, col: usize) -> f32 {
    let parity = match class {
        0 => row,
        1 => col,
        _ => row + col,
    };
    if parity % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// 2x2 detector for `class`; responds with +-4 on its own texture and 0 on the others.
fn detector(class: usize) -> [[f32; 2]; 2] {
    match class {
        0 => [[1.0, 1.0], [-1.0, -1.0]],
        1 => [[1.0, -1.0], [1.0, -1.0]],
        _ => [[1.0, -1.0], [-1.0, 1.0]],
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.gen_range(lo..hi)
}

fn seeded_bn(rng: &mut ChaCha8Rng, channels: usize) -> BnParams {
    let mut draw = |lo: f32, hi: f32| Tensor::from_fn(&[channels], |_| uniform(rng, lo, hi));
    BnParams {
        gamma: draw(0.5, 2.0),
        beta: draw(-1.0, 1.0),
        running_mean: draw(-1.0, 1.0),
        running_var: draw(0.25, 4.0),
        epsilon: BN_EPS,
    }
}

/// Rewrites `(w, b)` into `(w', b')` such that `bn(conv'(x)) == conv(x)`.
fn prescale_for_bn(p: &mut ConvParams, bn: &BnParams) {
    let out = p.out_channels();
    let per = p.weight.len() / out;
    for o in 0..out {
        let k = bn.scale(o);
        for v in &mut p.weight.data_mut()[o * per..(o + 1) * per] {
            *v = (*v as f64 / k) as f32;
        }
        let b = &mut p.bias.data_mut()[o];
        *b = ((*b as f64 - bn.beta.data()[o] as f64) / k + bn.running_mean.data()[o] as f64) as f32;
    }
}

/// Appends `conv [-> bn]` under `name`.
fn push_conv(b: &mut GraphBuilder, rng: &mut ChaCha8Rng, name: &str, mut conv: ConvParams, with_bn: bool) {
    if with_bn {
        let bn = seeded_bn(rng, conv.out_channels());
        prescale_for_bn(&mut conv, &bn);
        b.push(&format!("{name}_conv"), Op::Conv(conv));
        b.push(&format!("{name}_bn"), Op::Bn(bn));
    } else {
        b.push(&format!("{name}_conv"), Op::Conv(conv));
    }
}

/// Handcrafted texture localizer on `[1, 32, 32]` inputs with three classes.
///
/// Topology: three conv blocks (the third inside a residual branch), max pool,
/// global average pool, dense head.
pub fn make_toy_localizer(seed: u64, with_bn: bool) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: f32| v * (1.0 + uniform(&mut rng, -0.1, 0.1));
    let classes = TOY_CLASSES.len();

    // block 1: signed texture detectors, two phases per class
    let mut w1 = Tensor::zeros(&[2 * classes, 1, 3, 3]);
    for c in 0..classes {
        let k = detector(c);
        for (phase, sign) in [(0, 1.0), (1, -1.0)] {
            let o = 2 * c + phase;
            for (ky, row) in k.iter().enumerate() {
                for (kx, &v) in row.iter().enumerate() {
                    w1.data_mut()[o * 9 + ky * 3 + kx] = jitter(0.25 * sign * v);
                }
            }
        }
    }
    let conv1 = ConvParams {
        weight: w1,
        bias: Tensor::zeros(&[2 * classes]),
        stride: (1, 1),
        padding: (1, 1),
    };

    // block 2: per-class evidence pooled over 3x3, competing classes subtracted
    let mut w2 = Tensor::zeros(&[classes, 2 * classes, 3, 3]);
    for o in 0..classes {
        for i in 0..2 * classes {
            let v = if i / 2 == o { 1.0 } else { -0.5 } / 9.0;
            for k in 0..9 {
                w2.data_mut()[(o * 2 * classes + i) * 9 + k] = jitter(v);
            }
        }
    }
    let conv2 = ConvParams {
        weight: w2,
        bias: Tensor::full(&[classes], jitter(-0.25)),
        stride: (1, 1),
        padding: (1, 1),
    };

    // block 3 (residual branch): per-class smoothing
    let mut w3 = Tensor::zeros(&[classes, classes, 3, 3]);
    for o in 0..classes {
        for k in 0..9 {
            w3.data_mut()[(o * classes + o) * 9 + k] = jitter(0.5 / 9.0);
        }
    }
    let conv3 = ConvParams {
        weight: w3,
        bias: Tensor::zeros(&[classes]),
        stride: (1, 1),
        padding: (1, 1),
    };

    let mut wd = Tensor::zeros(&[classes, classes]);
    for o in 0..classes {
        for i in 0..classes {
            wd.data_mut()[o * classes + i] = jitter(if o == i { 8.0 } else { -4.0 });
        }
    }
    let dense = DenseParams {
        weight: wd,
        bias: Tensor::zeros(&[classes]),
    };

    let mut b = GraphBuilder::new(&[1, TOY_SIZE, TOY_SIZE], TOY_INPUT_RANGE);
    push_conv(&mut b, &mut rng, "block1", conv1, with_bn);
    b.push("block1_relu", Op::Relu);
    push_conv(&mut b, &mut rng, "block2", conv2, with_bn);
    b.push("block2_relu", Op::Relu);
    push_conv(&mut b, &mut rng, "block3", conv3, with_bn);
    let branch = b.last().to_string();
    b.push_from("block3_add", Op::Add, &[&branch, "block2_relu"]);
    b.push("block3_relu", Op::Relu)
        .push("maxpool", Op::MaxPool(PoolParams { kernel: (2, 2), stride: (2, 2) }))
        .push(
            "gap",
            Op::AvgPool(PoolParams {
                kernel: (TOY_SIZE / 2, TOY_SIZE / 2),
                stride: (TOY_SIZE / 2, TOY_SIZE / 2),
            }),
        )
        .push("flatten", Op::Flatten)
        .push("head", Op::Dense(dense));
    b.build().expect("toy localizer is well-formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomNetSpec {
    pub with_bn: bool,
    pub with_bias: bool,
    /// Draw all weights from `[0, 1)` instead of `[-1, 1)`.
    pub positive_weights: bool,
}

/// Small randomly initialised residual CNN on `[2, 8, 8]` inputs with three classes.
pub fn make_random_net(seed: u64, spec: RandomNetSpec) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = if spec.positive_weights { 0.0 } else { -1.0 };
    let conv = |rng: &mut ChaCha8Rng, out: usize, inp: usize| {
        let fan = (inp * 9) as f32;
        ConvParams {
            weight: Tensor::from_fn(&[out, inp, 3, 3], |_| uniform(rng, lo, 1.0) * 2.0 / fan.sqrt()),
            bias: Tensor::from_fn(&[out], |_| if spec.with_bias { uniform(rng, -0.1, 0.1) } else { 0.0 }),
            stride: (1, 1),
            padding: (1, 1),
        }
    };
    let c1 = conv(&mut rng, 4, 2);
    let c2 = conv(&mut rng, 4, 4);
    let c3 = conv(&mut rng, 4, 4);
    let dense = DenseParams {
        weight: Tensor::from_fn(&[3, 16], |_| uniform(&mut rng, lo, 1.0) / 2.0),
        bias: Tensor::from_fn(&[3], |_| if spec.with_bias { uniform(&mut rng, -0.1, 0.1) } else { 0.0 }),
    };

    let mut b = GraphBuilder::new(&[2, 8, 8], (-1.0, 1.0));
    let block = |b: &mut GraphBuilder, rng: &mut ChaCha8Rng, name: &str, c: ConvParams| {
        b.push(&format!("{name}_conv"), Op::Conv(c));
        if spec.with_bn {
            let bn = BnParams {
                gamma: Tensor::from_fn(&[4], |_| uniform(rng, 0.5, 2.0)),
                beta: Tensor::from_fn(&[4], |_| uniform(rng, -0.5, 0.5)),
                running_mean: Tensor::from_fn(&[4], |_| uniform(rng, -0.5, 0.5)),
                running_var: Tensor::from_fn(&[4], |_| uniform(rng, 0.25, 4.0)),
                epsilon: BN_EPS,
            };
            b.push(&format!("{name}_bn"), Op::Bn(bn));
        }
    };
    block(&mut b, &mut rng, "b1", c1);
    b.push("b1_relu", Op::Relu);
    block(&mut b, &mut rng, "b2", c2);
    let branch = b.last().to_string();
    b.push_from("b2_add", Op::Add, &[&branch, "b1_relu"]);
    b.push("b2_relu", Op::Relu)
        .push("pool", Op::MaxPool(PoolParams { kernel: (2, 2), stride: (2, 2) }));
    block(&mut b, &mut rng, "b3", c3);
    b.push("b3_relu", Op::Relu)
        .push("gap", Op::AvgPool(PoolParams { kernel: (2, 2), stride: (2, 2) }))
        .push("flatten", Op::Flatten)
        .push("head", Op::Dense(dense));
    b.build().expect("random net is well-formed")
}

/// A toy sample together with its noise-free template image.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub sample: Sample,
    /// Texture values inside the box, exactly zero outside.
    pub template: Tensor,
}

pub fn make_toy_dataset_detailed(seed: u64, n: usize) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    (0..n)
        .map(|i| {
            let label = rng.gen_range(0..TOY_CLASSES.len());
            let w = rng.gen_range(TEMPLATE_MIN..=TEMPLATE_MAX);
            let h = rng.gen_range(TEMPLATE_MIN..=TEMPLATE_MAX);
            let x0 = rng.gen_range(0..=TOY_SIZE - w);
            let y0 = rng.gen_range(0..=TOY_SIZE - h);
            let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
            let mut template = Tensor::zeros(&[1, TOY_SIZE, TOY_SIZE]);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    template.data_mut()[y * TOY_SIZE + x] = texture(label, y - y0, x - x0);
                }
            }
            let noise = Tensor::from_fn(template.shape(), |_| uniform(&mut rng, -TOY_NOISE, TOY_NOISE));
            let image = template.add(&noise).expect("same shape");
            ToySample {
                sample: Sample {
                    id: format!("toy-{:05}", i),
                    image,
                    label,
                    class_name: TOY_CLASSES[label].to_string(),
                    bboxes: vec![bbox],
                },
                template,
            }
        })
        .collect()
}

/// `n` samples of noise plus one textured rectangle whose box is the sample's bbox.
pub fn make_toy_dataset(seed: u64, n: usize) -> Vec<Sample> {
    make_toy_dataset_detailed(seed, n).into_iter().map(|t| t.sample).collect()
}

pub fn toy_class_names() -> Vec<String> {
    TOY_CLASSES.iter().map(|s| s.to_string()).collect()
}
