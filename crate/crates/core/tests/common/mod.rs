//! Plain f64 interpreter used as an oracle by the integration tests.

use std::collections::BTreeMap;

use canon_core::{ModelGraph, Op};

/// An unbatched activation: shape and values.
#[derive(Debug, Clone)]
pub struct Act {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn pool(x: &Act, k: (usize, usize), s: (usize, usize), max: bool) -> Act {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = ((h - k.0) / s.0 + 1, (w - k.1) / s.1 + 1);
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut vals = Vec::new();
                for ky in 0..k.0 {
                    for kx in 0..k.1 {
                        vals.push(x.data[(ch * h + y * s.0 + ky) * w + xo * s.1 + kx]);
                    }
                }
                data.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    Act {
        shape: vec![c, oh, ow],
        data,
    }
}

/// Output of `g` for one unbatched input, computed entirely in f64.
pub fn reference_forward(g: &ModelGraph, input: &[f64]) -> Vec<f64> {
    let mut acts: BTreeMap<&str, Act> = BTreeMap::new();
    for id in g.topo_order() {
        let node = g.node(id).unwrap();
        let arg = |i: usize| acts[node.inputs[i].as_str()].clone();
        let out = match &node.op {
            Op::Input => Act {
                shape: g.input_shape().to_vec(),
                data: input.to_vec(),
            },
            Op::Conv(p) => {
                let x = arg(0);
                let (ic, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let ws = p.weight.shape();
                let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h + 2 * p.padding.0 - kh) / p.stride.0 + 1;
                let ow = (w + 2 * p.padding.1 - kw) / p.stride.1 + 1;
                let mut data = vec![0f64; oc * oh * ow];
                for o in 0..oc {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = p.bias.data()[o] as f64;
                            for c in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (y * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                        let ix = (xo * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += p.weight.data()[((o * ic + c) * kh + ky) * kw + kx] as f64
                                            * x.data[(c * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            data[(o * oh + y) * ow + xo] = acc;
                        }
                    }
                }
                Act {
                    shape: vec![oc, oh, ow],
                    data,
                }
            }
            Op::Dense(p) => {
                let x = arg(0);
                let (o, i) = (p.weight.shape()[0], p.weight.shape()[1]);
                let data = (0..o)
                    .map(|r| {
                        p.bias.data()[r] as f64
                            + (0..i).map(|c| p.weight.data()[r * i + c] as f64 * x.data[c]).sum::<f64>()
                    })
                    .collect();
                Act { shape: vec![o], data }
            }
            Op::Bn(p) => {
                let x = arg(0);
                let inner = x.data.len() / x.shape[0];
                let data = x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let c = k / inner;
                        let s = (p.running_var.data()[c] as f64 + p.epsilon as f64).sqrt();
                        p.gamma.data()[c] as f64 * (v - p.running_mean.data()[c] as f64) / s + p.beta.data()[c] as f64
                    })
                    .collect();
                Act { shape: x.shape, data }
            }
            Op::Relu => {
                let x = arg(0);
                Act {
                    data: x.data.iter().map(|v| v.max(0.0)).collect(),
                    shape: x.shape,
                }
            }
            Op::MaxPool(p) => pool(&arg(0), p.kernel, p.stride, true),
            Op::AvgPool(p) => pool(&arg(0), p.kernel, p.stride, false),
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                Act {
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    shape: a.shape,
                }
            }
            Op::Flatten => {
                let x = arg(0);
                Act {
                    shape: vec![x.data.len()],
                    data: x.data,
                }
            }
            Op::Output => arg(0),
        };
        acts.insert(id.as_str(), out);
    }
    acts.remove(g.output_id()).unwrap().data
}

/// Central differences of logit `target` in f64.
pub fn finite_difference_gradient(g: &ModelGraph, x: &[f64], target: usize, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            (reference_forward(g, &p)[target] - reference_forward(g, &m)[target]) / (2.0 * h)
        })
        .collect()
}
