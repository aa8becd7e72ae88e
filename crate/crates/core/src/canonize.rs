//! BatchNorm fusion pass.
//!
//! A `Linear -> BN` pair where the BN is the linear node's only consumer is
//! replaced by a single linear node with parameters
//!
//! ```text
//! w_c = (gamma / s) * w
//! b_c = (gamma / s) * (b - running_mean) + beta,   s = sqrt(running_var + eps)
//! ```
//!
//! which computes the same function. Everything else in the graph is left
//! untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{ModelGraph, Node, Op, OpKind};
use crate::kernels::{BnParams, ConvParams, DenseParams};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRecord {
    pub linear_node_id: String,
    pub bn_node_id: String,
    pub fused_weight: Tensor,
    pub fused_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Canonized {
    pub graph: ModelGraph,
    pub fusions: Vec<FusionRecord>,
    /// BN nodes that had no eligible linear predecessor and were kept.
    pub unfused: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub n_trials: usize,
    pub max_abs_diff: f32,
    pub max_rel_diff: f32,
    pub tolerance: f32,
    pub passed: bool,
}

/// Folds `bn` into a linear layer whose output channels run along dim 0 of
/// `weight` (conv `[out, in, kh, kw]` and dense `[out, in]` alike).
pub fn fuse_params(weight: &Tensor, bias: &Tensor, bn: &BnParams) -> Result<(Tensor, Tensor)> {
    let out = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::shape("fuse", "weight has rank 0"))?;
    if bn.channels() != out || bias.len() != out {
        return Err(Error::shape(
            "fuse",
            format!(
                "bn has {} channels, linear layer has {} outputs and {} biases",
                bn.channels(),
                out,
                bias.len()
            ),
        ));
    }
    bn.validate()?;
    let per = weight.len() / out;
    let mut w = weight.clone();
    let mut b = bias.clone();
    for o in 0..out {
        let var = bn.running_var.data()[o] as f64 + bn.epsilon as f64;
        if var.is_nan() || var <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bn channel {} has non-positive variance + epsilon",
                o
            )));
        }
        let k = bn.gamma.data()[o] as f64 / var.sqrt();
        for v in &mut w.data_mut()[o * per..(o + 1) * per] {
            *v = (k * *v as f64) as f32;
        }
        let bo = &mut b.data_mut()[o];
        *bo = (k * (*bo as f64 - bn.running_mean.data()[o] as f64) + bn.beta.data()[o] as f64) as f32;
    }
    Ok((w, b))
}

/// Returns the linear predecessor of `bn_id` if the pair can be fused.
fn fusable_predecessor<'g>(g: &'g ModelGraph, bn_id: &str) -> Option<&'g Node> {
    let bn = g.node(bn_id)?;
    let pred = g.node(bn.inputs.first()?)?;
    (pred.op.kind().is_linear() && g.consumers(&pred.id) == [bn_id]).then_some(pred)
}

pub fn canonize_pass(g: &ModelGraph) -> Result<Canonized> {
    let mut fusions = Vec::new();
    let mut unfused = Vec::new();
    // bn id -> linear id it is folded into
    let mut folded: Vec<(String, String)> = Vec::new();
    let mut replaced: Vec<(String, Op)> = Vec::new();

    for id in g.topo_order() {
        let node = g.node(id).expect("ordered id");
        let Op::Bn(bn) = &node.op else { continue };
        let Some(pred) = fusable_predecessor(g, id) else {
            unfused.push(id.clone());
            continue;
        };
        let (op, weight, bias) = match &pred.op {
            Op::Conv(p) => {
                let (weight, bias) = fuse_params(&p.weight, &p.bias, bn)?;
                let op = Op::Conv(ConvParams {
                    weight: weight.clone(),
                    bias: bias.clone(),
                    ..p.clone()
                });
                (op, weight, bias)
            }
            Op::Dense(p) => {
                let (weight, bias) = fuse_params(&p.weight, &p.bias, bn)?;
                let op = Op::Dense(DenseParams {
                    weight: weight.clone(),
                    bias: bias.clone(),
                });
                (op, weight, bias)
            }
            _ => unreachable!("fusable predecessor is linear"),
        };
        fusions.push(FusionRecord {
            linear_node_id: pred.id.clone(),
            bn_node_id: id.clone(),
            fused_weight: weight,
            fused_bias: bias,
        });
        folded.push((id.clone(), pred.id.clone()));
        replaced.push((pred.id.clone(), op));
    }

    if fusions.is_empty() {
        return Ok(Canonized {
            graph: g.clone(),
            fusions,
            unfused,
        });
    }

    let rename = |id: &str| -> String {
        folded
            .iter()
            .find(|(bn, _)| bn == id)
            .map(|(_, lin)| lin.clone())
            .unwrap_or_else(|| id.to_string())
    };
    let (nodes, output_id, input_shape, input_range) = g.clone().into_parts();
    let nodes: Vec<Node> = nodes
        .into_iter()
        .filter(|n| !folded.iter().any(|(bn, _)| *bn == n.id))
        .map(|mut n| {
            if let Some((_, op)) = replaced.iter().find(|(lin, _)| *lin == n.id) {
                n.op = op.clone();
            }
            for i in &mut n.inputs {
                *i = rename(i);
            }
            n
        })
        .collect();
    let graph = ModelGraph::new(nodes, rename(&output_id), input_shape, input_range)?;
    debug_assert_eq!(graph.count_kind(OpKind::Bn), unfused.len());
    Ok(Canonized {
        graph,
        fusions,
        unfused,
    })
}

/// Compares two graphs on `n_trials` seeded inputs drawn uniformly from [-3, 3].
pub fn verify_equivalence(
    original: &ModelGraph,
    canonized: &ModelGraph,
    n_trials: usize,
    tolerance: f32,
    seed: u64,
) -> Result<EquivalenceReport> {
    if original.input_shape() != canonized.input_shape() {
        return Err(Error::shape(
            "verify",
            format!(
                "input shapes differ: {:?} vs {:?}",
                original.input_shape(),
                canonized.input_shape()
            ),
        ));
    }
    const CHUNK: usize = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = original.input_shape().iter().product();
    let (mut max_abs, mut max_rel) = (0f32, 0f32);
    let mut done = 0;
    while done < n_trials {
        let n = CHUNK.min(n_trials - done);
        let mut shape = vec![n];
        shape.extend_from_slice(original.input_shape());
        let x = Tensor::new(shape, (0..n * per).map(|_| rng.gen_range(-3.0f32..=3.0)).collect())?;
        let a = original.forward(&x)?;
        let b = canonized.forward(&x)?;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "verify",
                format!("output shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        for (&u, &v) in a.data().iter().zip(b.data()) {
            let d = (u - v).abs();
            max_abs = max_abs.max(d);
            let denom = u.abs().max(v.abs());
            if denom > 0.0 {
                max_rel = max_rel.max(d / denom);
            }
        }
        done += n;
    }
    Ok(EquivalenceReport {
        n_trials,
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        tolerance,
        passed: max_abs <= tolerance,
    })
}
