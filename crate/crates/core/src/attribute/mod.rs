//! Attribution methods.
//!
//! Every method is one reverse sweep over the graph in reverse topological
//! order. Gradient-family methods run the ordinary chain rule (optionally with
//! guided ReLUs); rule-based methods dispatch each node to the relevance rule
//! assigned to it by a [`RuleMap`]. Nodes with several consumers sum what
//! they receive.

mod composite;
mod rules;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use composite::{excitation_assignment, lrp_composite_assignment, LrpComposite, Rule, RuleMap};
pub use rules::{lrp_add, lrp_avgpool, lrp_bn, lrp_linear_rule, stabilize, BnRule, LinearLayer, LinearRule};

use crate::error::{Error, Result};
use crate::ir::{relabel, Activations, ModelGraph, Op};
use crate::kernels::{self, ReluMode};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-6;
pub const DEFAULT_IG_STEPS: usize = 32;
const IG_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Gradient,
    InputXGradient,
    IntegratedGradients,
    GuidedBackprop,
    ExcitationBackprop,
    Lrp(LrpComposite),
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Gradient,
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GuidedBackprop,
        Method::ExcitationBackprop,
        Method::Lrp(LrpComposite::EpsilonOnly),
        Method::Lrp(LrpComposite::EpsAlpha2Beta1),
        Method::Lrp(LrpComposite::EpsAlpha2Beta1Flat),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::InputXGradient => "input_x_gradient",
            Method::IntegratedGradients => "integrated_gradients",
            Method::GuidedBackprop => "guided_backprop",
            Method::ExcitationBackprop => "excitation_backprop",
            Method::Lrp(LrpComposite::EpsilonOnly) => "lrp_epsilon",
            Method::Lrp(LrpComposite::EpsAlpha2Beta1) => "lrp_eps_alpha2beta1",
            Method::Lrp(LrpComposite::EpsAlpha2Beta1Flat) => "lrp_eps_alpha2beta1_flat",
        }
    }

    /// Gradient-family methods only see the function, not its implementation.
    pub fn is_gradient_based(self) -> bool {
        matches!(
            self,
            Method::Gradient | Method::InputXGradient | Method::IntegratedGradients | Method::GuidedBackprop
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{}`", s)))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default)]
    pub bn_rule: BnRule,
}

fn default_epsilon() -> f32 {
    DEFAULT_EPSILON
}

fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            epsilon: DEFAULT_EPSILON,
            ig_steps: DEFAULT_IG_STEPS,
            bn_rule: BnRule::default(),
        }
    }

    pub fn with_bn_rule(mut self, bn_rule: BnRule) -> Self {
        self.bn_rule = bn_rule;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_ig_steps(mut self, steps: usize) -> Self {
        self.ig_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        rules::check_epsilon(self.epsilon)?;
        if self.ig_steps == 0 {
            return Err(Error::InvalidArgument("ig_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Same shape as the explained input.
    pub values: Tensor,
    pub method: Method,
    pub target_class: usize,
}

/// Relevance received by, and passed on from, every node of one LRP sweep.
#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    /// Relevance arriving at each node's output.
    pub incoming: BTreeMap<String, Tensor>,
    /// Total relevance each node sent to its inputs.
    pub emitted: BTreeMap<String, f64>,
    /// Relevance at the input node.
    pub input: Tensor,
}

enum Sweep<'a> {
    Gradient(ReluMode),
    Relevance { rules: &'a RuleMap, eps: f32, method: &'a str },
}

struct Flow {
    incoming: BTreeMap<String, Tensor>,
    emitted: BTreeMap<String, f64>,
}

/// Walks the graph backwards from `seed` (shaped like the output activation).
fn sweep(g: &ModelGraph, acts: &Activations, seed: Tensor, how: &Sweep<'_>, keep: bool) -> Result<Flow> {
    let mut pending: BTreeMap<String, Tensor> = BTreeMap::new();
    pending.insert(g.output_id().to_string(), seed);
    let mut kept = BTreeMap::new();
    let mut emitted = BTreeMap::new();
    for id in g.topo_order().iter().rev() {
        let node = g.node(id).expect("ordered id");
        let upstream = pending
            .remove(id)
            .ok_or_else(|| Error::InvalidGraph(format!("node `{}` received nothing", id)))?;
        if matches!(node.op, Op::Input) {
            pending.insert(id.clone(), upstream);
            break;
        }
        let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &acts[i]).collect();
        let out = &acts[id];
        let grads = match how {
            Sweep::Gradient(mode) => backward_node(&node.op, &ins, &upstream, *mode),
            Sweep::Relevance { rules, eps, method } => {
                let rule = rules.get(id).copied().ok_or_else(|| Error::UnsupportedByMethod {
                    node: id.clone(),
                    op: node.op.kind().to_string(),
                    method: method.to_string(),
                })?;
                relevance_node(id, &node.op, &ins, out, &upstream, rule, *eps, method)
            }
        }
        .map_err(|e| relabel(e, id))?;
        if keep {
            emitted.insert(id.clone(), grads.iter().map(Tensor::sum).sum());
            kept.insert(id.clone(), upstream);
        }
        for (input, grad) in node.inputs.iter().zip(grads) {
            match pending.get_mut(input) {
                Some(acc) => acc.add_assign(&grad)?,
                None => {
                    pending.insert(input.clone(), grad);
                }
            }
        }
    }
    let input = pending
        .remove(g.input_id())
        .ok_or_else(|| Error::InvalidGraph("nothing reached the input".into()))?;
    kept.insert(g.input_id().to_string(), input);
    Ok(Flow {
        incoming: kept,
        emitted,
    })
}

fn backward_node(op: &Op, ins: &[&Tensor], g: &Tensor, mode: ReluMode) -> Result<Vec<Tensor>> {
    Ok(match op {
        Op::Input => vec![],
        Op::Conv(p) => vec![kernels::conv2d_input_grad(g, p, ins[0].shape())?],
        Op::Dense(p) => vec![kernels::dense_input_grad(g, p, ins[0].shape())?],
        Op::Bn(p) => vec![kernels::bn_input_grad(g, p)?],
        Op::Relu => vec![kernels::relu_backward(g, ins[0], mode)?],
        Op::MaxPool(p) => vec![kernels::maxpool2d_backward(g, ins[0], p)?],
        Op::AvgPool(p) => vec![kernels::avgpool2d_backward(g, ins[0].shape(), p)?],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Flatten => vec![g.reshape(ins[0].shape())?],
        Op::Output => vec![g.clone()],
    })
}

#[allow(clippy::too_many_arguments)]
fn relevance_node(
    id: &str,
    op: &Op,
    ins: &[&Tensor],
    _out: &Tensor,
    r: &Tensor,
    rule: Rule,
    eps: f32,
    method: &str,
) -> Result<Vec<Tensor>> {
    let mismatch = || Error::UnsupportedByMethod {
        node: id.to_string(),
        op: op.kind().to_string(),
        method: method.to_string(),
    };
    Ok(match (op, rule) {
        (Op::Conv(p), Rule::Linear(lr)) => vec![lrp_linear_rule(ins[0], LinearLayer::Conv(p), r, lr, eps)?],
        (Op::Dense(p), Rule::Linear(lr)) => vec![lrp_linear_rule(ins[0], LinearLayer::Dense(p), r, lr, eps)?],
        (Op::Bn(p), Rule::Bn(br)) => vec![lrp_bn(ins[0], p, r, br, eps)?],
        (Op::Add, Rule::ProportionalSplit) => {
            let (a, b) = lrp_add(ins[0], ins[1], r, eps)?;
            vec![a, b]
        }
        (Op::MaxPool(p), Rule::WinnerTakeAll) => vec![kernels::maxpool2d_backward(r, ins[0], p)?],
        (Op::AvgPool(p), Rule::UniformPool) => vec![lrp_avgpool(ins[0], p, r, eps)?],
        (Op::Relu | Op::Output, Rule::Passthrough) => vec![r.clone()],
        (Op::Flatten, Rule::Passthrough) => vec![r.reshape(ins[0].shape())?],
        _ => return Err(mismatch()),
    })
}

/// Target logit row of a `[N, classes]` output, validated.
fn check_target(logits: &Tensor, target: usize) -> Result<()> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "output",
            format!("attribution needs [N, classes] logits, got {:?}", logits.shape()),
        ));
    }
    if target >= logits.shape()[1] {
        return Err(Error::InvalidArgument(format!(
            "target {} out of range for {} classes",
            target,
            logits.shape()[1]
        )));
    }
    Ok(())
}

/// One-hot seed per batch row, scaled by the logit itself when `by_value`.
fn one_hot(logits: &Tensor, target: usize, by_value: bool) -> Tensor {
    let classes = logits.shape()[1];
    Tensor::from_fn(logits.shape(), |i| match (i % classes == target, by_value) {
        (true, true) => logits.data()[i],
        (true, false) => 1.0,
        _ => 0.0,
    })
}

/// Gradient of the target logit for every item of a batch (or a single sample).
fn batch_gradient(g: &ModelGraph, x: &Tensor, target: usize, mode: ReluMode) -> Result<Tensor> {
    let acts = g.forward_trace(x)?;
    let logits = &acts[g.output_id()];
    check_target(logits, target)?;
    let flow = sweep(g, &acts, one_hot(logits, target, false), &Sweep::Gradient(mode), false)?;
    let mut grads = flow.incoming;
    grads
        .remove(g.input_id())
        .expect("input gradient")
        .into_reshaped(x.shape())
}

pub fn gradient(g: &ModelGraph, x: &Tensor, target: usize) -> Result<Tensor> {
    single(g, x)?;
    batch_gradient(g, x, target, ReluMode::Standard)
}

pub fn guided_backprop(g: &ModelGraph, x: &Tensor, target: usize) -> Result<Tensor> {
    single(g, x)?;
    batch_gradient(g, x, target, ReluMode::Guided)
}

/// Midpoint Riemann sum of the straight-line path integral from `baseline`
/// (zeros when `None`) to `x`.
pub fn integrated_gradients(
    g: &ModelGraph,
    x: &Tensor,
    target: usize,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<Tensor> {
    single(g, x)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs >= 1 step".into()));
    }
    let zeros;
    let baseline = match baseline {
        Some(b) => {
            x.expect_same_shape(b, "ig baseline")?;
            b
        }
        None => {
            zeros = Tensor::zeros(x.shape());
            &zeros
        }
    };
    let delta = x.sub(baseline)?;
    let batched = g.batched(x)?;
    let per = x.len();
    let mut mean = vec![0f64; per];
    let mut k = 0;
    while k < steps {
        let n = IG_CHUNK.min(steps - k);
        let mut points = Vec::with_capacity(n * per);
        for i in k..k + n {
            let t = (i as f64 + 0.5) / steps as f64;
            points.extend(
                baseline
                    .data()
                    .iter()
                    .zip(delta.data())
                    .map(|(&b, &d)| (b as f64 + t * d as f64) as f32),
            );
        }
        let mut shape = batched.shape().to_vec();
        shape[0] = n;
        let grads = batch_gradient(g, &Tensor::new(shape, points)?, target, ReluMode::Standard)?;
        for (j, &v) in grads.data().iter().enumerate() {
            mean[j % per] += v as f64;
        }
        k += n;
    }
    Tensor::new(
        x.shape().to_vec(),
        mean.iter()
            .zip(delta.data())
            .map(|(&s, &d)| (s / steps as f64 * d as f64) as f32)
            .collect(),
    )
}

/// LRP sweep with an explicit rule map, keeping per-node relevance.
pub fn lrp_trace(g: &ModelGraph, x: &Tensor, target: usize, rules: &RuleMap, eps: f32) -> Result<RelevanceTrace> {
    lrp_trace_named(g, x, target, rules, eps, "custom")
}

fn lrp_trace_named(
    g: &ModelGraph,
    x: &Tensor,
    target: usize,
    rules: &RuleMap,
    eps: f32,
    method: &str,
) -> Result<RelevanceTrace> {
    single(g, x)?;
    rules::check_epsilon(eps)?;
    let acts = g.forward_trace(x)?;
    let logits = &acts[g.output_id()];
    check_target(logits, target)?;
    let seed = one_hot(logits, target, true);
    let flow = sweep(g, &acts, seed, &Sweep::Relevance { rules, eps, method }, true)?;
    let input = flow.incoming[g.input_id()].clone().into_reshaped(x.shape())?;
    Ok(RelevanceTrace {
        incoming: flow.incoming,
        emitted: flow.emitted,
        input,
    })
}

pub fn excitation_backprop(g: &ModelGraph, x: &Tensor, target: usize, cfg: &MethodConfig) -> Result<Tensor> {
    let rules = excitation_assignment(g, cfg.bn_rule);
    Ok(lrp_trace_named(g, x, target, &rules, cfg.epsilon, Method::ExcitationBackprop.name())?.input)
}

pub fn lrp(g: &ModelGraph, x: &Tensor, target: usize, composite: LrpComposite, cfg: &MethodConfig) -> Result<Tensor> {
    let rules = lrp_composite_assignment(g, composite, cfg.bn_rule);
    Ok(lrp_trace_named(g, x, target, &rules, cfg.epsilon, Method::Lrp(composite).name())?.input)
}

/// Explains `target` for the single sample `x` (`input_shape` or `[1, ..]`).
pub fn attribute(g: &ModelGraph, x: &Tensor, target: usize, cfg: &MethodConfig) -> Result<AttributionMap> {
    cfg.validate()?;
    let values = match cfg.method {
        Method::Gradient => gradient(g, x, target)?,
        Method::InputXGradient => gradient(g, x, target)?.mul(x)?,
        Method::IntegratedGradients => integrated_gradients(g, x, target, cfg.ig_steps, None)?,
        Method::GuidedBackprop => guided_backprop(g, x, target)?,
        Method::ExcitationBackprop => excitation_backprop(g, x, target, cfg)?,
        Method::Lrp(c) => lrp(g, x, target, c, cfg)?,
    };
    Ok(AttributionMap {
        values,
        method: cfg.method,
        target_class: target,
    })
}

fn single(g: &ModelGraph, x: &Tensor) -> Result<()> {
    let b = g.batched(x)?;
    if b.shape()[0] != 1 {
        return Err(Error::InvalidArgument(format!(
            "attribution explains one sample, got batch of {}",
            b.shape()[0]
        )));
    }
    Ok(())
}
