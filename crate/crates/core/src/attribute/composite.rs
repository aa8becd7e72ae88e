//! Layer-wise rule assignment for LRP composites.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rules::{BnRule, LinearRule};
use crate::error::{Error, Result};
use crate::ir::{ModelGraph, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrpComposite {
    EpsilonOnly,
    EpsAlpha2Beta1,
    EpsAlpha2Beta1Flat,
}

impl LrpComposite {
    pub fn as_str(self) -> &'static str {
        match self {
            LrpComposite::EpsilonOnly => "epsilon_only",
            LrpComposite::EpsAlpha2Beta1 => "eps_alpha2beta1",
            LrpComposite::EpsAlpha2Beta1Flat => "eps_alpha2beta1_flat",
        }
    }
}

impl fmt::Display for LrpComposite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LrpComposite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon_only" => Ok(LrpComposite::EpsilonOnly),
            "eps_alpha2beta1" => Ok(LrpComposite::EpsAlpha2Beta1),
            "eps_alpha2beta1_flat" => Ok(LrpComposite::EpsAlpha2Beta1Flat),
            other => Err(Error::InvalidArgument(format!("unknown LRP composite `{}`", other))),
        }
    }
}

/// What a node does with the relevance it receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Linear(LinearRule),
    Bn(BnRule),
    /// Residual sum: split by each operand's share of the sum.
    ProportionalSplit,
    /// Max pooling: everything to the window's argmax.
    WinnerTakeAll,
    /// Average pooling as a uniform-weight layer under the epsilon rule.
    UniformPool,
    /// ReLU, flatten and output nodes.
    Passthrough,
    /// The input node.
    Terminal,
}

pub type RuleMap = BTreeMap<String, Rule>;

const ALPHA2_BETA1: LinearRule = LinearRule::AlphaBeta {
    alpha: 2.0,
    beta: 1.0,
};

/// Rules for every node of `g` under a composite.
pub fn lrp_composite_assignment(g: &ModelGraph, composite: LrpComposite, bn_rule: BnRule) -> RuleMap {
    let first_conv = g
        .topo_order()
        .iter()
        .find(|id| g.node(id).map(|n| n.op.kind()) == Some(OpKind::Conv))
        .cloned();
    assign(g, bn_rule, |id, kind| match (composite, kind) {
        (LrpComposite::EpsilonOnly, _) | (_, OpKind::Dense) => LinearRule::Epsilon,
        (LrpComposite::EpsAlpha2Beta1Flat, _) if first_conv.as_deref() == Some(id) => LinearRule::Flat,
        _ => ALPHA2_BETA1,
    })
}

/// Excitation backprop: positive-contribution rule on every linear layer.
pub fn excitation_assignment(g: &ModelGraph, bn_rule: BnRule) -> RuleMap {
    assign(g, bn_rule, |_, _| LinearRule::ExcitationPositive)
}

fn assign(g: &ModelGraph, bn_rule: BnRule, linear: impl Fn(&str, OpKind) -> LinearRule) -> RuleMap {
    g.nodes()
        .map(|n| {
            let kind = n.op.kind();
            let rule = match kind {
                OpKind::Conv | OpKind::Dense => Rule::Linear(linear(&n.id, kind)),
                OpKind::Bn => Rule::Bn(bn_rule),
                OpKind::Add => Rule::ProportionalSplit,
                OpKind::MaxPool => Rule::WinnerTakeAll,
                OpKind::AvgPool => Rule::UniformPool,
                OpKind::Relu | OpKind::Flatten | OpKind::Output => Rule::Passthrough,
                OpKind::Input => Rule::Terminal,
            };
            (n.id.clone(), rule)
        })
        .collect()
}
