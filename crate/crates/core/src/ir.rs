//! Graph IR: nodes, validation, shape inference and topological execution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, BnParams, ConvParams, DenseParams, PoolParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Input,
    Conv,
    Dense,
    Bn,
    Relu,
    MaxPool,
    AvgPool,
    Add,
    Flatten,
    Output,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv => "conv",
            OpKind::Dense => "dense",
            OpKind::Bn => "bn",
            OpKind::Relu => "relu",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::Add => "add",
            OpKind::Flatten => "flatten",
            OpKind::Output => "output",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add => 2,
            _ => 1,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, OpKind::Conv | OpKind::Dense)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "input" => OpKind::Input,
            "conv" => OpKind::Conv,
            "dense" => OpKind::Dense,
            "bn" => OpKind::Bn,
            "relu" => OpKind::Relu,
            "maxpool" => OpKind::MaxPool,
            "avgpool" => OpKind::AvgPool,
            "add" => OpKind::Add,
            "flatten" => OpKind::Flatten,
            "output" => OpKind::Output,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv(ConvParams),
    Dense(DenseParams),
    Bn(BnParams),
    Relu,
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    Add,
    Flatten,
    Output,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv(_) => OpKind::Conv,
            Op::Dense(_) => OpKind::Dense,
            Op::Bn(_) => OpKind::Bn,
            Op::Relu => OpKind::Relu,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::Add => OpKind::Add,
            Op::Flatten => OpKind::Flatten,
            Op::Output => OpKind::Output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A validated, immutable network graph.
///
/// Construction checks arity, reachability, acyclicity and end-to-end shape
/// inference, so every `ModelGraph` in circulation can be executed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: BTreeMap<String, Node>,
    input_id: String,
    output_id: String,
    input_shape: Vec<usize>,
    input_range: (f32, f32),
    order: Vec<String>,
}

/// Per-node activations of one forward pass.
pub type Activations = BTreeMap<String, Tensor>;

impl ModelGraph {
    /// `input_shape` excludes the batch dimension; `input_range` is the declared
    /// `[min, max]` domain of valid input values.
    pub fn new(
        nodes: Vec<Node>,
        output_id: impl Into<String>,
        input_shape: Vec<usize>,
        input_range: (f32, f32),
    ) -> Result<Self> {
        let output_id = output_id.into();
        let mut map = BTreeMap::new();
        for node in nodes {
            if map.contains_key(&node.id) {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", node.id)));
            }
            map.insert(node.id.clone(), node);
        }
        for node in map.values() {
            let kind = node.op.kind();
            if node.inputs.len() != kind.arity() {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` ({}) takes {} inputs, has {}",
                    node.id,
                    kind,
                    kind.arity(),
                    node.inputs.len()
                )));
            }
            for i in &node.inputs {
                if !map.contains_key(i) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` references unknown input `{}`",
                        node.id, i
                    )));
                }
            }
            match &node.op {
                Op::Conv(p) => p.validate(),
                Op::Dense(p) => p.validate(),
                Op::Bn(p) => p.validate(),
                _ => Ok(()),
            }
            .map_err(|e| relabel(e, &node.id))?;
        }
        let inputs: Vec<_> = map
            .values()
            .filter(|n| n.op.kind() == OpKind::Input)
            .map(|n| n.id.clone())
            .collect();
        let input_id = match inputs.as_slice() {
            [one] => one.clone(),
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "expected exactly one input node, found {}",
                    inputs.len()
                )))
            }
        };
        if !map.contains_key(&output_id) {
            return Err(Error::InvalidGraph(format!("output node `{}` does not exist", output_id)));
        }
        if input_range.0.is_nan() || input_range.1.is_nan() || input_range.0 >= input_range.1 {
            return Err(Error::InvalidGraph(format!("empty input range {:?}", input_range)));
        }
        let order = topo_order(&map)?;

        // every node must lie on a path input -> output
        let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for n in map.values() {
            for i in &n.inputs {
                consumers.entry(i.as_str()).or_default().push(n.id.as_str());
            }
        }
        let mut from_input = BTreeSet::new();
        let mut stack = vec![input_id.as_str()];
        while let Some(id) = stack.pop() {
            if from_input.insert(id) {
                stack.extend(consumers.get(id).into_iter().flatten());
            }
        }
        let mut to_output = BTreeSet::new();
        let mut stack = vec![output_id.as_str()];
        while let Some(id) = stack.pop() {
            if to_output.insert(id) {
                stack.extend(map[id].inputs.iter().map(String::as_str));
            }
        }
        for id in map.keys() {
            if !from_input.contains(id.as_str()) {
                return Err(Error::InvalidGraph(format!("node `{}` is unreachable from the input", id)));
            }
            if !to_output.contains(id.as_str()) {
                return Err(Error::InvalidGraph(format!("node `{}` does not feed the output", id)));
            }
        }

        let graph = ModelGraph {
            nodes: map,
            input_id,
            output_id,
            input_shape,
            input_range,
            order,
        };
        graph.infer_shapes(1)?;
        Ok(graph)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_id(&self) -> &str {
        &self.input_id
    }

    pub fn output_id(&self) -> &str {
        &self.output_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_range(&self) -> (f32, f32) {
        self.input_range
    }

    /// Stable topological order; ready nodes are taken in id order.
    pub fn topo_order(&self) -> &[String] {
        &self.order
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.values().filter(|n| n.op.kind() == kind).count()
    }

    /// Ids of nodes consuming `id`, sorted.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Consumes the graph, returning its raw parts.
    pub fn into_parts(self) -> (Vec<Node>, String, Vec<usize>, (f32, f32)) {
        (
            self.nodes.into_values().collect(),
            self.output_id,
            self.input_shape,
            self.input_range,
        )
    }

    /// Static output shape of every node for a given batch size.
    pub fn infer_shapes(&self, batch: usize) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for id in &self.order {
            let node = &self.nodes[id];
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|i| &shapes[i]).collect();
            let shape = match &node.op {
                Op::Input => {
                    let mut s = vec![batch];
                    s.extend_from_slice(&self.input_shape);
                    Ok(s)
                }
                Op::Conv(p) => p.output_shape(ins[0]),
                Op::Dense(p) => p.output_shape(ins[0]),
                Op::Bn(p) => {
                    if ins[0].len() >= 2 && ins[0][1] == p.channels() {
                        Ok(ins[0].clone())
                    } else {
                        Err(Error::shape(id, format!("bn with {} channels on {:?}", p.channels(), ins[0])))
                    }
                }
                Op::MaxPool(p) | Op::AvgPool(p) => p.output_shape(ins[0]),
                Op::Add => {
                    if ins[0] == ins[1] {
                        Ok(ins[0].clone())
                    } else {
                        Err(Error::shape(id, format!("add of {:?} and {:?}", ins[0], ins[1])))
                    }
                }
                Op::Flatten => kernels::flatten_shape(ins[0]),
                Op::Relu | Op::Output => Ok(ins[0].clone()),
            }
            .map_err(|e| relabel(e, id))?;
            shapes.insert(id.clone(), shape);
        }
        Ok(shapes)
    }

    /// Runs the graph. Accepts `input_shape` or `[N, ..input_shape]`; the result
    /// always carries the batch dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut acts = self.run(x, false)?;
        Ok(acts.remove(&self.output_id).expect("output activation"))
    }

    /// Like [`forward`](Self::forward) but keeps every node's activation.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Activations> {
        self.run(x, true)
    }

    /// Brings `x` to `[N, ..input_shape]`.
    pub fn batched(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() == self.input_shape.as_slice() {
            Ok(x.unsqueeze0())
        } else if x.rank() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..] {
            Ok(x.clone())
        } else {
            Err(Error::shape(
                &self.input_id,
                format!("input {:?} does not match declared shape {:?}", x.shape(), self.input_shape),
            ))
        }
    }

    fn run(&self, x: &Tensor, keep_all: bool) -> Result<Activations> {
        let x = self.batched(x)?;
        let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
        for n in self.nodes.values() {
            for i in &n.inputs {
                *remaining.entry(i.as_str()).or_default() += 1;
            }
        }
        let mut acts: Activations = BTreeMap::new();
        for id in &self.order {
            let node = &self.nodes[id];
            let out = {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &acts[i]).collect();
                eval_node(node, &ins, &x).map_err(|e| relabel(e, id))?
            };
            acts.insert(id.clone(), out);
            if !keep_all {
                for i in &node.inputs {
                    let left = remaining.get_mut(i.as_str()).expect("counted");
                    *left -= 1;
                    if *left == 0 && *i != self.output_id {
                        acts.remove(i);
                    }
                }
            }
        }
        Ok(acts)
    }
}

fn eval_node(node: &Node, ins: &[&Tensor], x: &Tensor) -> Result<Tensor> {
    match &node.op {
        Op::Input => Ok(x.clone()),
        Op::Conv(p) => kernels::conv2d_forward(ins[0], p),
        Op::Dense(p) => kernels::dense_forward(ins[0], p),
        Op::Bn(p) => kernels::bn_forward(ins[0], p),
        Op::Relu => Ok(kernels::relu_forward(ins[0])),
        Op::MaxPool(p) => kernels::maxpool2d_forward(ins[0], p),
        Op::AvgPool(p) => kernels::avgpool2d_forward(ins[0], p),
        Op::Add => kernels::add_forward(ins[0], ins[1]),
        Op::Flatten => kernels::flatten(ins[0]),
        Op::Output => Ok(ins[0].clone()),
    }
}

fn topo_order(nodes: &BTreeMap<String, Node>) -> Result<Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> = nodes.keys().map(|k| (k.as_str(), 0)).collect();
    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in nodes.values() {
        for i in &n.inputs {
            *indegree.get_mut(n.id.as_str()).expect("known") += 1;
            consumers.entry(i.as_str()).or_default().push(n.id.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &c in consumers.get(id).into_iter().flatten() {
            let d = indegree.get_mut(c).expect("known");
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        return Err(Error::InvalidGraph("graph contains a cycle".into()));
    }
    Ok(order)
}

/// Attaches a node id to kernel-level shape errors.
pub(crate) fn relabel(e: Error, node: &str) -> Error {
    match e {
        Error::Shape { msg, node: kernel } => Error::Shape {
            node: node.to_string(),
            msg: format!("{}: {}", kernel, msg),
        },
        other => other,
    }
}

/// Sequential graph construction helper. Each `push_*` call consumes the most
/// recently added node unless an explicit input is given.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    last: String,
    input_shape: Vec<usize>,
    input_range: (f32, f32),
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize], input_range: (f32, f32)) -> Self {
        GraphBuilder {
            nodes: vec![Node::new("input", Op::Input, &[])],
            last: "input".into(),
            input_shape: input_shape.to_vec(),
            input_range,
        }
    }

    pub fn last(&self) -> &str {
        &self.last
    }

    pub fn push(&mut self, id: &str, op: Op) -> &mut Self {
        let last = self.last.clone();
        self.push_from(id, op, &[&last])
    }

    pub fn push_from(&mut self, id: &str, op: Op, inputs: &[&str]) -> &mut Self {
        self.nodes.push(Node::new(id, op, inputs));
        self.last = id.to_string();
        self
    }

    pub fn build(mut self) -> Result<ModelGraph> {
        let last = self.last.clone();
        self.nodes.push(Node::new("output", Op::Output, &[&last]));
        ModelGraph::new(self.nodes, "output", self.input_shape, self.input_range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{conv2d_forward, ConvParams};

    fn scalar_conv(w: f32, b: f32) -> Op {
        Op::Conv(ConvParams {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
            bias: Tensor::new(vec![1], vec![b]).unwrap(),
            stride: (1, 1),
            padding: (0, 0),
        })
    }

    #[test]
    fn identity_graph_passes_input_through() {
        let g = GraphBuilder::new(&[2, 3, 3], (-1.0, 1.0)).build().unwrap();
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32);
        assert_eq!(g.forward(&x).unwrap(), x);
    }

    #[test]
    fn conv_relu_clips() {
        let mut b = GraphBuilder::new(&[1, 1, 1], (-1.0, 1.0));
        b.push("conv", scalar_conv(3.0, 1.0)).push("relu", Op::Relu);
        let g = b.build().unwrap();
        let y = g.forward(&Tensor::new(vec![1, 1, 1], vec![-1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn rejects_bad_arity_cycles_and_dangling() {
        let nodes = vec![
            Node::new("input", Op::Input, &[]),
            Node::new("add", Op::Add, &["input"]),
            Node::new("output", Op::Output, &["add"]),
        ];
        assert!(matches!(
            ModelGraph::new(nodes, "output", vec![1, 1, 1], (0.0, 1.0)),
            Err(Error::InvalidGraph(_))
        ));

        let nodes = vec![
            Node::new("input", Op::Input, &[]),
            Node::new("a", Op::Relu, &["b"]),
            Node::new("b", Op::Relu, &["a"]),
            Node::new("output", Op::Output, &["input"]),
        ];
        assert!(ModelGraph::new(nodes, "output", vec![1, 1, 1], (0.0, 1.0)).is_err());

        let nodes = vec![
            Node::new("input", Op::Input, &[]),
            Node::new("output", Op::Output, &["ghost"]),
        ];
        assert!(ModelGraph::new(nodes, "output", vec![1, 1, 1], (0.0, 1.0)).is_err());
    }

    #[test]
    fn shape_failure_names_node() {
        let mut b = GraphBuilder::new(&[2, 4, 4], (-1.0, 1.0));
        b.push("conv_bad", scalar_conv(1.0, 0.0));
        match b.build() {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "conv_bad"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn topo_order_breaks_ties_by_id() {
        let nodes = vec![
            Node::new("input", Op::Input, &[]),
            Node::new("b_branch", Op::Relu, &["input"]),
            Node::new("a_branch", Op::Relu, &["input"]),
            Node::new("sum", Op::Add, &["a_branch", "b_branch"]),
            Node::new("output", Op::Output, &["sum"]),
        ];
        let g = ModelGraph::new(nodes.clone(), "output", vec![1, 2, 2], (0.0, 1.0)).unwrap();
        assert_eq!(g.topo_order(), &["input", "a_branch", "b_branch", "sum", "output"]);
        let mut rev = nodes;
        rev.reverse();
        let h = ModelGraph::new(rev, "output", vec![1, 2, 2], (0.0, 1.0)).unwrap();
        assert_eq!(g.topo_order(), h.topo_order());
    }

    #[test]
    fn trace_matches_shape_inference() {
        let mut b = GraphBuilder::new(&[1, 4, 4], (-1.0, 1.0));
        b.push("conv", scalar_conv(2.0, 0.0))
            .push("pool", Op::MaxPool(PoolParams { kernel: (2, 2), stride: (2, 2) }))
            .push("flat", Op::Flatten);
        let g = b.build().unwrap();
        let x = Tensor::from_fn(&[3, 1, 4, 4], |i| i as f32);
        let acts = g.forward_trace(&x).unwrap();
        let shapes = g.infer_shapes(3).unwrap();
        for (id, t) in &acts {
            assert_eq!(t.shape(), shapes[id].as_slice(), "{id}");
        }
        let conv = match &g.node("conv").unwrap().op {
            Op::Conv(p) => p.clone(),
            _ => unreachable!(),
        };
        assert_eq!(acts["conv"], conv2d_forward(&x, &conv).unwrap());
    }
}
