//! Dataflow-graph IR: dimensions, tensors, operators and graph validation.

mod bert;
mod einsum;
mod format;

pub use bert::{build_bert_encoder, build_mha, default_dims, toy_dims, Attention};
pub use einsum::{Einsum, EinsumTerm, Operand};
pub use format::{parse_graph_spec, to_graph_spec};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

/// Dimension symbol → extent.
pub type DimTable = BTreeMap<String, u64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Input,
    Parameter,
    Activation,
    Gradient,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorDesc {
    pub id: String,
    pub dims: Vec<String>,
    pub element_bytes: u32,
    pub kind: TensorKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "contraction")]
    Contraction,
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "bias")]
    Bias,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "residual")]
    Residual,
    #[serde(rename = "scale")]
    Scale,
    #[serde(rename = "reduce_sum")]
    ReduceSum,
    #[serde(rename = "composite")]
    Composite,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Contraction => "contraction",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Bias => "bias",
            OpKind::Dropout => "dropout",
            OpKind::Relu => "relu",
            OpKind::Residual => "residual",
            OpKind::Scale => "scale",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Composite => "composite",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "forward")]
    Forward,
    #[serde(rename = "backward_dX")]
    BackwardDx,
    #[serde(rename = "backward_dW")]
    BackwardDw,
}

impl Phase {
    pub fn is_backward(self) -> bool {
        self != Phase::Forward
    }
    pub fn name(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::BackwardDx => "backward_dX",
            Phase::BackwardDw => "backward_dW",
        }
    }
}

/// Loop structure of an operator.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IterationSpace {
    pub independent: Vec<String>,
    pub reduction: Vec<String>,
    pub special_independent: [Vec<String>; 2],
}

/// Links a backward operator to the forward operator it differentiates.
/// `wrt[i]` is the forward input whose gradient is the backward op's
/// `outputs[i]`; `cotangents` maps forward outputs to the gradient tensors
/// flowing into them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradPairing {
    pub of: String,
    pub wrt: Vec<String>,
    pub cotangents: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorNode {
    pub id: String,
    pub op_kind: OpKind,
    pub einsum: Option<Einsum>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub flop_per_point: Option<Ratio<u64>>,
    pub phase: Phase,
    /// Part of multi-head attention.
    pub mha: bool,
    /// Multiplier applied by scale and softmax operators.
    pub factor: Option<f64>,
    pub grad: Option<GradPairing>,
    /// Fused-kernel name, composite operators only.
    pub kernel: Option<String>,
    /// Member operators in execution order, composite operators only.
    pub members: Vec<OperatorNode>,
}

impl OperatorNode {
    pub fn new(id: &str, op_kind: OpKind, phase: Phase, inputs: &[&str], outputs: &[&str]) -> Self {
        OperatorNode {
            id: id.to_string(),
            op_kind,
            einsum: None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            flop_per_point: None,
            phase,
            mha: false,
            factor: None,
            grad: None,
            kernel: None,
            members: Vec::new(),
        }
    }

    pub fn is_contraction(&self) -> bool {
        self.op_kind == OpKind::Contraction
    }

    /// Number of independent lanes processed side by side (stacked biases
    /// and their gradient reductions).
    pub fn lanes(&self) -> u64 {
        match self.op_kind {
            OpKind::Bias | OpKind::ReduceSum => self.outputs.len() as u64,
            _ => 1,
        }
    }

    /// Leaf operators in execution order (the operator itself unless composite).
    pub fn leaves(&self) -> Vec<&OperatorNode> {
        if self.op_kind == OpKind::Composite {
            self.members.iter().flat_map(|m| m.leaves()).collect()
        } else {
            vec![self]
        }
    }

    /// Every tensor written by this operator, including interim tensors of a composite.
    pub fn produced(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
        for l in self.leaves() {
            for o in &l.outputs {
                if !v.contains(&o.as_str()) {
                    v.push(o);
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub producer: String,
    pub tensor: String,
    pub consumer: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema { line: usize, column: usize, message: String },
    #[error("dimension '{0}' must have size >= 1")]
    InvalidDimSize(String),
    #[error("tensor '{tensor}' uses unknown dimension symbol '{symbol}'")]
    UnknownDim { tensor: String, symbol: String },
    #[error("missing dimension symbol '{0}'")]
    MissingDim(String),
    #[error("tensor '{0}' is malformed: {1}")]
    InvalidTensor(String, String),
    #[error("operator '{op}' references unknown tensor '{tensor}'")]
    UnknownTensor { op: String, tensor: String },
    #[error("duplicate operator id '{0}'")]
    DuplicateOperator(String),
    #[error("tensor '{tensor}' is produced by both '{first}' and '{second}'")]
    DuplicateProducer { tensor: String, first: String, second: String },
    #[error("operator '{op}' has an invalid summation string: {message}")]
    InvalidEinsum { op: String, message: String },
    #[error("operator '{op}' is malformed: {message}")]
    InvalidOperator { op: String, message: String },
    #[error("cycle detected among operators {0:?}")]
    Cycle(Vec<String>),
    #[error("tensor '{0}' is neither produced nor consumed")]
    DanglingTensor(String),
    #[error("graph has no operators")]
    EmptyGraph,
    #[error("element count of tensor '{0}' overflows 64 bits")]
    Overflow(String),
}

impl GraphError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::Syntax { .. } => "syntax",
            GraphError::Schema { .. } => "schema",
            GraphError::InvalidDimSize(_) => "invalid-dim-size",
            GraphError::UnknownDim { .. } => "unknown-dim",
            GraphError::MissingDim(_) => "missing-dim",
            GraphError::InvalidTensor(..) => "invalid-tensor",
            GraphError::UnknownTensor { .. } => "unknown-tensor",
            GraphError::DuplicateOperator(_) => "duplicate-operator",
            GraphError::DuplicateProducer { .. } => "duplicate-producer",
            GraphError::InvalidEinsum { .. } => "invalid-einsum",
            GraphError::InvalidOperator { .. } => "invalid-operator",
            GraphError::Cycle(_) => "cycle",
            GraphError::DanglingTensor(_) => "dangling-tensor",
            GraphError::EmptyGraph => "empty-graph",
            GraphError::Overflow(_) => "overflow",
        }
    }
}

/// A validated operator/tensor graph. Construct with [`DataflowGraph::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct DataflowGraph {
    pub dims: DimTable,
    pub tensors: BTreeMap<String, TensorDesc>,
    pub operators: Vec<OperatorNode>,
    pub edges: Vec<Edge>,
    producer: BTreeMap<String, String>,
    consumers: BTreeMap<String, Vec<String>>,
}

fn op_err(op: &OperatorNode, message: impl Into<String>) -> GraphError {
    GraphError::InvalidOperator {
        op: op.id.clone(),
        message: message.into(),
    }
}

impl DataflowGraph {
    pub fn new(
        dims: DimTable,
        tensors: Vec<TensorDesc>,
        operators: Vec<OperatorNode>,
    ) -> Result<Self, GraphError> {
        for (s, n) in &dims {
            if *n == 0 {
                return Err(GraphError::InvalidDimSize(s.clone()));
            }
        }
        let mut tmap = BTreeMap::new();
        for t in tensors {
            if t.dims.is_empty() {
                return Err(GraphError::InvalidTensor(t.id.clone(), "no dimensions".into()));
            }
            if t.element_bytes == 0 {
                return Err(GraphError::InvalidTensor(t.id.clone(), "element_bytes must be >= 1".into()));
            }
            let mut seen = BTreeSet::new();
            let mut count: u64 = 1;
            for d in &t.dims {
                let n = dims.get(d).ok_or_else(|| GraphError::UnknownDim {
                    tensor: t.id.clone(),
                    symbol: d.clone(),
                })?;
                if !seen.insert(d) {
                    return Err(GraphError::InvalidTensor(t.id.clone(), format!("repeated dimension '{d}'")));
                }
                count = count.checked_mul(*n).ok_or_else(|| GraphError::Overflow(t.id.clone()))?;
            }
            if tmap.insert(t.id.clone(), t.clone()).is_some() {
                return Err(GraphError::InvalidTensor(t.id, "duplicate tensor id".into()));
            }
        }
        let mut g = DataflowGraph {
            dims,
            tensors: tmap,
            operators,
            edges: Vec::new(),
            producer: BTreeMap::new(),
            consumers: BTreeMap::new(),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&mut self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for op in &self.operators {
            if !ids.insert(op.id.clone()) {
                return Err(GraphError::DuplicateOperator(op.id.clone()));
            }
            for m in op.leaves() {
                if m.id != op.id && !ids.insert(m.id.clone()) {
                    return Err(GraphError::DuplicateOperator(m.id.clone()));
                }
            }
            self.check_operator(op)?;
        }
        let mut producer: BTreeMap<String, String> = BTreeMap::new();
        let mut consumers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for op in &self.operators {
            for t in op.produced() {
                if let Some(first) = producer.get(t) {
                    return Err(GraphError::DuplicateProducer {
                        tensor: t.to_string(),
                        first: first.clone(),
                        second: op.id.clone(),
                    });
                }
                producer.insert(t.to_string(), op.id.clone());
            }
        }
        for op in &self.operators {
            for t in &op.inputs {
                consumers.entry(t.clone()).or_default().push(op.id.clone());
            }
        }
        let mut edges = Vec::new();
        for (t, cs) in &consumers {
            if let Some(p) = producer.get(t) {
                for c in cs {
                    if c == p {
                        return Err(GraphError::Cycle(vec![p.clone()]));
                    }
                    edges.push(Edge {
                        producer: p.clone(),
                        tensor: t.clone(),
                        consumer: c.clone(),
                    });
                }
            }
        }
        edges.sort();
        for t in self.tensors.keys() {
            let used_inside = self
                .operators
                .iter()
                .any(|o| o.leaves().iter().any(|l| l.inputs.contains(t)));
            if !producer.contains_key(t) && !consumers.contains_key(t) && !used_inside {
                return Err(GraphError::DanglingTensor(t.clone()));
            }
        }
        self.producer = producer;
        self.consumers = consumers;
        self.edges = edges;
        self.topological_order()?;
        Ok(())
    }

    fn shape(&self, t: &str) -> Option<Vec<u64>> {
        self.tensors
            .get(t)
            .map(|d| d.dims.iter().map(|s| self.dims[s]).collect())
    }

    fn check_operator(&self, op: &OperatorNode) -> Result<(), GraphError> {
        for t in op.inputs.iter().chain(&op.outputs) {
            if !self.tensors.contains_key(t) {
                return Err(GraphError::UnknownTensor {
                    op: op.id.clone(),
                    tensor: t.clone(),
                });
            }
        }
        let distinct: BTreeSet<&String> = op.inputs.iter().collect();
        if distinct.len() != op.inputs.len() {
            return Err(op_err(op, "repeated input tensor"));
        }
        let distinct: BTreeSet<&String> = op.outputs.iter().collect();
        if distinct.len() != op.outputs.len() {
            return Err(op_err(op, "repeated output tensor"));
        }
        if op.outputs.is_empty() {
            return Err(op_err(op, "no outputs"));
        }
        if let Some(x) = op.outputs.iter().find(|o| op.inputs.contains(o)) {
            return Err(GraphError::Cycle(vec![format!("{} (via '{x}')", op.id)]));
        }
        if op.op_kind != OpKind::Contraction && op.einsum.is_some() {
            return Err(op_err(op, "summation string on a non-contraction operator"));
        }
        if op.op_kind != OpKind::Composite && (!op.members.is_empty() || op.kernel.is_some()) {
            return Err(op_err(op, "members on a non-composite operator"));
        }
        let bwd = op.phase.is_backward();
        let ni = op.inputs.len();
        let no = op.outputs.len();
        let same_size = |a: &str, b: &str| self.shape(a) == self.shape(b);
        let subset = |small: &str, big: &str| {
            let s = &self.tensors[small].dims;
            let b = &self.tensors[big].dims;
            s.iter().all(|d| b.contains(d))
        };
        match op.op_kind {
            OpKind::Contraction => {
                let e = op.einsum.as_ref().ok_or_else(|| GraphError::InvalidEinsum {
                    op: op.id.clone(),
                    message: "contraction without summation string".into(),
                })?;
                e.check(&op.inputs, &op.outputs, |t| self.shape(t))
                    .map_err(|message| GraphError::InvalidEinsum {
                        op: op.id.clone(),
                        message,
                    })?;
            }
            OpKind::Bias => {
                if ni != 2 * no {
                    return Err(op_err(op, "bias takes one data input and one bias per output"));
                }
                for i in 0..no {
                    if !same_size(&op.inputs[i], &op.outputs[i]) || !subset(&op.inputs[no + i], &op.inputs[i]) {
                        return Err(op_err(op, "bias operand shapes do not match"));
                    }
                }
            }
            OpKind::Dropout => {
                let ok = if bwd { ni == 2 && no == 1 } else { ni == 1 && no == 2 };
                if !ok || op.inputs.iter().chain(&op.outputs).any(|t| !same_size(t, &op.inputs[0])) {
                    return Err(op_err(op, "dropout is x -> (y, mask) forward and (dy, mask) -> dx backward"));
                }
            }
            OpKind::Relu => {
                let ok = if bwd { ni == 2 && no == 1 } else { ni == 1 && no == 1 };
                if !ok || op.inputs.iter().chain(&op.outputs).any(|t| !same_size(t, &op.inputs[0])) {
                    return Err(op_err(op, "relu is x -> y forward and (dy, x) -> dx backward"));
                }
            }
            OpKind::Residual => {
                if ni < 2 || no != 1 || op.inputs.iter().chain(&op.outputs).any(|t| !same_size(t, &op.inputs[0])) {
                    return Err(op_err(op, "residual sums two or more equally shaped inputs"));
                }
            }
            OpKind::Scale => {
                if ni != 1 || no != 1 || !same_size(&op.inputs[0], &op.outputs[0]) {
                    return Err(op_err(op, "scale maps one tensor to one tensor"));
                }
            }
            OpKind::Softmax => {
                let ok = if bwd { (ni == 2 || ni == 3) && no == 1 } else { ni == 1 && (no == 1 || no == 3) };
                if !ok || op.inputs.iter().chain(&op.outputs).any(|t| !same_size(t, &op.inputs[0])) {
                    return Err(op_err(op, "softmax arity or shapes invalid"));
                }
            }
            OpKind::LayerNorm => {
                let ok = match op.phase {
                    Phase::Forward => ni == 3 && no == 1,
                    Phase::BackwardDx => ni == 3 && no == 1,
                    Phase::BackwardDw => ni == 2 && no == 2,
                };
                if !ok {
                    return Err(op_err(op, "layernorm arity invalid"));
                }
                let x = &op.inputs[0];
                let (params, same): (Vec<&String>, Vec<&String>) = match op.phase {
                    Phase::Forward => (op.inputs[1..].iter().collect(), vec![&op.outputs[0]]),
                    Phase::BackwardDx => (vec![&op.inputs[2]], vec![&op.inputs[1], &op.outputs[0]]),
                    Phase::BackwardDw => (op.outputs.iter().collect(), vec![&op.inputs[1]]),
                };
                if params.iter().any(|p| !subset(p, x)) || same.iter().any(|t| !same_size(t, x)) {
                    return Err(op_err(op, "layernorm operand shapes do not match"));
                }
            }
            OpKind::ReduceSum => {
                if ni != no || ni == 0 {
                    return Err(op_err(op, "reduce_sum maps each input to one output"));
                }
                for i in 0..no {
                    if !subset(&op.outputs[i], &op.inputs[i]) {
                        return Err(op_err(op, "reduce_sum output dimensions must be a subset of the input's"));
                    }
                }
            }
            OpKind::Composite => {
                if op.members.is_empty() {
                    return Err(op_err(op, "composite without members"));
                }
                let mut produced: BTreeSet<&str> = BTreeSet::new();
                for m in &op.members {
                    if m.op_kind == OpKind::Composite {
                        return Err(op_err(op, "nested composites are not supported"));
                    }
                    self.check_operator(m)?;
                    for i in &m.inputs {
                        if !produced.contains(i.as_str()) && !op.inputs.contains(i) {
                            return Err(op_err(op, format!("member input '{i}' is neither external nor produced earlier")));
                        }
                    }
                    for o in &m.outputs {
                        produced.insert(o);
                    }
                }
                for o in &op.outputs {
                    if !produced.contains(o.as_str()) {
                        return Err(op_err(op, format!("output '{o}' is not produced by any member")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn tensor(&self, id: &str) -> &TensorDesc {
        &self.tensors[id]
    }

    pub fn op(&self, id: &str) -> Option<&OperatorNode> {
        self.operators.iter().find(|o| o.id == id)
    }

    /// Element count of a tensor.
    pub fn numel(&self, id: &str) -> u64 {
        self.tensors[id].dims.iter().map(|d| self.dims[d]).product()
    }

    pub fn extent(&self, symbol: &str) -> u64 {
        self.dims[symbol]
    }

    /// Top-level operator producing a tensor (None for graph inputs).
    pub fn producer_of(&self, tensor: &str) -> Option<&str> {
        self.producer.get(tensor).map(String::as_str)
    }

    /// Top-level operators reading a tensor.
    pub fn consumers_of(&self, tensor: &str) -> &[String] {
        self.consumers.get(tensor).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Tensors with no producer, sorted by id.
    pub fn graph_inputs(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|t| !self.producer.contains_key(*t))
            .cloned()
            .collect()
    }

    /// Produced tensors with no top-level consumer and not interim to a composite.
    pub fn graph_outputs(&self) -> Vec<String> {
        let mut out = Vec::new();
        for op in &self.operators {
            for t in &op.outputs {
                if self.consumers_of(t).is_empty() {
                    out.push(t.clone());
                }
            }
        }
        out.sort();
        out
    }

    /// Kahn's algorithm; ties go to the lexicographically smallest id.
    pub fn topological_order(&self) -> Result<Vec<String>, GraphError> {
        let mut indeg: BTreeMap<&str, usize> = self.operators.iter().map(|o| (o.id.as_str(), 0)).collect();
        let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in &self.edges {
            if succ.entry(e.producer.as_str()).or_default().insert(e.consumer.as_str()) {
                *indeg.get_mut(e.consumer.as_str()).unwrap() += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<&str>> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| Reverse(*k))
            .collect();
        let mut order = Vec::with_capacity(self.operators.len());
        while let Some(Reverse(n)) = ready.pop() {
            order.push(n.to_string());
            if let Some(ss) = succ.get(n) {
                for s in ss {
                    let d = indeg.get_mut(s).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(s));
                    }
                }
            }
        }
        if order.len() != self.operators.len() {
            let left: Vec<String> = indeg
                .iter()
                .filter(|(k, _)| !order.iter().any(|o| o == *k))
                .map(|(k, _)| k.to_string())
                .collect();
            return Err(GraphError::Cycle(left));
        }
        Ok(order)
    }

    /// Operators in topological order.
    pub fn ordered_ops(&self) -> Vec<&OperatorNode> {
        let order = self.topological_order().expect("validated graph is acyclic");
        order.iter().map(|id| self.op(id).unwrap()).collect()
    }

    /// Dimension symbol bound to each einsum index of a contraction.
    pub fn index_symbols(&self, op: &OperatorNode) -> BTreeMap<char, String> {
        let mut m = BTreeMap::new();
        if let Some(e) = &op.einsum {
            for t in &e.terms {
                for o in std::iter::once(&t.output).chain(&t.operands) {
                    for (c, d) in o.indices.iter().zip(&self.tensors[&o.tensor].dims) {
                        m.entry(*c).or_insert_with(|| d.clone());
                    }
                }
            }
        }
        m
    }

    /// Ordered loop dimensions of an operator (its data space).
    pub fn loop_nest(&self, op: &OperatorNode) -> Vec<String> {
        match op.op_kind {
            OpKind::Contraction => {
                let sym = self.index_symbols(op);
                let t = &op.einsum.as_ref().unwrap().terms[0];
                t.all_indices().iter().map(|c| sym[c].clone()).collect()
            }
            OpKind::Composite => self.loop_nest(&op.members[0]),
            _ => self.tensors[&op.inputs[0]].dims.clone(),
        }
    }

    pub fn iteration_space(&self, op: &OperatorNode) -> IterationSpace {
        match op.op_kind {
            OpKind::Contraction => {
                let sym = self.index_symbols(op);
                let t = &op.einsum.as_ref().unwrap().terms[0];
                let reduction = t.summed_indices().iter().map(|c| sym[c].clone()).collect();
                let only = |k: usize| -> Vec<String> {
                    t.operands[k]
                        .indices
                        .iter()
                        .filter(|c| {
                            t.output.indices.contains(c)
                                && !t.operands.iter().enumerate().any(|(j, o)| j != k && o.indices.contains(c))
                        })
                        .map(|c| sym[c].clone())
                        .collect()
                };
                let second = if t.operands.len() > 1 {
                    let mut v = Vec::new();
                    for k in 1..t.operands.len() {
                        for s in only(k) {
                            if !v.contains(&s) {
                                v.push(s);
                            }
                        }
                    }
                    v
                } else {
                    Vec::new()
                };
                let first = only(0);
                // Free dims of a single input are special, not independent.
                let independent = t
                    .output
                    .indices
                    .iter()
                    .map(|c| sym[c].clone())
                    .filter(|d| !first.contains(d) && !second.contains(d))
                    .collect();
                IterationSpace {
                    independent,
                    reduction,
                    special_independent: [first, second],
                }
            }
            OpKind::Composite => {
                let mut independent: Vec<String> = Vec::new();
                let mut reduction: Vec<String> = Vec::new();
                let mut special = [Vec::new(), Vec::new()];
                for m in &op.members {
                    let s = self.iteration_space(m);
                    for d in s.reduction {
                        if !reduction.contains(&d) {
                            reduction.push(d);
                        }
                    }
                    for d in s.independent {
                        if !independent.contains(&d) {
                            independent.push(d);
                        }
                    }
                    if m.is_contraction() {
                        special = s.special_independent;
                    }
                }
                independent.retain(|d| !reduction.contains(d));
                IterationSpace {
                    independent,
                    reduction,
                    special_independent: special,
                }
            }
            _ => {
                let nest = self.loop_nest(op);
                let reduced: Vec<String> = match (op.op_kind, op.phase) {
                    (OpKind::Softmax, _) => vec![nest.last().unwrap().clone()],
                    (OpKind::LayerNorm, Phase::BackwardDw) | (OpKind::ReduceSum, _) => {
                        let keep = &self.tensors[&op.outputs[0]].dims;
                        nest.iter().filter(|d| !keep.contains(d)).cloned().collect()
                    }
                    (OpKind::LayerNorm, phase) => {
                        let g = if phase == Phase::Forward { &op.inputs[1] } else { &op.inputs[2] };
                        let norm = &self.tensors[g].dims;
                        nest.iter().filter(|d| norm.contains(d)).cloned().collect()
                    }
                    _ => Vec::new(),
                };
                IterationSpace {
                    independent: nest.iter().filter(|d| !reduced.contains(d)).cloned().collect(),
                    reduction: reduced,
                    special_independent: [Vec::new(), Vec::new()],
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tdesc(id: &str, dims: &[&str], kind: TensorKind) -> TensorDesc {
        TensorDesc {
            id: id.into(),
            dims: dims.iter().map(|s| s.to_string()).collect(),
            element_bytes: 2,
            kind,
        }
    }

    fn chain(names: &[&str]) -> DataflowGraph {
        let dims: DimTable = [("N".to_string(), 4)].into_iter().collect();
        let mut tensors = vec![tdesc("t0", &["N"], TensorKind::Input)];
        let mut ops = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let a = format!("t{i}");
            let b = format!("t{}", i + 1);
            tensors.push(tdesc(&b, &["N"], TensorKind::Activation));
            ops.push(OperatorNode::new(n, OpKind::Scale, Phase::Forward, &[&a], &[&b]));
        }
        DataflowGraph::new(dims, tensors, ops).unwrap()
    }

    #[test]
    fn chain_order() {
        let g = chain(&["C", "B", "A"]);
        assert_eq!(g.topological_order().unwrap(), vec!["C", "B", "A"]);
    }

    #[test]
    fn diamond_order() {
        let dims: DimTable = [("N".to_string(), 2)].into_iter().collect();
        let tensors = vec![
            tdesc("x", &["N"], TensorKind::Input),
            tdesc("a", &["N"], TensorKind::Activation),
            tdesc("b", &["N"], TensorKind::Activation),
            tdesc("c", &["N"], TensorKind::Activation),
            tdesc("d", &["N"], TensorKind::Output),
        ];
        let ops = vec![
            OperatorNode::new("D", OpKind::Residual, Phase::Forward, &["b", "c"], &["d"]),
            OperatorNode::new("C", OpKind::Scale, Phase::Forward, &["a"], &["c"]),
            OperatorNode::new("B", OpKind::Scale, Phase::Forward, &["a"], &["b"]),
            OperatorNode::new("A", OpKind::Scale, Phase::Forward, &["x"], &["a"]),
        ];
        let g = DataflowGraph::new(dims, tensors, ops).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn cycle_rejected() {
        let dims: DimTable = [("N".to_string(), 2)].into_iter().collect();
        let tensors = vec![
            tdesc("a", &["N"], TensorKind::Activation),
            tdesc("b", &["N"], TensorKind::Activation),
        ];
        let ops = vec![
            OperatorNode::new("A", OpKind::Scale, Phase::Forward, &["b"], &["a"]),
            OperatorNode::new("B", OpKind::Scale, Phase::Forward, &["a"], &["b"]),
        ];
        let e = DataflowGraph::new(dims, tensors, ops).unwrap_err();
        assert_eq!(e.code(), "cycle");
    }

    #[test]
    fn dangling_reported() {
        let dims: DimTable = [("N".to_string(), 2)].into_iter().collect();
        let tensors = vec![
            tdesc("a", &["N"], TensorKind::Input),
            tdesc("b", &["N"], TensorKind::Activation),
            tdesc("z", &["N"], TensorKind::Activation),
        ];
        let ops = vec![OperatorNode::new("A", OpKind::Scale, Phase::Forward, &["a"], &["b"])];
        let e = DataflowGraph::new(dims, tensors, ops).unwrap_err();
        assert_eq!(e, GraphError::DanglingTensor("z".into()));
    }
}
