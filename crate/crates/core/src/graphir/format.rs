//! JSON graph-spec documents.

use super::{DataflowGraph, Einsum, GradPairing, GraphError, OpKind, OperatorNode, Phase, TensorDesc, TensorKind};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    /// Hash of the run manifest that produced the document, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    dims: BTreeMap<String, u64>,
    tensors: BTreeMap<String, RawTensor>,
    operators: Vec<RawOp>,
}

fn two() -> u32 {
    2
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    dims: Vec<String>,
    #[serde(default = "two")]
    element_bytes: u32,
    kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawRational {
    Int(u64),
    Text(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOp {
    id: String,
    op_kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    einsum: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flop_per_point: Option<RawRational>,
    phase: Phase,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    mha: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<GradPairing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    members: Vec<RawOp>,
}

fn parse_rational(op: &str, r: &RawRational) -> Result<Ratio<u64>, GraphError> {
    let bad = || GraphError::InvalidOperator {
        op: op.to_string(),
        message: "flop_per_point must be a nonnegative integer or 'p/q'".into(),
    };
    match r {
        RawRational::Int(n) => Ok(Ratio::from_integer(*n)),
        RawRational::Text(s) => {
            let (p, q) = s.split_once('/').ok_or_else(bad)?;
            let p: u64 = p.trim().parse().map_err(|_| bad())?;
            let q: u64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(bad());
            }
            Ok(Ratio::new(p, q))
        }
    }
}

fn from_raw(r: RawOp) -> Result<OperatorNode, GraphError> {
    let einsum = match &r.einsum {
        Some(text) => Some(Einsum::parse(text, &r.inputs, &r.outputs).map_err(|message| {
            GraphError::InvalidEinsum {
                op: r.id.clone(),
                message,
            }
        })?),
        None => None,
    };
    let flop_per_point = match &r.flop_per_point {
        Some(x) => Some(parse_rational(&r.id, x)?),
        None => None,
    };
    let members = r.members.into_iter().map(from_raw).collect::<Result<Vec<_>, _>>()?;
    Ok(OperatorNode {
        id: r.id,
        op_kind: r.op_kind,
        einsum,
        inputs: r.inputs,
        outputs: r.outputs,
        flop_per_point,
        phase: r.phase,
        mha: r.mha,
        factor: r.factor,
        grad: r.grad,
        kernel: r.kernel,
        members,
    })
}

fn to_raw(op: &OperatorNode) -> RawOp {
    RawOp {
        id: op.id.clone(),
        op_kind: op.op_kind,
        einsum: op.einsum.as_ref().map(|e| e.to_text(&op.inputs, &op.outputs)),
        inputs: op.inputs.clone(),
        outputs: op.outputs.clone(),
        flop_per_point: op.flop_per_point.map(|r| {
            if *r.denom() == 1 {
                RawRational::Int(*r.numer())
            } else {
                RawRational::Text(format!("{}/{}", r.numer(), r.denom()))
            }
        }),
        phase: op.phase,
        mha: op.mha,
        factor: op.factor,
        grad: op.grad.clone(),
        kernel: op.kernel.clone(),
        members: op.members.iter().map(to_raw).collect(),
    }
}

/// Parse and validate a graph-spec document.
pub fn parse_graph_spec(text: &str) -> Result<DataflowGraph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text).map_err(|e| {
        let (line, column, message) = (e.line(), e.column(), e.to_string());
        if e.is_data() {
            GraphError::Schema { line, column, message }
        } else {
            GraphError::Syntax { line, column, message }
        }
    })?;
    if raw.operators.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let tensors = raw
        .tensors
        .into_iter()
        .map(|(id, t)| TensorDesc {
            id,
            dims: t.dims,
            element_bytes: t.element_bytes,
            kind: t.kind,
        })
        .collect();
    let ops = raw.operators.into_iter().map(from_raw).collect::<Result<Vec<_>, _>>()?;
    DataflowGraph::new(raw.dims, tensors, ops)
}

/// Serialize a graph as a pretty-printed graph-spec document.
pub fn to_graph_spec(g: &DataflowGraph) -> String {
    let raw = RawGraph {
        manifest: None,
        dims: g.dims.clone(),
        tensors: g
            .tensors
            .values()
            .map(|t| {
                (
                    t.id.clone(),
                    RawTensor {
                        dims: t.dims.clone(),
                        element_bytes: t.element_bytes,
                        kind: t.kind,
                    },
                )
            })
            .collect(),
        operators: g.operators.iter().map(to_raw).collect(),
    };
    let mut s = serde_json::to_string_pretty(&raw).expect("graph serializes");
    s.push('\n');
    s
}
