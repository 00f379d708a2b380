//! Algebraic fusion of the attention input projections: stacking the
//! Q, K and V weight matrices so one contraction computes several
//! projections of a shared activation.

use super::FusionError;
use crate::graphir::{
    DataflowGraph, Einsum, EinsumTerm, GradPairing, OpKind, OperatorNode, Phase, TensorDesc, TensorKind,
};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QkvVariant {
    Unfused,
    Qk,
    Kv,
    Qkv,
}

impl QkvVariant {
    pub const ALL: [QkvVariant; 4] = [QkvVariant::Unfused, QkvVariant::Qk, QkvVariant::Kv, QkvVariant::Qkv];

    pub fn name(self) -> &'static str {
        match self {
            QkvVariant::Unfused => "unfused",
            QkvVariant::Qk => "qk",
            QkvVariant::Kv => "kv",
            QkvVariant::Qkv => "qkv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        QkvVariant::ALL.into_iter().find(|v| v.name() == s)
    }

    fn groups(self) -> Vec<Vec<usize>> {
        match self {
            QkvVariant::Unfused => vec![vec![0], vec![1], vec![2]],
            QkvVariant::Qk => vec![vec![0, 1], vec![2]],
            QkvVariant::Kv => vec![vec![0], vec![1, 2]],
            QkvVariant::Qkv => vec![vec![0, 1, 2]],
        }
    }
}

const LETTERS: [char; 3] = ['q', 'k', 'v'];

#[derive(Clone, Debug)]
struct Projection {
    op: String,
    term: EinsumTerm,
    param: String,
    activation: String,
    output: String,
}

fn projections(g: &DataflowGraph) -> Vec<Projection> {
    let mut out = Vec::new();
    for op in &g.operators {
        if op.phase != Phase::Forward || !op.is_contraction() {
            continue;
        }
        for term in &op.einsum.as_ref().unwrap().terms {
            if term.operands.len() != 2 {
                continue;
            }
            let kinds: Vec<TensorKind> = term.operands.iter().map(|o| g.tensor(&o.tensor).kind).collect();
            let pi = match kinds.iter().position(|k| *k == TensorKind::Parameter) {
                Some(i) if kinds.iter().filter(|k| **k == TensorKind::Parameter).count() == 1 => i,
                _ => continue,
            };
            let act = &term.operands[1 - pi];
            if term.output.indices.len() > act.indices.len() {
                out.push(Projection {
                    op: op.id.clone(),
                    term: term.clone(),
                    param: term.operands[pi].tensor.clone(),
                    activation: act.tensor.clone(),
                    output: term.output.tensor.clone(),
                });
            }
        }
    }
    out
}

/// Follow a tensor back through bias lanes to the tensor they offset.
fn through_bias(g: &DataflowGraph, t: &str) -> String {
    let mut cur = t.to_string();
    while let Some(p) = g.producer_of(&cur).and_then(|p| g.op(p)) {
        if p.op_kind != OpKind::Bias {
            break;
        }
        let lane = p.outputs.iter().position(|o| *o == cur).unwrap();
        cur = p.inputs[lane].clone();
    }
    cur
}

/// Q, K and V projections in that order.
fn identify(g: &DataflowGraph) -> Result<[Projection; 3], FusionError> {
    let projs = projections(g);
    let by_out: BTreeMap<&str, &Projection> = projs.iter().map(|p| (p.output.as_str(), p)).collect();
    for op in &g.operators {
        if op.phase != Phase::Forward || !op.is_contraction() {
            continue;
        }
        let terms = &op.einsum.as_ref().unwrap().terms;
        if terms.len() != 1 || terms[0].operands.len() != 2 {
            continue;
        }
        let a = through_bias(g, &terms[0].operands[0].tensor);
        let b = through_bias(g, &terms[0].operands[1].tensor);
        let (Some(q), Some(k)) = (by_out.get(a.as_str()), by_out.get(b.as_str())) else {
            continue;
        };
        let rest: Vec<&Projection> = projs.iter().filter(|p| p.output != q.output && p.output != k.output).collect();
        if rest.len() != 1 {
            return Err(FusionError::PatternNotFound(format!(
                "expected one value projection besides '{}' and '{}', found {}",
                q.output,
                k.output,
                rest.len()
            )));
        }
        return Ok([(*q).clone(), (*k).clone(), rest[0].clone()]);
    }
    Err(FusionError::PatternNotFound("no query-key contraction over projected tensors".into()))
}

fn named_einsum(terms: Vec<EinsumTerm>) -> Einsum {
    Einsum { terms }
}

fn push_unique(v: &mut Vec<String>, t: &str) {
    if !v.iter().any(|x| x == t) {
        v.push(t.to_string());
    }
}

/// Backward terms of one projection.
struct BackTerms {
    dx: Option<(EinsumTerm, bool)>,
    dw: Option<(EinsumTerm, bool)>,
}

/// Rewrite the graph so the Q, K and V projections (forward, and their
/// backward dX and dW contractions) are stacked as `variant` prescribes.
/// Stacking needs a shared activation: a Q/K stack is rejected when keys
/// project a different tensor than queries.
pub fn algebraic_fuse_qkv(g: &DataflowGraph, variant: QkvVariant) -> Result<DataflowGraph, FusionError> {
    let proj = identify(g)?;
    let groups = variant.groups();
    for grp in &groups {
        let act = &proj[grp[0]].activation;
        if let Some(&i) = grp.iter().find(|&&i| proj[i].activation != *act) {
            return Err(FusionError::StackRejected(format!(
                "projection '{}' reads '{}' but '{}' reads '{}'",
                proj[i].output, proj[i].activation, proj[grp[0]].output, act
            )));
        }
    }
    let fwd_ops: BTreeSet<&str> = proj.iter().map(|p| p.op.as_str()).collect();
    for id in &fwd_ops {
        let op = g.op(id).unwrap();
        let n = op.einsum.as_ref().unwrap().terms.len();
        let here = proj.iter().filter(|p| p.op == *id).count();
        if n != here {
            return Err(FusionError::PatternNotFound(format!("operator '{id}' mixes projections with other terms")));
        }
    }

    // backward terms keyed by projection index
    let grad_of: BTreeMap<&str, usize> = proj.iter().enumerate().map(|(i, p)| (p.output.as_str(), i)).collect();
    let mut back: Vec<BackTerms> = (0..3).map(|_| BackTerms { dx: None, dw: None }).collect();
    let mut cot: [Option<String>; 3] = [None, None, None];
    let mut bwd_ops: Vec<&str> = Vec::new();
    for op in &g.operators {
        let Some(gp) = &op.grad else { continue };
        if !fwd_ops.contains(gp.of.as_str()) {
            continue;
        }
        if !op.is_contraction() {
            return Err(FusionError::PatternNotFound(format!("backward operator '{}' is not a contraction", op.id)));
        }
        bwd_ops.push(&op.id);
        let inverse: BTreeMap<&str, usize> = gp
            .cotangents
            .iter()
            .filter_map(|(o, d)| grad_of.get(o.as_str()).map(|&i| (d.as_str(), i)))
            .collect();
        for (o, d) in &gp.cotangents {
            if let Some(&i) = grad_of.get(o.as_str()) {
                cot[i] = Some(d.clone());
            }
        }
        for term in &op.einsum.as_ref().unwrap().terms {
            let i = term
                .operands
                .iter()
                .find_map(|o| inverse.get(o.tensor.as_str()).copied())
                .ok_or_else(|| FusionError::PatternNotFound(format!("term of '{}' reads no cotangent", op.id)))?;
            let slot = if op.phase == Phase::BackwardDw { &mut back[i].dw } else { &mut back[i].dx };
            *slot = Some((term.clone(), op.mha));
        }
    }

    let mut tensors: Vec<TensorDesc> = g.tensors.values().cloned().collect();
    let letters = |grp: &[usize]| -> String { grp.iter().map(|&i| LETTERS[i]).collect() };

    // forward
    let mut new_fwd = Vec::new();
    for grp in &groups {
        let name = letters(grp);
        let mut op = OperatorNode::new(&format!("fwd_{name}"), OpKind::Contraction, Phase::Forward, &[], &[]);
        push_unique(&mut op.inputs, &proj[grp[0]].activation);
        for &i in grp {
            push_unique(&mut op.inputs, &proj[i].param);
            push_unique(&mut op.outputs, &proj[i].output);
        }
        op.einsum = Some(named_einsum(grp.iter().map(|&i| proj[i].term.clone()).collect()));
        op.mha = grp.iter().all(|&i| g.op(&proj[i].op).unwrap().mha);
        new_fwd.push(op);
    }

    // backward dX: partial results when several groups feed one gradient
    let mut new_dx = Vec::new();
    let mut new_dw = Vec::new();
    let mut writers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (gi, grp) in groups.iter().enumerate() {
        for &i in grp {
            if let Some((t, _)) = &back[i].dx {
                let e = writers.entry(t.output.tensor.clone()).or_default();
                if !e.contains(&gi) {
                    e.push(gi);
                }
            }
        }
    }
    let mut partials: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for grp in &groups {
        let name = letters(grp);
        let cotangents: BTreeMap<String, String> = grp
            .iter()
            .filter_map(|&i| cot[i].clone().map(|d| (proj[i].output.clone(), d)))
            .collect();
        let dx_terms: Vec<(EinsumTerm, bool)> = grp.iter().filter_map(|&i| back[i].dx.clone()).collect();
        if !dx_terms.is_empty() {
            let mut op = OperatorNode::new(&format!("grad_{name}_dx"), OpKind::Contraction, Phase::BackwardDx, &[], &[]);
            let mut terms = Vec::new();
            for (mut t, _) in dx_terms.iter().cloned() {
                let target = t.output.tensor.clone();
                if writers[&target].len() > 1 {
                    let part = format!("{target}_{name}");
                    if !tensors.iter().any(|x| x.id == part) {
                        let mut d = g.tensor(&target).clone();
                        d.id = part.clone();
                        d.kind = TensorKind::Gradient;
                        tensors.push(d);
                        partials.entry(target.clone()).or_default().push(part.clone());
                    }
                    t.output.tensor = part;
                }
                for o in &t.operands {
                    if g.tensor(&o.tensor).kind != TensorKind::Parameter {
                        push_unique(&mut op.inputs, &o.tensor);
                    }
                }
                push_unique(&mut op.outputs, &t.output.tensor);
                terms.push(t);
            }
            for t in &terms {
                for o in &t.operands {
                    push_unique(&mut op.inputs, &o.tensor);
                }
            }
            op.einsum = Some(named_einsum(terms));
            op.mha = dx_terms.iter().all(|(_, m)| *m);
            op.grad = Some(GradPairing {
                of: format!("fwd_{name}"),
                wrt: vec![proj[grp[0]].activation.clone()],
                cotangents: cotangents.clone(),
            });
            new_dx.push(op);
        }
        let dw_terms: Vec<(EinsumTerm, bool)> = grp.iter().filter_map(|&i| back[i].dw.clone()).collect();
        if !dw_terms.is_empty() {
            let mut op = OperatorNode::new(&format!("grad_{name}_dw"), OpKind::Contraction, Phase::BackwardDw, &[], &[]);
            for (t, _) in &dw_terms {
                for o in &t.operands {
                    if g.tensor(&o.tensor).kind == TensorKind::Gradient {
                        push_unique(&mut op.inputs, &o.tensor);
                    }
                }
            }
            for (t, _) in &dw_terms {
                for o in &t.operands {
                    push_unique(&mut op.inputs, &o.tensor);
                }
                push_unique(&mut op.outputs, &t.output.tensor);
            }
            op.einsum = Some(named_einsum(dw_terms.iter().map(|(t, _)| t.clone()).collect()));
            op.mha = dw_terms.iter().all(|(_, m)| *m);
            op.grad = Some(GradPairing {
                of: format!("fwd_{name}"),
                wrt: grp.iter().map(|&i| proj[i].param.clone()).collect(),
                cotangents,
            });
            new_dw.push(op);
        }
    }
    for (target, parts) in &partials {
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let mut op = OperatorNode::new(&format!("grad_{target}_sum"), OpKind::Residual, Phase::BackwardDx, &refs, &[target]);
        op.mha = true;
        // n partial gradients take n - 1 adds per point.
        op.flop_per_point = Some(num_rational::Ratio::from_integer(parts.len() as u64 - 1));
        new_dx.push(op);
    }

    let removed: BTreeSet<&str> = fwd_ops.iter().copied().chain(bwd_ops.iter().copied()).collect();
    let first_dx = bwd_ops.iter().find(|id| g.op(id).unwrap().phase == Phase::BackwardDx).copied();
    let first_dw = bwd_ops.iter().find(|id| g.op(id).unwrap().phase == Phase::BackwardDw).copied();
    let first_fwd = g.operators.iter().find(|o| fwd_ops.contains(o.id.as_str())).map(|o| o.id.as_str());
    let mut ops = Vec::new();
    for op in &g.operators {
        let id = op.id.as_str();
        if Some(id) == first_fwd {
            ops.append(&mut new_fwd);
        }
        if Some(id) == first_dx {
            ops.append(&mut new_dx);
        }
        if Some(id) == first_dw {
            ops.append(&mut new_dw);
        }
        if !removed.contains(id) {
            ops.push(op.clone());
        }
    }
    Ok(DataflowGraph::new(g.dims.clone(), tensors, ops)?)
}
