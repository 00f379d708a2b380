//! Fusion legality from iteration spaces, maximal greedy fusion, and
//! data-movement accounting for fused graphs.

mod naming;
mod qkv;

pub use naming::kernel_name;
pub use qkv::{algebraic_fuse_qkv, QkvVariant};

use crate::analysis::data_volume;
use crate::graphir::{DataflowGraph, IterationSpace, OpKind, OperatorNode, Phase};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Full,
    Partial,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionReason {
    Compatible,
    ScaleIntoContraction,
    ContractionBarrier,
    PhaseMismatch,
    SpaceMismatch,
    ReductionConflict,
    Cycle,
}

impl FusionReason {
    pub fn code(self) -> &'static str {
        match self {
            FusionReason::Compatible => "compatible",
            FusionReason::ScaleIntoContraction => "scale-into-contraction",
            FusionReason::ContractionBarrier => "contraction-barrier",
            FusionReason::PhaseMismatch => "phase-mismatch",
            FusionReason::SpaceMismatch => "space-mismatch",
            FusionReason::ReductionConflict => "reduction-conflict",
            FusionReason::Cycle => "cycle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionDecision {
    pub fusible: bool,
    pub mode: FusionMode,
    pub shared_dims: Vec<String>,
    pub reason: FusionReason,
}

impl FusionDecision {
    fn none(reason: FusionReason) -> Self {
        FusionDecision {
            fusible: false,
            mode: FusionMode::None,
            shared_dims: Vec::new(),
            reason,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("pattern not found: {0}")]
    PatternNotFound(String),
    #[error("stacking rejected: {0}")]
    StackRejected(String),
    #[error(transparent)]
    Graph(#[from] crate::graphir::GraphError),
}

/// A legal fusion group. Interim tensors never leave the group.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedOperator {
    pub id: String,
    pub kernel: String,
    pub phase: Phase,
    pub members: Vec<String>,
    pub external_inputs: Vec<String>,
    pub external_outputs: Vec<String>,
    pub interim: Vec<String>,
    pub iteration_space: IterationSpace,
    /// The group starts with a reduction whose result the rest of the group consumes.
    pub two_loop: bool,
}

fn related(a: &OperatorNode, b: &OperatorNode) -> bool {
    a.outputs.iter().any(|t| b.inputs.contains(t)) || b.outputs.iter().any(|t| a.inputs.contains(t))
}

fn siblings(a: &OperatorNode, b: &OperatorNode) -> bool {
    a.inputs.iter().any(|t| b.inputs.contains(t))
}

fn sized(g: &DataflowGraph, dims: &[String]) -> Vec<(String, u64)> {
    dims.iter().map(|d| (d.clone(), g.extent(d))).collect()
}

/// Fusion compatibility of two operators from their loop nests. Full when
/// the nests agree and at most one side reduces (or both reduce the same
/// dims); partial when a producer/consumer pair shares outermost
/// independent dims; none otherwise.
pub fn can_fuse(g: &DataflowGraph, a: &OperatorNode, b: &OperatorNode) -> FusionDecision {
    if a.phase.is_backward() != b.phase.is_backward() {
        return FusionDecision::none(FusionReason::PhaseMismatch);
    }
    let ca = a.leaves().iter().any(|l| l.is_contraction());
    let cb = b.leaves().iter().any(|l| l.is_contraction());
    if ca || cb {
        let other = if ca { b } else { a };
        if ca != cb && other.op_kind == OpKind::Scale && related(a, b) {
            return FusionDecision {
                fusible: true,
                mode: FusionMode::Full,
                shared_dims: g.loop_nest(other),
                reason: FusionReason::ScaleIntoContraction,
            };
        }
        return FusionDecision::none(FusionReason::ContractionBarrier);
    }
    let sa = g.iteration_space(a);
    let sb = g.iteration_space(b);
    let na = sized(g, &g.loop_nest(a));
    let nb = sized(g, &g.loop_nest(b));
    if na == nb {
        let ra: BTreeSet<&String> = sa.reduction.iter().collect();
        let rb: BTreeSet<&String> = sb.reduction.iter().collect();
        if ra.is_empty() || rb.is_empty() || ra == rb {
            let red: BTreeSet<&String> = ra.union(&rb).copied().collect();
            return FusionDecision {
                fusible: true,
                mode: FusionMode::Full,
                shared_dims: na.iter().map(|d| d.0.clone()).filter(|d| !red.contains(d)).collect(),
                reason: FusionReason::Compatible,
            };
        }
        return FusionDecision::none(FusionReason::ReductionConflict);
    }
    if related(a, b) {
        let mut shared = Vec::new();
        for (x, y) in na.iter().zip(&nb) {
            if x != y || sa.reduction.contains(&x.0) || sb.reduction.contains(&x.0) {
                break;
            }
            shared.push(x.0.clone());
        }
        if !shared.is_empty() {
            return FusionDecision {
                fusible: true,
                mode: FusionMode::Partial,
                shared_dims: shared,
                reason: FusionReason::Compatible,
            };
        }
    }
    FusionDecision::none(FusionReason::SpaceMismatch)
}

struct Grouping<'a> {
    g: &'a DataflowGraph,
    ops: Vec<&'a OperatorNode>,
    index: BTreeMap<&'a str, usize>,
    succ: Vec<BTreeSet<usize>>,
    pred: Vec<BTreeSet<usize>>,
    group_of: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl<'a> Grouping<'a> {
    fn new(g: &'a DataflowGraph, initial: &[Vec<String>]) -> Self {
        let ops = g.ordered_ops();
        let index: BTreeMap<&str, usize> = ops.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect();
        let n = ops.len();
        let mut succ = vec![BTreeSet::new(); n];
        let mut pred = vec![BTreeSet::new(); n];
        for e in &g.edges {
            let (p, c) = (index[e.producer.as_str()], index[e.consumer.as_str()]);
            succ[p].insert(c);
            pred[c].insert(p);
        }
        let mut group_of: Vec<usize> = (0..n).collect();
        let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for set in initial {
            let idx: Vec<usize> = set.iter().map(|m| index[m.as_str()]).collect();
            let root = idx[0];
            for &i in &idx[1..] {
                groups[i].clear();
                group_of[i] = root;
            }
            groups[root] = idx;
            groups[root].sort();
        }
        Grouping {
            g,
            ops,
            index,
            succ,
            pred,
            group_of,
            groups,
        }
    }

    fn has_contraction(&self, gid: usize) -> bool {
        self.groups[gid].iter().any(|&i| self.ops[i].is_contraction())
    }

    fn reduction(&self, gid: usize) -> BTreeSet<String> {
        let mut r = BTreeSet::new();
        for &i in &self.groups[gid] {
            r.extend(self.g.iteration_space(self.ops[i]).reduction);
        }
        r
    }

    fn pass(&self, gid: usize) -> bool {
        self.ops[self.groups[gid][0]].phase.is_backward()
    }

    /// Groups adjacent to `gid` through an edge or a shared input, ordered by position.
    fn neighbours(&self, gid: usize) -> Vec<usize> {
        let mut cand: BTreeMap<usize, usize> = BTreeMap::new();
        let note = |op: usize, cand: &mut BTreeMap<usize, usize>| {
            let h = self.group_of[op];
            if h != gid {
                let e = cand.entry(h).or_insert(op);
                *e = (*e).min(op);
            }
        };
        for &m in &self.groups[gid] {
            for &s in self.succ[m].iter().chain(&self.pred[m]) {
                note(s, &mut cand);
            }
            for t in &self.ops[m].inputs {
                for c in self.g.consumers_of(t) {
                    note(self.index[c.as_str()], &mut cand);
                }
            }
        }
        let mut v: Vec<(usize, usize)> = cand.into_iter().map(|(h, p)| (p, h)).collect();
        v.sort();
        v.into_iter().map(|(_, h)| h).collect()
    }

    fn creates_cycle(&self, a: usize, b: usize) -> bool {
        let merged = |h: usize| h == a || h == b;
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        for &m in self.groups[a].iter().chain(&self.groups[b]) {
            for &s in &self.succ[m] {
                let h = self.group_of[s];
                if !merged(h) && seen.insert(h) {
                    queue.push_back(h);
                }
            }
        }
        while let Some(h) = queue.pop_front() {
            for &m in &self.groups[h] {
                for &s in &self.succ[m] {
                    let k = self.group_of[s];
                    if merged(k) {
                        return true;
                    }
                    if seen.insert(k) {
                        queue.push_back(k);
                    }
                }
            }
        }
        false
    }

    fn compatible(&self, a: usize, b: usize) -> bool {
        if self.pass(a) != self.pass(b) || self.has_contraction(a) || self.has_contraction(b) {
            return false;
        }
        let (ra, rb) = (self.reduction(a), self.reduction(b));
        if !(ra.is_empty() || rb.is_empty() || ra == rb) {
            return false;
        }
        let mut adjacent = false;
        for &x in &self.groups[a] {
            for &y in &self.groups[b] {
                let (ox, oy) = (self.ops[x], self.ops[y]);
                let edge = related(ox, oy);
                let sib = siblings(ox, oy);
                if !edge && !sib {
                    continue;
                }
                adjacent = true;
                let d = can_fuse(self.g, ox, oy);
                let ok = if edge { d.fusible } else { d.mode == FusionMode::Full };
                if !ok {
                    return false;
                }
            }
        }
        adjacent && !self.creates_cycle(a, b)
    }

    fn merge(&mut self, a: usize, b: usize) -> usize {
        let (keep, gone) = if a < b { (a, b) } else { (b, a) };
        let moved = std::mem::take(&mut self.groups[gone]);
        for &m in &moved {
            self.group_of[m] = keep;
        }
        self.groups[keep].extend(moved);
        self.groups[keep].sort();
        keep
    }

    fn try_scale(&mut self, i: usize) -> bool {
        let op = self.ops[i];
        if op.op_kind != OpKind::Scale || self.groups[self.group_of[i]].len() != 1 {
            return false;
        }
        let mut cands: Vec<usize> = Vec::new();
        for &p in &self.pred[i] {
            let only_consumer = self.ops[p].outputs.iter().all(|t| self.g.consumers_of(t).len() == 1);
            if self.ops[p].is_contraction() && only_consumer {
                cands.push(p);
            }
        }
        for &s in &self.succ[i] {
            let single = op.outputs.iter().all(|t| self.g.consumers_of(t).len() == 1);
            if self.ops[s].is_contraction() && single {
                cands.push(s);
            }
        }
        for c in cands {
            let gc = self.group_of[c];
            if self.groups[gc].len() == 1 && self.ops[c].phase.is_backward() == op.phase.is_backward() && !self.creates_cycle(gc, i) {
                self.merge(gc, i);
                return true;
            }
        }
        false
    }

    fn grow(&mut self) -> bool {
        let mut changed = false;
        let mut order: Vec<usize> = (0..self.ops.len()).collect();
        order.sort_by_key(|&i| (self.ops[i].phase.is_backward(), i));
        for i in order {
            if self.ops[i].is_contraction() {
                continue;
            }
            if self.try_scale(i) {
                changed = true;
                continue;
            }
            loop {
                let gid = self.group_of[i];
                if self.has_contraction(gid) {
                    break;
                }
                let next = self.neighbours(gid).into_iter().find(|&h| self.compatible(gid, h));
                match next {
                    Some(h) => {
                        self.merge(gid, h);
                        changed = true;
                    }
                    None => break,
                }
            }
        }
        changed
    }

    /// A lone column reduction (bias gradient) joins the group that consumes
    /// the contraction fed by the same tensor, when that group reduces the
    /// same outer dims.
    fn hoist_column_reductions(&mut self) -> bool {
        let mut changed = false;
        for i in 0..self.ops.len() {
            let op = self.ops[i];
            let gid = self.group_of[i];
            if op.op_kind != OpKind::ReduceSum || self.groups[gid].len() != 1 {
                continue;
            }
            let space = self.g.iteration_space(op);
            let nest = self.g.loop_nest(op);
            if space.reduction.is_empty() || nest[..space.reduction.len()] != space.reduction[..] {
                continue;
            }
            let red: BTreeSet<String> = space.reduction.iter().cloned().collect();
            let mut target = None;
            'search: for t in &op.inputs {
                for c in self.g.consumers_of(t) {
                    let ci = self.index[c.as_str()];
                    if !self.ops[ci].is_contraction() {
                        continue;
                    }
                    for &s in &self.succ[ci] {
                        let h = self.group_of[s];
                        if h == gid || self.has_contraction(h) || self.pass(h) != self.pass(gid) || self.reduction(h) != red {
                            continue;
                        }
                        let outer_ok = self.groups[h].iter().all(|&m| {
                            let mn = self.g.loop_nest(self.ops[m]);
                            mn.len() >= nest.len() && sized(self.g, &mn[..red.len()]) == sized(self.g, &nest[..red.len()])
                        });
                        if outer_ok && !self.creates_cycle(gid, h) {
                            target = Some(h);
                            break 'search;
                        }
                    }
                }
            }
            if let Some(h) = target {
                self.merge(gid, h);
                changed = true;
            }
        }
        changed
    }
}

fn flatten(g: &DataflowGraph) -> Result<(DataflowGraph, Vec<Vec<String>>), FusionError> {
    if g.operators.iter().all(|o| o.op_kind != OpKind::Composite) {
        return Ok((g.clone(), Vec::new()));
    }
    let mut ops = Vec::new();
    let mut groups = Vec::new();
    for o in &g.operators {
        if o.op_kind == OpKind::Composite {
            groups.push(o.members.iter().map(|m| m.id.clone()).collect());
            ops.extend(o.members.iter().cloned());
        } else {
            ops.push(o.clone());
        }
    }
    let leaf = DataflowGraph::new(g.dims.clone(), g.tensors.values().cloned().collect(), ops)?;
    Ok((leaf, groups))
}

/// Build the fused operator for a set of member ids of `g`.
pub fn describe_group(g: &DataflowGraph, members: &[&OperatorNode], id: &str, kernel: &str) -> (FusedOperator, OperatorNode) {
    let names: BTreeSet<&str> = members.iter().map(|m| m.id.as_str()).collect();
    let produced: BTreeSet<&str> = members.iter().flat_map(|m| m.outputs.iter().map(String::as_str)).collect();
    let mut ext_in = Vec::new();
    for m in members {
        for t in &m.inputs {
            if !produced.contains(t.as_str()) && !ext_in.contains(t) {
                ext_in.push(t.clone());
            }
        }
    }
    let mut ext_out = Vec::new();
    let mut interim = Vec::new();
    for m in members {
        for t in &m.outputs {
            let cs = g.consumers_of(t);
            if !cs.is_empty() && cs.iter().all(|c| names.contains(c.as_str())) {
                interim.push(t.clone());
            } else {
                ext_out.push(t.clone());
            }
        }
    }
    let phase = members[0].phase;
    let mut comp = OperatorNode::new(id, OpKind::Composite, phase, &[], &[]);
    comp.inputs = ext_in.clone();
    comp.outputs = ext_out.clone();
    comp.kernel = Some(kernel.to_string());
    comp.mha = members.iter().all(|m| m.mha);
    comp.members = members.iter().map(|m| (*m).clone()).collect();
    let space = g.iteration_space(&comp);
    let first = g.iteration_space(members[0]);
    let f = FusedOperator {
        id: id.to_string(),
        kernel: kernel.to_string(),
        phase,
        members: members.iter().map(|m| m.id.clone()).collect(),
        external_inputs: ext_in,
        external_outputs: ext_out,
        interim,
        iteration_space: space,
        two_loop: !first.reduction.is_empty() && members.len() > 1,
    };
    (f, comp)
}

/// Greedy maximal fusion in topological order, forward pass first, until no
/// group can grow. Contractions stay on their own except for absorbing an
/// adjacent scale operator. Every non-contraction group, singletons
/// included, becomes one composite operator in the returned graph.
pub fn fuse_pass(g: &DataflowGraph) -> Result<(DataflowGraph, Vec<FusedOperator>), FusionError> {
    let (leaf, initial) = flatten(g)?;
    let mut gr = Grouping::new(&leaf, &initial);
    loop {
        let a = gr.grow();
        let b = gr.hoist_column_reductions();
        if !a && !b {
            break;
        }
    }
    let original: BTreeMap<&str, usize> = leaf.operators.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect();
    let mut live: Vec<&Vec<usize>> = gr.groups.iter().filter(|v| !v.is_empty()).collect();
    live.sort_by_key(|v| v.iter().map(|&i| original[gr.ops[i].id.as_str()]).min().unwrap());

    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    let mut ops = Vec::new();
    let mut fused = Vec::new();
    for members in live {
        let mops: Vec<&OperatorNode> = members.iter().map(|&i| gr.ops[i]).collect();
        if mops.len() == 1 && mops[0].is_contraction() {
            ops.push(mops[0].clone());
            continue;
        }
        let kernel = kernel_name(&mops);
        let n = used.entry(kernel.clone()).or_insert(0);
        *n += 1;
        let id = if *n == 1 { kernel.clone() } else { format!("{kernel}_{n}") };
        let (f, comp) = describe_group(&leaf, &mops, &id, &kernel);
        ops.push(comp);
        fused.push(f);
    }
    let out = DataflowGraph::new(leaf.dims.clone(), leaf.tensors.values().cloned().collect(), ops)?;
    Ok((out, fused))
}

/// Words moved by a fused operator: each external tensor once.
pub fn fused_io_lower_bound(g: &DataflowGraph, f: &FusedOperator) -> u64 {
    f.external_inputs.iter().chain(&f.external_outputs).map(|t| g.numel(t)).sum()
}

/// Unfused versus fused I/O, over all operators and over non-contraction
/// operators only.
#[derive(Clone, Debug, PartialEq)]
pub struct MovementReduction {
    pub unfused_words: u64,
    pub fused_words: u64,
    pub whole_graph_pct: f64,
    pub non_contraction_unfused_words: u64,
    pub non_contraction_fused_words: u64,
    pub non_contraction_pct: f64,
}

fn pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

/// `g` is the unfused graph; `fused` the groups found on it.
pub fn movement_reduction(g: &DataflowGraph, fused: &[FusedOperator]) -> MovementReduction {
    let mut grouped: BTreeMap<&str, &FusedOperator> = BTreeMap::new();
    for f in fused {
        for m in &f.members {
            grouped.insert(m.as_str(), f);
        }
    }
    let (mut un, mut fu, mut nc_un, mut nc_fu) = (0u64, 0u64, 0u64, 0u64);
    for op in g.operators.iter().flat_map(|o| o.leaves()) {
        let (i, o) = data_volume(g, op);
        un += i + o;
        if !op.is_contraction() {
            nc_un += i + o;
        }
        if !grouped.contains_key(op.id.as_str()) {
            fu += i + o;
            if !op.is_contraction() {
                nc_fu += i + o;
            }
        }
    }
    for f in fused {
        let q = fused_io_lower_bound(g, f);
        fu += q;
        let has_contraction = f.members.iter().any(|m| {
            g.operators
                .iter()
                .flat_map(|o| o.leaves())
                .any(|l| &l.id == m && l.is_contraction())
        });
        if !has_contraction {
            nc_fu += q;
        }
    }
    MovementReduction {
        unfused_words: un,
        fused_words: fu,
        whole_graph_pct: pct(un, fu),
        non_contraction_unfused_words: nc_un,
        non_contraction_fused_words: nc_fu,
        non_contraction_pct: pct(nc_un, nc_fu),
    }
}

/// CSV: kernel id, kernel name, members, interim words elided.
pub fn fusion_report_csv(g: &DataflowGraph, fused: &[FusedOperator]) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["kernel_id", "kernel", "phase", "members", "interim", "interim_words_elided", "q_words", "two_loop"])
            .unwrap();
        for f in fused {
            let elided: u64 = f.interim.iter().map(|t| 2 * g.numel(t)).sum();
            w.write_record([
                f.id.clone(),
                f.kernel.clone(),
                f.phase.name().to_string(),
                f.members.join(" "),
                f.interim.join(" "),
                elided.to_string(),
                fused_io_lower_bound(g, f).to_string(),
                f.two_loop.to_string(),
            ])
            .unwrap();
        }
        w.flush().unwrap();
    }
    String::from_utf8(buf).unwrap()
}
