//! Cost tables (roofline model or ingested measurements) and global
//! configuration selection by shortest path over a layout-state graph.

use crate::analysis::{count_flop, AnalysisError, DeviceModel, FlopDefaults};
use crate::graphir::{DataflowGraph, OperatorNode, TensorKind};
use crate::layout::LayoutConfig;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("cost table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cost table line {line}: unknown operator '{op}'")]
    UnknownOp { line: usize, op: String },
    #[error("cost table line {line}: unknown configuration '{config}' of operator '{op}'")]
    UnknownConfig { line: usize, op: String, config: String },
    #[error("cost table line {line}: runtime must be positive, got {value}")]
    NonPositive { line: usize, value: f64 },
    #[error("operator '{0}' has no costed configuration")]
    NoCostedConfig(String),
    #[error("no layout-compatible path from source to sink")]
    Unreachable,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("configuration file: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    Measured,
    Modeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRecord {
    pub op_id: String,
    pub config_id: String,
    pub runtime_us: f64,
    pub source: CostSource,
}

/// Costs keyed by (op id, config id). Config id `*` covers every
/// configuration of the operator not listed explicitly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostTable {
    pub records: BTreeMap<(String, String), CostRecord>,
}

pub const WILDCARD: &str = "*";

impl CostTable {
    pub fn insert(&mut self, r: CostRecord) {
        let key = (r.op_id.clone(), r.config_id.clone());
        match self.records.get(&key) {
            Some(old) if old.runtime_us <= r.runtime_us => {}
            _ => {
                self.records.insert(key, r);
            }
        }
    }

    pub fn get(&self, op: &str, config: &str) -> Option<&CostRecord> {
        self.records
            .get(&(op.to_string(), config.to_string()))
            .or_else(|| self.records.get(&(op.to_string(), WILDCARD.to_string())))
    }

    pub fn ops(&self) -> BTreeSet<&str> {
        self.records.keys().map(|k| k.0.as_str()).collect()
    }

    pub fn merge(&mut self, other: CostTable) {
        for r in other.records.into_values() {
            self.insert(r);
        }
    }
}

/// Parse a cost CSV (`op_id,config_id,runtime_us,source`). When `known` is
/// given, operator and configuration ids are checked against it. Lines
/// starting with `#` are ignored.
pub fn ingest_costs(text: &str, known: Option<&BTreeMap<String, BTreeSet<String>>>) -> Result<CostTable, CostError> {
    #[derive(Deserialize)]
    struct Row {
        op_id: String,
        config_id: String,
        runtime_us: f64,
        source: CostSource,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let mut table = CostTable::default();
    let headers = rdr
        .headers()
        .map_err(|e| CostError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CostError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: Row = rec.deserialize(Some(&headers)).map_err(|e| CostError::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.runtime_us > 0.0 && row.runtime_us.is_finite()) {
            return Err(CostError::NonPositive {
                line,
                value: row.runtime_us,
            });
        }
        if let Some(k) = known {
            let cfgs = k.get(&row.op_id).ok_or_else(|| CostError::UnknownOp {
                line,
                op: row.op_id.clone(),
            })?;
            if row.config_id != WILDCARD && !cfgs.contains(&row.config_id) {
                return Err(CostError::UnknownConfig {
                    line,
                    op: row.op_id.clone(),
                    config: row.config_id.clone(),
                });
            }
        }
        table.insert(CostRecord {
            op_id: row.op_id,
            config_id: row.config_id,
            runtime_us: row.runtime_us,
            source: row.source,
        });
    }
    Ok(table)
}

pub fn costs_csv(t: &CostTable) -> String {
    let mut s = String::from("op_id,config_id,runtime_us,source\n");
    for r in t.records.values() {
        let src = match r.source {
            CostSource::Measured => "measured",
            CostSource::Modeled => "modeled",
        };
        s.push_str(&format!("{},{},{},{}\n", r.op_id, r.config_id, r.runtime_us, src));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModelOptions {
    /// Byte multiplier for a tensor whose fastest dim is not the vector dim.
    pub misalignment_penalty: f64,
}

impl Default for CostModelOptions {
    fn default() -> Self {
        CostModelOptions {
            misalignment_penalty: 1.5,
        }
    }
}

/// Roofline estimate in µs: max(flop / peak, bytes / bandwidth).
pub fn roofline_us(flop: u64, bytes: f64, peak_flops: f64, device: &DeviceModel) -> f64 {
    (flop as f64 / peak_flops).max(bytes / device.peak_bandwidth_bytes) * 1e6
}

/// Roofline runtime of an operator under a configuration. Each external
/// tensor is moved once; tensors not stored with the vector dim fastest
/// pay the misalignment penalty.
pub fn roofline_cost(
    g: &DataflowGraph,
    op: &OperatorNode,
    config: Option<&LayoutConfig>,
    device: &DeviceModel,
    opts: &CostModelOptions,
) -> Result<f64, CostError> {
    let flop = count_flop(g, op, &FlopDefaults::default())?;
    let peak = if op.leaves().iter().any(|l| l.is_contraction()) {
        device.peak_contraction_flops
    } else {
        device.peak_scalar_flops
    };
    let vector = config.and_then(|c| c.knobs.get("vector_dim"));
    let mut seen = BTreeSet::new();
    let mut bytes = 0.0;
    for t in op.inputs.iter().chain(&op.outputs) {
        if !seen.insert(t) {
            continue;
        }
        let desc = g.tensor(t);
        let mut b = g.numel(t) as f64 * desc.element_bytes as f64;
        if let (Some(v), Some(c)) = (vector, config) {
            if c.tensor_layouts.get(t).and_then(|l| l.last()) != Some(v) {
                b *= opts.misalignment_penalty;
            }
        }
        bytes += b;
    }
    Ok(roofline_us(flop, bytes, peak, device))
}

/// Cost of copying a tensor into a different layout: read and write once, no flop.
pub fn transpose_cost(g: &DataflowGraph, tensor: &str, device: &DeviceModel) -> f64 {
    let d = g.tensor(tensor);
    roofline_us(0, 2.0 * g.numel(tensor) as f64 * d.element_bytes as f64, device.peak_scalar_flops, device)
}

/// Modeled costs for every enumerated configuration.
pub fn model_costs(
    g: &DataflowGraph,
    configs: &BTreeMap<String, Vec<LayoutConfig>>,
    device: &DeviceModel,
    opts: &CostModelOptions,
) -> Result<CostTable, CostError> {
    let mut t = CostTable::default();
    for op in &g.operators {
        let Some(cfgs) = configs.get(&op.id) else { continue };
        for c in cfgs {
            t.insert(CostRecord {
                op_id: op.id.clone(),
                config_id: c.config_id.clone(),
                runtime_us: roofline_cost(g, op, Some(c), device, opts)?,
                source: CostSource::Modeled,
            });
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Node {
    Source,
    Sink,
    /// Layout of an operator's primary input (`out == false`) or primary output.
    Boundary {
        step: usize,
        out: bool,
        tensor: String,
        layout: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    /// Runs an operator in the given configuration.
    Operator { op_id: String, config_id: String },
    /// Same layout handed to the next operator.
    Identity,
    /// Next operator does not read the previous output.
    Free,
    Transpose { tensor: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub kind: EdgeKind,
}

/// Layered layout-state graph. Node 0 is the source, node 1 the sink.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionGraph {
    pub pass: Pass,
    pub ops: Vec<String>,
    pub primary: Vec<(String, String)>,
    pub nodes: Vec<Node>,
    pub edges: Vec<SelEdge>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOptions {
    pub allow_transposes: bool,
    /// Fixed layout for the first operator's primary input.
    pub input_layout: Option<Vec<String>>,
    pub device: DeviceModel,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            allow_transposes: true,
            input_layout: None,
            device: DeviceModel::default(),
        }
    }
}

/// Operators of one pass in topological order.
pub fn pass_ops(g: &DataflowGraph, pass: Pass) -> Vec<&OperatorNode> {
    g.ordered_ops()
        .into_iter()
        .filter(|o| o.phase.is_backward() == (pass == Pass::Backward))
        .collect()
}

/// Primary (input, output) tensor of each operator in a sequence: the input
/// is the previous primary output when read, else the first non-parameter
/// input; the output is the one the next operator reads, else a graph
/// output, else the first output.
pub fn primary_tensors(g: &DataflowGraph, ops: &[&OperatorNode]) -> Vec<(String, String)> {
    let outputs: BTreeSet<String> = g.graph_outputs().into_iter().collect();
    let mut res: Vec<(String, String)> = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        let prev = res.last().map(|p| p.1.clone());
        let pin = match prev {
            Some(p) if op.inputs.contains(&p) => p,
            _ => op
                .inputs
                .iter()
                .find(|t| g.tensor(t).kind != TensorKind::Parameter)
                .unwrap_or(&op.inputs[0])
                .clone(),
        };
        let next = ops.get(i + 1);
        let pout = op
            .outputs
            .iter()
            .find(|t| next.is_some_and(|n| n.inputs.contains(t)))
            .or_else(|| op.outputs.iter().find(|t| outputs.contains(*t)))
            .unwrap_or(&op.outputs[0])
            .clone();
        res.push((pin, pout));
    }
    res
}

/// Build the selection graph for one pass. Operator edges carry the
/// minimum cost over configurations with matching boundary layouts; the
/// realizing configuration is the smallest id among the minima.
pub fn build_selection_graph(
    g: &DataflowGraph,
    configs: &BTreeMap<String, Vec<LayoutConfig>>,
    costs: &CostTable,
    pass: Pass,
    opts: &SelectionOptions,
) -> Result<SelectionGraph, CostError> {
    let ops = pass_ops(g, pass);
    let primary = primary_tensors(g, &ops);
    let mut nodes = vec![Node::Source, Node::Sink];
    let mut index: BTreeMap<Node, usize> = BTreeMap::new();
    let mut edges = Vec::new();
    let mut intern = |n: Node, nodes: &mut Vec<Node>| -> usize {
        *index.entry(n.clone()).or_insert_with(|| {
            nodes.push(n);
            nodes.len() - 1
        })
    };
    let mut layers_in: Vec<Vec<usize>> = Vec::new();
    let mut layers_out: Vec<Vec<usize>> = Vec::new();
    for (step, op) in ops.iter().enumerate() {
        let (pin, pout) = &primary[step];
        let mut best: BTreeMap<(Vec<String>, Vec<String>), (f64, String)> = BTreeMap::new();
        for c in configs.get(&op.id).map(Vec::as_slice).unwrap_or(&[]) {
            let Some(r) = costs.get(&op.id, &c.config_id) else { continue };
            let lin = c.tensor_layouts.get(pin).cloned().unwrap_or_else(|| g.tensor(pin).dims.clone());
            let lout = c.tensor_layouts.get(pout).cloned().unwrap_or_else(|| g.tensor(pout).dims.clone());
            let e = best.entry((lin, lout)).or_insert((r.runtime_us, c.config_id.clone()));
            if r.runtime_us < e.0 || (r.runtime_us == e.0 && c.config_id < e.1) {
                *e = (r.runtime_us, c.config_id.clone());
            }
        }
        if best.is_empty() {
            return Err(CostError::NoCostedConfig(op.id.clone()));
        }
        let mut ins = BTreeSet::new();
        let mut outs = BTreeSet::new();
        for ((lin, lout), (w, cfg)) in best {
            let a = intern(
                Node::Boundary {
                    step,
                    out: false,
                    tensor: pin.clone(),
                    layout: lin,
                },
                &mut nodes,
            );
            let b = intern(
                Node::Boundary {
                    step,
                    out: true,
                    tensor: pout.clone(),
                    layout: lout,
                },
                &mut nodes,
            );
            ins.insert(a);
            outs.insert(b);
            edges.push(SelEdge {
                from: a,
                to: b,
                weight: w,
                kind: EdgeKind::Operator {
                    op_id: op.id.clone(),
                    config_id: cfg,
                },
            });
        }
        layers_in.push(ins.into_iter().collect());
        layers_out.push(outs.into_iter().collect());
    }
    let layout_of = |n: usize, nodes: &[Node]| -> Vec<String> {
        match &nodes[n] {
            Node::Boundary { layout, .. } => layout.clone(),
            _ => unreachable!(),
        }
    };
    for step in 0..ops.len() {
        if step == 0 {
            for &n in &layers_in[0] {
                if opts.input_layout.as_ref().is_none_or(|l| *l == layout_of(n, &nodes)) {
                    edges.push(SelEdge {
                        from: 0,
                        to: n,
                        weight: 0.0,
                        kind: EdgeKind::Free,
                    });
                }
            }
        } else {
            let shared = primary[step - 1].1 == primary[step].0;
            for &a in &layers_out[step - 1] {
                for &b in &layers_in[step] {
                    let (la, lb) = (layout_of(a, &nodes), layout_of(b, &nodes));
                    let edge = if !shared {
                        Some((0.0, EdgeKind::Free))
                    } else if la == lb {
                        Some((0.0, EdgeKind::Identity))
                    } else if opts.allow_transposes {
                        let t = primary[step].0.clone();
                        Some((transpose_cost(g, &t, &opts.device), EdgeKind::Transpose { tensor: t }))
                    } else {
                        None
                    };
                    if let Some((weight, kind)) = edge {
                        edges.push(SelEdge { from: a, to: b, weight, kind });
                    }
                }
            }
        }
        if step + 1 == ops.len() {
            for &n in &layers_out[step] {
                edges.push(SelEdge {
                    from: n,
                    to: 1,
                    weight: 0.0,
                    kind: EdgeKind::Free,
                });
            }
        }
    }
    let mut sg = SelectionGraph {
        pass,
        ops: ops.iter().map(|o| o.id.clone()).collect(),
        primary,
        nodes,
        edges,
    };
    prune(&mut sg);
    Ok(sg)
}

/// Drop nodes not on any source-to-sink path, then renumber.
fn prune(sg: &mut SelectionGraph) {
    let n = sg.nodes.len();
    let reach = |fwd: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        let start = if fwd { 0 } else { 1 };
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            for e in &sg.edges {
                let (s, t) = if fwd { (e.from, e.to) } else { (e.to, e.from) };
                if s == x && !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    };
    let (f, b) = (reach(true), reach(false));
    let keep: Vec<bool> = (0..n).map(|i| i < 2 || (f[i] && b[i])).collect();
    let mut remap = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for i in 0..n {
        if keep[i] {
            remap[i] = nodes.len();
            nodes.push(sg.nodes[i].clone());
        }
    }
    sg.edges.retain(|e| keep[e.from] && keep[e.to]);
    for e in &mut sg.edges {
        e.from = remap[e.from];
        e.to = remap[e.to];
    }
    sg.nodes = nodes;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChosenConfig {
    pub config_id: String,
    pub tensor_layouts: BTreeMap<String, String>,
    pub knobs: BTreeMap<String, String>,
    pub runtime_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransposeStep {
    pub tensor: String,
    pub before_op: String,
    pub from_layout: String,
    pub to_layout: String,
    pub cost_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassSelection {
    pub pass: Pass,
    pub total_us: f64,
    pub lower_bound_us: f64,
    /// (op id, config id) along the path.
    pub choices: Vec<(String, String)>,
    pub transposes: Vec<TransposeStep>,
}

impl PassSelection {
    /// Relative gap to the constraint-free per-operator minimum, in percent.
    pub fn gap_pct(&self) -> f64 {
        if self.lower_bound_us == 0.0 {
            0.0
        } else {
            100.0 * (self.total_us / self.lower_bound_us - 1.0)
        }
    }
}

/// Shortest path in one sweep over the layered graph. Ties are broken by
/// the lexicographically smallest sequence of configuration ids.
pub fn select_configuration(sg: &SelectionGraph, costs: &CostTable) -> Result<PassSelection, CostError> {
    let n = sg.nodes.len();
    let order = topo_nodes(sg);
    let mut dist: Vec<Option<(f64, Vec<String>)>> = vec![None; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    dist[0] = Some((0.0, Vec::new()));
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, e) in sg.edges.iter().enumerate() {
        out_edges[e.from].push(i);
    }
    for u in order {
        let Some((du, ku)) = dist[u].clone() else { continue };
        for &ei in &out_edges[u] {
            let e = &sg.edges[ei];
            let nd = du + e.weight;
            let mut nk = ku.clone();
            if let EdgeKind::Operator { config_id, .. } = &e.kind {
                nk.push(config_id.clone());
            }
            let better = match &dist[e.to] {
                None => true,
                Some((d, k)) => nd < *d || (nd == *d && nk < *k),
            };
            if better {
                dist[e.to] = Some((nd, nk));
                via[e.to] = Some(ei);
            }
        }
    }
    let (total, _) = dist[1].clone().ok_or(CostError::Unreachable)?;
    let mut path = Vec::new();
    let mut cur = 1;
    while cur != 0 {
        let ei = via[cur].ok_or(CostError::Unreachable)?;
        path.push(ei);
        cur = sg.edges[ei].from;
    }
    path.reverse();
    let mut choices = Vec::new();
    let mut transposes = Vec::new();
    let mut step_ops = sg.ops.iter();
    let layout_str = |i: usize| match &sg.nodes[i] {
        Node::Boundary { layout, .. } => layout.concat(),
        _ => String::new(),
    };
    let mut pending: Option<(String, String, String, f64)> = None;
    for ei in path {
        let e = &sg.edges[ei];
        match &e.kind {
            EdgeKind::Operator { op_id, config_id } => {
                let _ = step_ops.next();
                if let Some((tensor, from, to, cost)) = pending.take() {
                    transposes.push(TransposeStep {
                        tensor,
                        before_op: op_id.clone(),
                        from_layout: from,
                        to_layout: to,
                        cost_us: cost,
                    });
                }
                choices.push((op_id.clone(), config_id.clone()));
            }
            EdgeKind::Transpose { tensor } => {
                pending = Some((tensor.clone(), layout_str(e.from), layout_str(e.to), e.weight));
            }
            _ => {}
        }
    }
    let mut lower = 0.0;
    for op in &sg.ops {
        let m = costs
            .records
            .values()
            .filter(|r| &r.op_id == op)
            .map(|r| r.runtime_us)
            .fold(f64::INFINITY, f64::min);
        lower += m;
    }
    Ok(PassSelection {
        pass: sg.pass,
        total_us: total,
        lower_bound_us: lower,
        choices,
        transposes,
    })
}

fn topo_nodes(sg: &SelectionGraph) -> Vec<usize> {
    let rank = |n: &Node| -> (usize, usize) {
        match n {
            Node::Source => (0, 0),
            Node::Boundary { step, out, .. } => (1 + 2 * step + *out as usize, 0),
            Node::Sink => (usize::MAX, 0),
        }
    };
    let mut idx: Vec<usize> = (0..sg.nodes.len()).collect();
    idx.sort_by_key(|&i| (rank(&sg.nodes[i]), i));
    idx
}

/// Full configuration: one entry per operator of both passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfiguration {
    pub header: ConfigHeader,
    pub operators: BTreeMap<String, ChosenConfig>,
    pub transposes: Vec<TransposeStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigHeader {
    pub total_predicted_us: f64,
    pub forward_us: f64,
    pub backward_us: f64,
    pub lower_bound_us: f64,
    pub device: DeviceModel,
}

impl GlobalConfiguration {
    pub fn empty(device: DeviceModel) -> Self {
        GlobalConfiguration {
            header: ConfigHeader {
                total_predicted_us: 0.0,
                forward_us: 0.0,
                backward_us: 0.0,
                lower_bound_us: 0.0,
                device,
            },
            operators: BTreeMap::new(),
            transposes: Vec::new(),
        }
    }
}

/// Select forward and backward passes independently and assemble the result.
pub fn select_global(
    g: &DataflowGraph,
    configs: &BTreeMap<String, Vec<LayoutConfig>>,
    costs: &CostTable,
    opts: &SelectionOptions,
) -> Result<(GlobalConfiguration, Vec<PassSelection>), CostError> {
    let mut gc = GlobalConfiguration::empty(opts.device);
    let mut passes = Vec::new();
    for pass in [Pass::Forward, Pass::Backward] {
        if pass_ops(g, pass).is_empty() {
            continue;
        }
        // A pinned input layout refers to the encoder input, so it binds the forward pass only.
        let pass_opts = SelectionOptions {
            input_layout: if pass == Pass::Forward { opts.input_layout.clone() } else { None },
            ..opts.clone()
        };
        let sg = build_selection_graph(g, configs, costs, pass, &pass_opts)?;
        let sel = select_configuration(&sg, costs)?;
        for (op, cid) in &sel.choices {
            let cfg = configs[op].iter().find(|c| &c.config_id == cid).unwrap();
            gc.operators.insert(
                op.clone(),
                ChosenConfig {
                    config_id: cid.clone(),
                    tensor_layouts: cfg.tensor_layouts.iter().map(|(t, l)| (t.clone(), l.concat())).collect(),
                    knobs: cfg.knobs.clone(),
                    runtime_us: costs.get(op, cid).unwrap().runtime_us,
                },
            );
        }
        match pass {
            Pass::Forward => gc.header.forward_us = sel.total_us,
            Pass::Backward => gc.header.backward_us = sel.total_us,
        }
        gc.header.lower_bound_us += sel.lower_bound_us;
        gc.transposes.extend(sel.transposes.iter().cloned());
        passes.push(sel);
    }
    gc.header.total_predicted_us = gc.header.forward_us + gc.header.backward_us;
    Ok((gc, passes))
}

pub fn emit_configuration(gc: &GlobalConfiguration) -> String {
    let mut s = serde_json::to_string_pretty(gc).expect("configuration serializes");
    s.push('\n');
    s
}

pub fn parse_configuration(text: &str) -> Result<GlobalConfiguration, CostError> {
    serde_json::from_str(text).map_err(|e| CostError::Config(e.to_string()))
}
