//! Layout configurations: per-tensor dimension orders plus tuning knobs.
//!
//! Contractions are enumerated as summation-string permutations that map to
//! one (batched) matrix multiplication. Fused kernels take the cross product
//! of per-tensor permutations and kernel knobs; when that exceeds the cap
//! the caller may fall back to tied enumeration, where all tensors of one
//! rank share a positional permutation.

use crate::graphir::{DataflowGraph, EinsumTerm, OpKind, OperatorNode};
use itertools::Itertools;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const DEFAULT_CAP: usize = 10_000;
pub const DEFAULT_MMM_ALGORITHMS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("operator '{op}' has {count} configurations, above the cap of {cap}")]
    CapExceeded { op: String, count: u128, cap: usize },
    #[error("contraction '{0}' has no feasible matrix-multiplication form")]
    NoFeasibleForm(String),
    #[error("empty configuration list")]
    Empty,
    #[error("cost missing for configuration '{0}'")]
    MissingCost(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutOptions {
    pub cap: usize,
    pub mmm_algorithms: usize,
    /// Enumerate past the cap instead of failing.
    pub override_cap: bool,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            cap: DEFAULT_CAP,
            mmm_algorithms: DEFAULT_MMM_ALGORITHMS,
            override_cap: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnumerationMode {
    Full,
    Tied,
}

impl EnumerationMode {
    pub fn name(self) -> &'static str {
        match self {
            EnumerationMode::Full => "full",
            EnumerationMode::Tied => "tied",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LayoutConfig {
    pub op_id: String,
    pub config_id: String,
    /// Tensor id to dims in storage order, outermost first.
    pub tensor_layouts: BTreeMap<String, Vec<String>>,
    pub knobs: BTreeMap<String, String>,
}

impl LayoutConfig {
    pub fn layout_string(&self, tensor: &str) -> String {
        self.tensor_layouts[tensor].concat()
    }
}

/// One way of running a contraction as a (batched) matrix multiplication.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ContractionForm {
    /// Summation string with each operand's indices in memory order, operand A first.
    pub einsum_variant: String,
    pub batched: bool,
    pub batch_dims: Vec<char>,
    pub m_dims: Vec<char>,
    pub n_dims: Vec<char>,
    pub k_dims: Vec<char>,
    /// Memory orders of A, B and C.
    pub orders: [Vec<char>; 3],
    /// Index of the original operand that plays A (0 or 1).
    pub a_operand: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Role {
    Batch,
    M,
    N,
    K,
}

fn role(c: char, a: &[char], b: &[char], out: &[char]) -> Option<Role> {
    match (a.contains(&c), b.contains(&c), out.contains(&c)) {
        (true, true, true) => Some(Role::Batch),
        (true, false, true) => Some(Role::M),
        (false, true, true) => Some(Role::N),
        (true, true, false) => Some(Role::K),
        _ => None,
    }
}

/// Feasibility of memory orders for A, B and C: each role group is
/// contiguous in every operand holding it, a group's internal order agrees
/// across operands, and the innermost group is never the batch group.
pub fn is_mmm_feasible(a: &[char], b: &[char], c: &[char]) -> bool {
    let ops = [a, b, c];
    let mut internal: BTreeMap<Role, Vec<char>> = BTreeMap::new();
    for o in ops {
        let mut roles = Vec::with_capacity(o.len());
        for &x in o {
            match role(x, a, b, c) {
                Some(r) => roles.push(r),
                None => return false,
            }
        }
        let runs: Vec<Role> = roles.iter().copied().dedup().collect();
        if runs.iter().collect::<BTreeSet<_>>().len() != runs.len() {
            return false;
        }
        if runs.last() == Some(&Role::Batch) {
            return false;
        }
        for r in runs {
            let seq: Vec<char> = o.iter().copied().filter(|&x| role(x, a, b, c) == Some(r)).collect();
            match internal.get(&r) {
                Some(prev) if *prev != seq => return false,
                _ => {
                    internal.insert(r, seq);
                }
            }
        }
    }
    true
}

/// Extents of a term's indices, read from the operand tensors.
fn term_extents(g: &DataflowGraph, term: &EinsumTerm) -> BTreeMap<char, u64> {
    let mut m = BTreeMap::new();
    for o in term.operands.iter().chain(std::iter::once(&term.output)) {
        for (c, d) in o.indices.iter().zip(&g.tensor(&o.tensor).dims) {
            m.insert(*c, g.extent(d));
        }
    }
    m
}

fn extent_of(ext: &BTreeMap<char, u64>, dims: &[char]) -> u64 {
    dims.iter().map(|c| ext[c]).product()
}

fn group_orders(groups: &[(Role, Vec<char>)]) -> Vec<Vec<Vec<char>>> {
    let present: Vec<&(Role, Vec<char>)> = groups.iter().filter(|(_, v)| !v.is_empty()).collect();
    let n = present.len();
    present
        .iter()
        .map(|x| x.0)
        .permutations(n)
        .filter(|p| p.last() != Some(&Role::Batch))
        .map(|p| p.iter().map(|r| present.iter().find(|x| x.0 == *r).unwrap().1.clone()).collect())
        .collect()
}

/// All feasible forms of a two-operand contraction term. Operands are
/// labelled so that the M extent is at least the N extent, ties broken by
/// tensor id, which makes `A,B->C` and `B,A->C` enumerate the same set.
pub fn enumerate_term_forms(g: &DataflowGraph, term: &EinsumTerm) -> Vec<ContractionForm> {
    if term.operands.len() != 2 {
        return Vec::new();
    }
    let syms = term_extents(g, term);
    let (x0, x1, out) = (&term.operands[0], &term.operands[1], &term.output);
    let mut a_idx = 0;
    {
        let m0: Vec<char> = x0.indices.iter().copied().filter(|c| role(*c, &x0.indices, &x1.indices, &out.indices) == Some(Role::M)).collect();
        let n0: Vec<char> = x1.indices.iter().copied().filter(|c| role(*c, &x0.indices, &x1.indices, &out.indices) == Some(Role::N)).collect();
        let (mm, nn) = (extent_of(&syms, &m0), extent_of(&syms, &n0));
        if nn > mm || (nn == mm && x1.tensor < x0.tensor) {
            a_idx = 1;
        }
    }
    let (a, b) = if a_idx == 0 { (x0, x1) } else { (x1, x0) };
    let by_role = |r: Role| -> Vec<char> {
        term.all_indices()
            .into_iter()
            .filter(|c| role(*c, &a.indices, &b.indices, &out.indices) == Some(r))
            .collect()
    };
    let (batch, m, n, k) = (by_role(Role::Batch), by_role(Role::M), by_role(Role::N), by_role(Role::K));
    if term.all_indices().iter().any(|c| role(*c, &a.indices, &b.indices, &out.indices).is_none()) {
        return Vec::new();
    }
    let mut forms = BTreeSet::new();
    for bo in batch.iter().copied().permutations(batch.len()) {
        for mo in m.iter().copied().permutations(m.len()) {
            for no in n.iter().copied().permutations(n.len()) {
                for ko in k.iter().copied().permutations(k.len()) {
                    let ga = [(Role::Batch, bo.clone()), (Role::M, mo.clone()), (Role::K, ko.clone())];
                    let gb = [(Role::Batch, bo.clone()), (Role::N, no.clone()), (Role::K, ko.clone())];
                    let gc = [(Role::Batch, bo.clone()), (Role::M, mo.clone()), (Role::N, no.clone())];
                    for oa in group_orders(&ga) {
                        for ob in group_orders(&gb) {
                            for oc in group_orders(&gc) {
                                let (la, lb, lc): (Vec<char>, Vec<char>, Vec<char>) = (oa.concat(), ob.concat(), oc.concat());
                                let s = |v: &[char]| v.iter().collect::<String>();
                                forms.insert(ContractionForm {
                                    einsum_variant: format!("{},{}->{}", s(&la), s(&lb), s(&lc)),
                                    batched: !batch.is_empty(),
                                    batch_dims: batch.clone(),
                                    m_dims: m.clone(),
                                    n_dims: n.clone(),
                                    k_dims: k.clone(),
                                    orders: [la, lb, lc],
                                    a_operand: a_idx,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    forms.into_iter().collect()
}

/// Forms of a contraction operator, from the structure of its first term.
pub fn enumerate_contraction_forms(g: &DataflowGraph, op: &OperatorNode) -> Vec<ContractionForm> {
    match op.einsum.as_ref() {
        Some(e) if op.is_contraction() => enumerate_term_forms(g, &e.terms[0]),
        _ => Vec::new(),
    }
}

/// Apply a form to every term of the operator: each operand slot follows
/// the positional order chosen for the first term's operand in that slot.
fn contraction_layouts(g: &DataflowGraph, op: &OperatorNode, form: &ContractionForm) -> BTreeMap<String, Vec<String>> {
    let e = op.einsum.as_ref().unwrap();
    let first = &e.terms[0];
    let slot_order = |slot: usize| -> &Vec<char> {
        match slot {
            2 => &form.orders[2],
            s if s == form.a_operand => &form.orders[0],
            _ => &form.orders[1],
        }
    };
    let positional = |slot: usize, base: &[char]| -> Vec<usize> {
        slot_order(slot).iter().map(|c| base.iter().position(|x| x == c).unwrap()).collect()
    };
    let mut out = BTreeMap::new();
    for term in &e.terms {
        let mut slots: Vec<(&crate::graphir::Operand, &crate::graphir::Operand, usize)> = Vec::new();
        for (i, o) in term.operands.iter().enumerate() {
            slots.push((o, &first.operands[i], i));
        }
        slots.push((&term.output, &first.output, 2));
        for (o, base, slot) in slots {
            let perm = positional(slot, &base.indices);
            let t = g.tensor(&o.tensor);
            let dims: Vec<String> = perm.iter().map(|&p| t.dims[p].clone()).collect();
            out.entry(o.tensor.clone()).or_insert(dims);
        }
    }
    for t in op.inputs.iter().chain(&op.outputs) {
        out.entry(t.clone()).or_insert_with(|| g.tensor(t).dims.clone());
    }
    out
}

/// Kernel knob rules. Returns (selectable thread dim, selectable warp
/// reduction dim).
fn knob_rules(kernel: &str) -> (bool, bool) {
    let base = kernel.split('_').next().unwrap_or(kernel);
    (matches!(base, "BRD" | "BEI"), matches!(base, "BSB" | "EBSB" | "BDRB"))
}

struct FusedShape {
    op_id: String,
    tensors: Vec<(String, Vec<String>)>,
    nest: Vec<String>,
    reduction: Vec<String>,
    thread: bool,
    warp: bool,
}

fn fused_shape(g: &DataflowGraph, op: &OperatorNode) -> FusedShape {
    let kernel = op.kernel.clone().unwrap_or_else(|| op.op_kind.name().to_string());
    let (thread, warp) = knob_rules(&kernel);
    let space = g.iteration_space(op);
    let mut tensors = Vec::new();
    for t in op.inputs.iter().chain(&op.outputs) {
        if !tensors.iter().any(|(x, _): &(String, Vec<String>)| x == t) {
            tensors.push((t.clone(), g.tensor(t).dims.clone()));
        }
    }
    let mut nest = g.loop_nest(op);
    for d in space.reduction.iter().chain(&space.independent) {
        if !nest.contains(d) {
            nest.push(d.clone());
        }
    }
    FusedShape {
        op_id: op.id.clone(),
        tensors,
        nest,
        reduction: space.reduction,
        thread,
        warp,
    }
}

fn knob_count(s: &FusedShape, vectors: &BTreeSet<&String>) -> u128 {
    let per_vector: u128 = if s.thread { (s.nest.len().max(2) - 1) as u128 } else { 1 }
        * if s.warp { s.reduction.len().max(1) as u128 } else { 1 };
    vectors.len() as u128 * per_vector
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Exact number of full-mode configurations, without enumerating them.
fn full_count(s: &FusedShape) -> u128 {
    let mut total = 0u128;
    let choices: Vec<&Vec<String>> = s.tensors.iter().map(|t| &t.1).collect();
    for lasts in choices.iter().map(|d| d.iter()).multi_cartesian_product() {
        let weight: u128 = choices.iter().map(|d| factorial(d.len() - 1)).product();
        let set: BTreeSet<&String> = lasts.into_iter().collect();
        total += weight * knob_count(s, &set);
    }
    if choices.is_empty() {
        total = 0;
    }
    total
}

fn expand_knobs(s: &FusedShape, layouts: &BTreeMap<String, Vec<String>>, out: &mut Vec<BTreeMap<String, String>>) {
    let vectors: BTreeSet<&String> = layouts.values().filter_map(|d| d.last()).collect();
    for v in vectors {
        let threads: Vec<Option<&String>> = if s.thread {
            let t: Vec<Option<&String>> = s.nest.iter().filter(|d| *d != v).map(Some).collect();
            if t.is_empty() {
                vec![None]
            } else {
                t
            }
        } else {
            vec![None]
        };
        let warps: Vec<Option<&String>> = if s.reduction.is_empty() {
            vec![None]
        } else if s.warp {
            s.reduction.iter().map(Some).collect()
        } else {
            vec![s.reduction.last()]
        };
        for t in &threads {
            for w in &warps {
                let mut k = BTreeMap::new();
                k.insert("vector_dim".to_string(), v.clone());
                if let Some(t) = t {
                    k.insert("thread_dim".to_string(), (*t).clone());
                }
                if let Some(w) = w {
                    k.insert("warp_reduce_dim".to_string(), (*w).clone());
                }
                out.push(k);
            }
        }
    }
}

fn number(op: &str, layouts: Vec<(BTreeMap<String, Vec<String>>, BTreeMap<String, String>)>) -> Vec<LayoutConfig> {
    layouts
        .into_iter()
        .enumerate()
        .map(|(i, (l, k))| LayoutConfig {
            op_id: op.to_string(),
            config_id: format!("{i:05}"),
            tensor_layouts: l,
            knobs: k,
        })
        .collect()
}

/// Full cross product of per-tensor permutations and knobs for a fused
/// (or any non-contraction) operator.
pub fn enumerate_fused_configs(g: &DataflowGraph, op: &OperatorNode, opts: &LayoutOptions) -> Result<Vec<LayoutConfig>, LayoutError> {
    let s = fused_shape(g, op);
    let count = full_count(&s);
    if count > opts.cap as u128 && !opts.override_cap {
        return Err(LayoutError::CapExceeded {
            op: s.op_id,
            count,
            cap: opts.cap,
        });
    }
    let mut all = Vec::new();
    let perms: Vec<Vec<Vec<String>>> = s
        .tensors
        .iter()
        .map(|(_, d)| d.iter().cloned().permutations(d.len()).collect())
        .collect();
    for combo in perms.iter().map(|p| p.iter()).multi_cartesian_product() {
        let layouts: BTreeMap<String, Vec<String>> = s.tensors.iter().map(|t| t.0.clone()).zip(combo.into_iter().cloned()).collect();
        let mut knobs = Vec::new();
        expand_knobs(&s, &layouts, &mut knobs);
        for k in knobs {
            all.push((layouts.clone(), k));
        }
    }
    Ok(number(&s.op_id, all))
}

/// Tied enumeration: one positional permutation per tensor rank, shared by
/// every tensor of that rank, times knobs.
pub fn enumerate_fused_configs_tied(g: &DataflowGraph, op: &OperatorNode) -> Vec<LayoutConfig> {
    let s = fused_shape(g, op);
    let ranks: Vec<usize> = s.tensors.iter().map(|t| t.1.len()).collect::<BTreeSet<_>>().into_iter().collect();
    let per_rank: Vec<Vec<Vec<usize>>> = ranks.iter().map(|&r| (0..r).permutations(r).collect()).collect();
    let mut all = Vec::new();
    for combo in per_rank.iter().map(|p| p.iter()).multi_cartesian_product() {
        let layouts: BTreeMap<String, Vec<String>> = s
            .tensors
            .iter()
            .map(|(id, dims)| {
                let p = combo[ranks.iter().position(|&r| r == dims.len()).unwrap()];
                (id.clone(), p.iter().map(|&i| dims[i].clone()).collect())
            })
            .collect();
        let mut knobs = Vec::new();
        expand_knobs(&s, &layouts, &mut knobs);
        for k in knobs {
            all.push((layouts.clone(), k));
        }
    }
    number(&s.op_id, all)
}

/// Contraction configurations: feasible forms times algorithm ids.
pub fn enumerate_contraction_configs(g: &DataflowGraph, op: &OperatorNode, opts: &LayoutOptions) -> Result<Vec<LayoutConfig>, LayoutError> {
    let forms = enumerate_contraction_forms(g, op);
    if forms.is_empty() {
        return Err(LayoutError::NoFeasibleForm(op.id.clone()));
    }
    let mut all = Vec::new();
    for f in &forms {
        let layouts = contraction_layouts(g, op, f);
        for alg in 0..opts.mmm_algorithms {
            let mut k = BTreeMap::new();
            k.insert("mmm_algorithm".to_string(), alg.to_string());
            k.insert("form".to_string(), f.einsum_variant.clone());
            all.push((layouts.clone(), k));
        }
    }
    Ok(number(&op.id, all))
}

/// Configurations for any operator of a fused graph. Fused kernels above
/// the cap fall back to tied enumeration.
pub fn enumerate_configs(g: &DataflowGraph, op: &OperatorNode, opts: &LayoutOptions) -> Result<(Vec<LayoutConfig>, EnumerationMode), LayoutError> {
    if op.is_contraction() {
        return Ok((enumerate_contraction_configs(g, op, opts)?, EnumerationMode::Full));
    }
    if op.op_kind == OpKind::Composite {
        if let Some(c) = op.members.iter().find(|m| m.is_contraction()) {
            let mut cfgs = enumerate_contraction_configs(g, c, opts)?;
            for cfg in &mut cfgs {
                cfg.op_id = op.id.clone();
                for t in op.inputs.iter().chain(&op.outputs) {
                    cfg.tensor_layouts.entry(t.clone()).or_insert_with(|| g.tensor(t).dims.clone());
                }
                cfg.tensor_layouts.retain(|t, _| op.inputs.contains(t) || op.outputs.contains(t));
            }
            return Ok((cfgs, EnumerationMode::Full));
        }
    }
    match enumerate_fused_configs(g, op, opts) {
        Ok(c) => Ok((c, EnumerationMode::Full)),
        Err(LayoutError::CapExceeded { .. }) => Ok((enumerate_fused_configs_tied(g, op), EnumerationMode::Tied)),
        Err(e) => Err(e),
    }
}

/// Full-mode configuration count of a non-contraction operator.
pub fn full_config_count(g: &DataflowGraph, op: &OperatorNode) -> u128 {
    full_count(&fused_shape(g, op))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigDistribution {
    pub count: usize,
    pub min: f64,
    pub min_config: String,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub max_config: String,
    /// (lower edge, upper edge, count)
    pub histogram: Vec<(f64, f64, usize)>,
    pub modes: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of per-configuration costs. `bins` equal-width buckets; a mode
/// is a run of buckets with equal count strictly above both neighbours.
pub fn config_distribution(costs: &[(String, f64)], bins: usize) -> Result<ConfigDistribution, LayoutError> {
    if costs.is_empty() {
        return Err(LayoutError::Empty);
    }
    let mut v: Vec<f64> = costs.iter().map(|c| c.1).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let pick = |best: fn(f64, f64) -> bool| -> &(String, f64) {
        let mut cur = &costs[0];
        for c in costs {
            if best(c.1, cur.1) || (c.1 == cur.1 && c.0 < cur.0) {
                cur = c;
            }
        }
        cur
    };
    let lo = pick(|a, b| a < b);
    let hi = pick(|a, b| a > b);
    let (min, max) = (v[0], v[v.len() - 1]);
    let bins = bins.max(1);
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in &v {
        let i = if width == 0.0 { 0 } else { (((x - min) / width) as usize).min(bins - 1) };
        counts[i] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (min + width * i as f64, min + width * (i + 1) as f64, c))
        .collect();
    let mut modes = 0;
    let mut i = 0;
    while i < bins {
        let mut j = i;
        while j + 1 < bins && counts[j + 1] == counts[i] {
            j += 1;
        }
        let left = if i == 0 { 0 } else { counts[i - 1] };
        let right = if j + 1 == bins { 0 } else { counts[j + 1] };
        if counts[i] > left && counts[i] > right {
            modes += 1;
        }
        i = j + 1;
    }
    Ok(ConfigDistribution {
        count: v.len(),
        min,
        min_config: lo.0.clone(),
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max,
        max_config: hi.0.clone(),
        histogram,
        modes,
    })
}

/// Per-operator configuration CSV: config id, one column per tensor, knobs, cost.
pub fn configs_csv(cfgs: &[LayoutConfig], costs: Option<&BTreeMap<String, f64>>) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let tensors: Vec<String> = cfgs.first().map(|c| c.tensor_layouts.keys().cloned().collect()).unwrap_or_default();
        let knobs: BTreeSet<String> = cfgs.iter().flat_map(|c| c.knobs.keys().cloned()).collect();
        let mut header = vec!["op_id".to_string(), "config_id".to_string()];
        header.extend(tensors.iter().cloned());
        header.extend(knobs.iter().cloned());
        header.push("cost_us".into());
        w.write_record(&header).unwrap();
        for c in cfgs {
            let mut row = vec![c.op_id.clone(), c.config_id.clone()];
            row.extend(tensors.iter().map(|t| c.layout_string(t)));
            row.extend(knobs.iter().map(|k| c.knobs.get(k).cloned().unwrap_or_default()));
            row.push(costs.and_then(|m| m.get(&c.config_id)).map(|x| format!("{x}")).unwrap_or_default());
            w.write_record(&row).unwrap();
        }
        w.flush().unwrap();
    }
    String::from_utf8(buf).unwrap()
}

/// Plot-ready distribution rows: op, statistic, value.
pub fn distribution_csv(rows: &[(String, ConfigDistribution)]) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["op_id", "count", "min_us", "min_config", "q1_us", "median_us", "q3_us", "max_us", "max_config", "modes"])
            .unwrap();
        for (op, d) in rows {
            w.write_record([
                op.clone(),
                d.count.to_string(),
                format!("{:.4}", d.min),
                d.min_config.clone(),
                format!("{:.4}", d.q1),
                format!("{:.4}", d.median),
                format!("{:.4}", d.q3),
                format!("{:.4}", d.max),
                d.max_config.clone(),
                d.modes.to_string(),
            ])
            .unwrap();
        }
        w.flush().unwrap();
    }
    String::from_utf8(buf).unwrap()
}
