//! Scalar fp64 reference executor for small graphs: operator semantics,
//! fusion validation and finite-difference gradient checks.

use crate::graphir::{DataflowGraph, EinsumTerm, OpKind, OperatorNode, TensorDesc, TensorKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("missing value for tensor '{0}'")]
    MissingInput(String),
    #[error("tensor '{tensor}' has {got} elements, expected {expected}")]
    ShapeMismatch { tensor: String, expected: usize, got: usize },
    #[error("graph holds {0} elements, above the executor guard")]
    SizeGuard(u64),
    #[error("operator '{0}' has no forward pairing")]
    MissingPairing(String),
    #[error("graphs expose different interfaces: {0}")]
    InterfaceMismatch(String),
    #[error("unknown operator '{0}'")]
    UnknownOp(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecContext {
    pub seed: u64,
    pub keep_prob: f64,
    /// Finite-difference step for nonlinear operators.
    pub eps: f64,
    pub layernorm_eps: f64,
    pub max_elements: u64,
}

impl Default for ExecContext {
    fn default() -> Self {
        ExecContext {
            seed: 0x5eed,
            keep_prob: 0.9,
            eps: 1e-5,
            layernorm_eps: 1e-5,
            max_elements: 1_000_000,
        }
    }
}

/// A tensor with values stored in the memory order given by `layout`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    pub desc: TensorDesc,
    pub layout: Vec<String>,
    pub data: Vec<f64>,
}

fn extents(g: &DataflowGraph, dims: &[String]) -> Vec<usize> {
    dims.iter().map(|d| g.extent(d) as usize).collect()
}

/// Row-major strides of `dims` expressed for each dim of `order`.
fn strides_for(g: &DataflowGraph, storage: &[String], logical: &[String]) -> Vec<usize> {
    let ext = extents(g, storage);
    let mut s = vec![0; storage.len()];
    let mut acc = 1;
    for i in (0..storage.len()).rev() {
        s[i] = acc;
        acc *= ext[i];
    }
    logical.iter().map(|d| s[storage.iter().position(|x| x == d).unwrap()]).collect()
}

fn permute(g: &DataflowGraph, data: &[f64], from: &[String], to: &[String]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let ext = extents(g, from);
    let dst = strides_for(g, to, from);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; ext.len()];
    for &v in data {
        let off: usize = idx.iter().zip(&dst).map(|(i, s)| i * s).sum();
        out[off] = v;
        for k in (0..ext.len()).rev() {
            idx[k] += 1;
            if idx[k] < ext[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

impl TensorValue {
    /// Wrap values given in the tensor's declared dim order.
    pub fn logical(desc: &TensorDesc, data: Vec<f64>) -> Self {
        TensorValue {
            desc: desc.clone(),
            layout: desc.dims.clone(),
            data,
        }
    }

    /// Same values stored in another dim order.
    pub fn with_layout(&self, g: &DataflowGraph, layout: &[String]) -> Self {
        TensorValue {
            desc: self.desc.clone(),
            layout: layout.to_vec(),
            data: permute(g, &self.data, &self.layout, layout),
        }
    }

    /// Values in declared dim order.
    pub fn to_logical(&self, g: &DataflowGraph) -> Vec<f64> {
        permute(g, &self.data, &self.layout, &self.desc.dims)
    }

    /// Element strides per declared dim.
    pub fn strides(&self, g: &DataflowGraph) -> Vec<usize> {
        strides_for(g, &self.layout, &self.desc.dims)
    }
}

type Values = BTreeMap<String, Vec<f64>>;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn rng_for(seed: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id))
}

/// Dropout mask as a pure function of (seed, mask tensor id): 1 kept, 0 dropped.
pub fn dropout_mask(seed: u64, id: &str, n: usize, keep: f64) -> Vec<f64> {
    let mut r = rng_for(seed, id);
    (0..n).map(|_| if r.gen::<f64>() < keep { 1.0 } else { 0.0 }).collect()
}

/// Uniform values in [-1, 1) for every graph input, seeded per tensor id.
pub fn random_inputs(g: &DataflowGraph, seed: u64) -> BTreeMap<String, TensorValue> {
    g.graph_inputs()
        .into_iter()
        .map(|t| {
            let n = g.numel(&t) as usize;
            let mut r = rng_for(seed, &t);
            let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let v = TensorValue::logical(g.tensor(&t), data);
            (t, v)
        })
        .collect()
}

/// For each flat index of `to_dims`, the flat index of `from_dims`
/// (a subset of `to_dims` by name) holding the same coordinates.
fn gather_map(g: &DataflowGraph, from_dims: &[String], to_dims: &[String]) -> Vec<usize> {
    let ext = extents(g, to_dims);
    let n: usize = ext.iter().product();
    let st = strides_for(g, from_dims, from_dims);
    let per: Vec<usize> = to_dims
        .iter()
        .map(|d| from_dims.iter().position(|x| x == d).map(|p| st[p]).unwrap_or(0))
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; ext.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&per).map(|(i, s)| i * s).sum());
        for k in (0..ext.len()).rev() {
            idx[k] += 1;
            if idx[k] < ext[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

struct Exec<'a> {
    g: &'a DataflowGraph,
    ctx: &'a ExecContext,
    vals: Values,
    flop: BTreeMap<String, u64>,
}

impl<'a> Exec<'a> {
    fn get(&self, t: &str) -> Result<&Vec<f64>, ExecError> {
        self.vals.get(t).ok_or_else(|| ExecError::MissingInput(t.to_string()))
    }

    fn dims(&self, t: &str) -> &[String] {
        &self.g.tensor(t).dims
    }

    fn contraction_term(&mut self, term: &EinsumTerm, out: &mut [f64]) -> Result<u64, ExecError> {
        let all = term.all_indices();
        let mut ext: BTreeMap<char, usize> = BTreeMap::new();
        for o in term.operands.iter().chain(std::iter::once(&term.output)) {
            for (c, d) in o.indices.iter().zip(self.dims(&o.tensor)) {
                ext.insert(*c, self.g.extent(d) as usize);
            }
        }
        let sizes: Vec<usize> = all.iter().map(|c| ext[c]).collect();
        let stride_of = |indices: &[char]| -> Vec<usize> {
            let mut s = vec![0usize; all.len()];
            let mut acc = 1;
            for c in indices.iter().rev() {
                let p = all.iter().position(|x| x == c).unwrap();
                s[p] += acc;
                acc *= ext[c];
            }
            s
        };
        let ops: Vec<(&Vec<f64>, Vec<usize>)> = term
            .operands
            .iter()
            .map(|o| Ok((self.get(&o.tensor)?, stride_of(&o.indices))))
            .collect::<Result<_, ExecError>>()?;
        let so = stride_of(&term.output.indices);
        let total: usize = sizes.iter().product();
        let mut idx = vec![0usize; all.len()];
        for _ in 0..total {
            let mut p = 1.0;
            for (data, st) in &ops {
                let off: usize = idx.iter().zip(st).map(|(i, s)| i * s).sum();
                p *= data[off];
            }
            let off: usize = idx.iter().zip(&so).map(|(i, s)| i * s).sum();
            out[off] += p;
            for k in (0..all.len()).rev() {
                idx[k] += 1;
                if idx[k] < sizes[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(2 * total as u64)
    }

    fn put(&mut self, t: &str, v: Vec<f64>) {
        self.vals.insert(t.to_string(), v);
    }

    fn mask(&self, t: &str) -> Vec<f64> {
        dropout_mask(self.ctx.seed, t, self.g.numel(t) as usize, self.ctx.keep_prob)
    }

    /// (group index for each element, group count, group size) when reducing
    /// over `reduced` dims of `dims`.
    fn groups(&self, dims: &[String], reduced: &[String]) -> (Vec<usize>, usize, usize) {
        let kept: Vec<String> = dims.iter().filter(|d| !reduced.contains(d)).cloned().collect();
        let map = gather_map(self.g, &kept, dims);
        let ng: usize = extents(self.g, &kept).iter().product();
        let gs: usize = extents(self.g, reduced).iter().product();
        (map, ng, gs)
    }

    fn run(&mut self, op: &OperatorNode) -> Result<(), ExecError> {
        let keep = self.ctx.keep_prob;
        let factor = op.factor.unwrap_or(1.0);
        match op.op_kind {
            OpKind::Composite => {
                for m in &op.members {
                    self.run(m)?;
                }
            }
            OpKind::Contraction => {
                let e = op.einsum.as_ref().unwrap();
                let mut outs: BTreeMap<String, Vec<f64>> =
                    op.outputs.iter().map(|t| (t.clone(), vec![0.0; self.g.numel(t) as usize])).collect();
                let mut flop = 0;
                for term in &e.terms {
                    let mut buf = outs.remove(&term.output.tensor).unwrap();
                    flop += self.contraction_term(term, &mut buf)?;
                    outs.insert(term.output.tensor.clone(), buf);
                }
                *self.flop.entry(op.id.clone()).or_insert(0) += flop;
                for (t, v) in outs {
                    self.put(&t, v);
                }
            }
            OpKind::Bias => {
                let n = op.outputs.len();
                for i in 0..n {
                    let x = self.get(&op.inputs[i])?;
                    let b = self.get(&op.inputs[n + i])?;
                    let map = gather_map(self.g, self.dims(&op.inputs[n + i]), self.dims(&op.inputs[i]));
                    let y: Vec<f64> = x.iter().zip(&map).map(|(v, &j)| v + b[j]).collect();
                    self.put(&op.outputs[i], y);
                }
            }
            OpKind::Scale => {
                let y: Vec<f64> = self.get(&op.inputs[0])?.iter().map(|v| factor * v).collect();
                self.put(&op.outputs[0], y);
            }
            OpKind::Residual => {
                let mut y = self.get(&op.inputs[0])?.clone();
                for t in &op.inputs[1..] {
                    let map = gather_map(self.g, self.dims(t), self.dims(&op.outputs[0]));
                    let x = self.get(t)?;
                    for (v, &j) in y.iter_mut().zip(&map) {
                        *v += x[j];
                    }
                }
                self.put(&op.outputs[0], y);
            }
            OpKind::Relu => {
                if op.phase.is_backward() {
                    let dy = self.get(&op.inputs[0])?;
                    let x = self.get(&op.inputs[1])?;
                    let dx = dy.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                    self.put(&op.outputs[0], dx);
                } else {
                    let y = self.get(&op.inputs[0])?.iter().map(|v| v.max(0.0)).collect();
                    self.put(&op.outputs[0], y);
                }
            }
            OpKind::Dropout => {
                if op.phase.is_backward() {
                    let dy = self.get(&op.inputs[0])?;
                    let m = self.get(&op.inputs[1])?;
                    let dx = dy.iter().zip(m).map(|(d, k)| d * k / keep).collect();
                    self.put(&op.outputs[0], dx);
                } else {
                    let m = self.mask(&op.outputs[1]);
                    let y = self.get(&op.inputs[0])?.iter().zip(&m).map(|(v, k)| v * k / keep).collect();
                    self.put(&op.outputs[0], y);
                    self.put(&op.outputs[1], m);
                }
            }
            OpKind::ReduceSum => {
                for (i, o) in op.inputs.iter().zip(&op.outputs) {
                    let map = gather_map(self.g, self.dims(o), self.dims(i));
                    let mut y = vec![0.0; self.g.numel(o) as usize];
                    for (v, &j) in self.get(i)?.iter().zip(&map) {
                        y[j] += v;
                    }
                    self.put(o, y);
                }
            }
            OpKind::Softmax => self.softmax(op, factor)?,
            OpKind::LayerNorm => self.layernorm(op)?,
        }
        Ok(())
    }

    fn softmax(&mut self, op: &OperatorNode, factor: f64) -> Result<(), ExecError> {
        let keep = self.ctx.keep_prob;
        let dims = self.dims(&op.inputs[0]).to_vec();
        let last = vec![dims.last().unwrap().clone()];
        let (map, ng, _) = self.groups(&dims, &last);
        if !op.phase.is_backward() {
            let x = self.get(&op.inputs[0])?;
            let mut mx = vec![f64::NEG_INFINITY; ng];
            for (v, &gi) in x.iter().zip(&map) {
                mx[gi] = mx[gi].max(factor * v);
            }
            let e: Vec<f64> = x.iter().zip(&map).map(|(v, &gi)| (factor * v - mx[gi]).exp()).collect();
            let mut s = vec![0.0; ng];
            for (v, &gi) in e.iter().zip(&map) {
                s[gi] += v;
            }
            let y: Vec<f64> = e.iter().zip(&map).map(|(v, &gi)| v / s[gi]).collect();
            if op.outputs.len() == 3 {
                let m = self.mask(&op.outputs[1]);
                let d = y.iter().zip(&m).map(|(v, k)| v * k / keep).collect();
                self.put(&op.outputs[0], y);
                self.put(&op.outputs[1], m);
                self.put(&op.outputs[2], d);
            } else {
                self.put(&op.outputs[0], y);
            }
        } else {
            let dy = self.get(&op.inputs[0])?.clone();
            let y = self.get(op.inputs.last().unwrap())?;
            let dsm: Vec<f64> = if op.inputs.len() == 3 {
                let m = self.get(&op.inputs[1])?;
                dy.iter().zip(m).map(|(d, k)| d * k / keep).collect()
            } else {
                dy
            };
            let mut dot = vec![0.0; ng];
            for ((d, v), &gi) in dsm.iter().zip(y).zip(&map) {
                dot[gi] += d * v;
            }
            let dx = dsm.iter().zip(y).zip(&map).map(|((d, v), &gi)| factor * v * (d - dot[gi])).collect();
            self.put(&op.outputs[0], dx);
        }
        Ok(())
    }

    fn layernorm(&mut self, op: &OperatorNode) -> Result<(), ExecError> {
        let x_t = if op.phase.is_backward() { &op.inputs[1] } else { &op.inputs[0] };
        let dims = self.dims(x_t).to_vec();
        let gamma_dims: Vec<String> = match op.phase {
            crate::graphir::Phase::Forward => self.dims(&op.inputs[1]).to_vec(),
            crate::graphir::Phase::BackwardDx => self.dims(&op.inputs[2]).to_vec(),
            crate::graphir::Phase::BackwardDw => self.dims(&op.outputs[0]).to_vec(),
        };
        let (map, ng, n) = self.groups(&dims, &gamma_dims);
        let pmap = gather_map(self.g, &gamma_dims, &dims);
        let x = self.get(x_t)?;
        let mut mean = vec![0.0; ng];
        for (v, &gi) in x.iter().zip(&map) {
            mean[gi] += v;
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; ng];
        for (v, &gi) in x.iter().zip(&map) {
            var[gi] += (v - mean[gi]).powi(2);
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + self.ctx.layernorm_eps).sqrt()).collect();
        let xhat: Vec<f64> = x.iter().zip(&map).map(|(v, &gi)| (v - mean[gi]) * rstd[gi]).collect();
        match op.phase {
            crate::graphir::Phase::Forward => {
                let g = self.get(&op.inputs[1])?;
                let b = self.get(&op.inputs[2])?;
                let y = xhat.iter().zip(&pmap).map(|(h, &p)| h * g[p] + b[p]).collect();
                self.put(&op.outputs[0], y);
            }
            crate::graphir::Phase::BackwardDx => {
                let dy = self.get(&op.inputs[0])?;
                let g = self.get(&op.inputs[2])?;
                let dxh: Vec<f64> = dy.iter().zip(&pmap).map(|(d, &p)| d * g[p]).collect();
                let mut s1 = vec![0.0; ng];
                let mut s2 = vec![0.0; ng];
                for ((d, h), &gi) in dxh.iter().zip(&xhat).zip(&map) {
                    s1[gi] += d;
                    s2[gi] += d * h;
                }
                let nf = n as f64;
                let dx = dxh
                    .iter()
                    .zip(&xhat)
                    .zip(&map)
                    .map(|((d, h), &gi)| rstd[gi] / nf * (nf * d - s1[gi] - h * s2[gi]))
                    .collect();
                self.put(&op.outputs[0], dx);
            }
            crate::graphir::Phase::BackwardDw => {
                let dy = self.get(&op.inputs[0])?;
                let np = self.g.numel(&op.outputs[0]) as usize;
                let mut dg = vec![0.0; np];
                let mut db = vec![0.0; np];
                for ((d, h), &p) in dy.iter().zip(&xhat).zip(&pmap) {
                    dg[p] += d * h;
                    db[p] += d;
                }
                self.put(&op.outputs[0], dg);
                self.put(&op.outputs[1], db);
            }
        }
        Ok(())
    }
}

/// Result of executing a graph: every tensor value in declared dim order
/// and the multiply-add flop counted per contraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub values: BTreeMap<String, Vec<f64>>,
    pub flop: BTreeMap<String, u64>,
}

impl Execution {
    pub fn value(&self, g: &DataflowGraph, t: &str) -> TensorValue {
        TensorValue::logical(g.tensor(t), self.values[t].clone())
    }
}

fn check_inputs(g: &DataflowGraph, inputs: &BTreeMap<String, TensorValue>, ctx: &ExecContext) -> Result<Values, ExecError> {
    let total: u64 = g.tensors.keys().map(|t| g.numel(t)).sum();
    if total > ctx.max_elements {
        return Err(ExecError::SizeGuard(total));
    }
    let mut vals = Values::new();
    for t in g.graph_inputs() {
        let v = inputs.get(&t).ok_or_else(|| ExecError::MissingInput(t.clone()))?;
        let expected = g.numel(&t) as usize;
        if v.data.len() != expected {
            return Err(ExecError::ShapeMismatch {
                tensor: t,
                expected,
                got: v.data.len(),
            });
        }
        vals.insert(t.clone(), v.to_logical(g));
    }
    Ok(vals)
}

/// Execute a (fused or unfused) graph on the given inputs.
pub fn execute(g: &DataflowGraph, inputs: &BTreeMap<String, TensorValue>, ctx: &ExecContext) -> Result<Execution, ExecError> {
    let vals = check_inputs(g, inputs, ctx)?;
    let mut ex = Exec {
        g,
        ctx,
        vals,
        flop: BTreeMap::new(),
    };
    for op in g.ordered_ops() {
        ex.run(op)?;
    }
    Ok(Execution {
        values: ex.vals,
        flop: ex.flop,
    })
}

/// Run one operator against a value map, returning the updated map.
pub fn execute_op(g: &DataflowGraph, op: &OperatorNode, values: &BTreeMap<String, Vec<f64>>, ctx: &ExecContext) -> Result<BTreeMap<String, Vec<f64>>, ExecError> {
    let mut ex = Exec {
        g,
        ctx,
        vals: values.clone(),
        flop: BTreeMap::new(),
    };
    ex.run(op)?;
    Ok(ex.vals)
}

/// max |a - b| / max |a| for one tensor.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Run both graphs on `trials` seeded random inputs and return the maximum
/// relative error over the outputs of `g`.
pub fn validate_fusion(g: &DataflowGraph, fused: &DataflowGraph, trials: usize, ctx: &ExecContext) -> Result<f64, ExecError> {
    let (ia, ib) = (g.graph_inputs(), fused.graph_inputs());
    if ia != ib {
        return Err(ExecError::InterfaceMismatch(format!("inputs {ia:?} vs {ib:?}")));
    }
    let outs = g.graph_outputs();
    let fouts: BTreeSet<String> = fused.operators.iter().flat_map(|o| o.produced()).map(str::to_string).collect();
    if let Some(t) = outs.iter().find(|t| !fouts.contains(*t)) {
        return Err(ExecError::InterfaceMismatch(format!("output '{t}' not produced by the fused graph")));
    }
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let inputs = random_inputs(g, ctx.seed.wrapping_add(trial as u64));
        let a = execute(g, &inputs, ctx)?;
        let b = execute(fused, &inputs, ctx)?;
        for t in &outs {
            worst = worst.max(rel_error(&a.values[t], &b.values[t]));
        }
    }
    Ok(worst)
}

/// Operators for which a unit step gives exact central differences.
fn is_linear(op: &OperatorNode) -> bool {
    matches!(
        op.op_kind,
        OpKind::Contraction | OpKind::Bias | OpKind::Residual | OpKind::Dropout | OpKind::ReduceSum | OpKind::Scale
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op_id: String,
    pub forward_op: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

/// Compare a backward operator against central differences of its forward
/// operator on L = sum(cotangent * forward output). Gradient inputs not
/// named as cotangents are accumulated terms and are subtracted from the
/// analytic result.
pub fn grad_check(g: &DataflowGraph, op_id: &str, samples: usize, ctx: &ExecContext) -> Result<GradCheck, ExecError> {
    let bop = g.op(op_id).ok_or_else(|| ExecError::UnknownOp(op_id.to_string()))?;
    let gp = bop.grad.as_ref().ok_or_else(|| ExecError::MissingPairing(op_id.to_string()))?;
    let fop = g.op(&gp.of).ok_or_else(|| ExecError::MissingPairing(op_id.to_string()))?;
    let base = execute(g, &random_inputs(g, ctx.seed), ctx)?.values;
    let cot_values: BTreeSet<&String> = gp.cotangents.values().collect();
    let addends: Vec<&String> = bop
        .inputs
        .iter()
        .filter(|t| g.tensor(t).kind == TensorKind::Gradient && !cot_values.contains(t))
        .collect();
    let loss_terms: Vec<(&String, &Vec<f64>)> = gp.cotangents.iter().map(|(o, d)| (o, &base[d])).collect();
    let h = if is_linear(fop) { 1.0 } else { ctx.eps };
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for out in bop.outputs.iter().take(gp.wrt.len()) {
        let mut a = base[out].clone();
        for t in &addends {
            if g.tensor(t).dims == g.tensor(out).dims {
                for (v, d) in a.iter_mut().zip(&base[*t]) {
                    *v -= d;
                }
            }
        }
        analytic.push(a);
    }
    // One floor for the whole operator, so an identically zero gradient
    // (e.g. a bias cancelled by a later normalization) compares against
    // the scale of its siblings rather than against roundoff.
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = rng_for(ctx.seed, op_id);
    let mut worst = 0.0f64;
    for s in 0..samples {
        let w = s % gp.wrt.len();
        let x = &gp.wrt[w];
        let analytic = &analytic[w];
        let i = rng.gen_range(0..analytic.len());
        let mut plus = base.clone();
        plus.get_mut(x).unwrap()[i] += h;
        let mut minus = base.clone();
        minus.get_mut(x).unwrap()[i] -= h;
        let fp = execute_op(g, fop, &plus, ctx)?;
        let fm = execute_op(g, fop, &minus, ctx)?;
        let mut fd = 0.0;
        for (o, c) in &loss_terms {
            for ((p, m), cv) in fp[*o].iter().zip(&fm[*o]).zip(c.iter()) {
                fd += (p - m) * cv;
            }
        }
        fd /= 2.0 * h;
        let an = analytic[i];
        let denom = an.abs().max(fd.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
        worst = worst.max((fd - an).abs() / denom);
    }
    Ok(GradCheck {
        op_id: op_id.to_string(),
        forward_op: fop.id.clone(),
        samples,
        max_rel_error: worst,
    })
}
