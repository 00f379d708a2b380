//! Operator classification, flop and data-volume accounting, MUE and
//! class-level aggregation.

use crate::graphir::{DataflowGraph, OpKind, OperatorNode, Phase};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpClass {
    TensorContraction,
    StatisticalNormalization,
    ElementWise,
}

impl OpClass {
    pub const ALL: [OpClass; 3] = [
        OpClass::TensorContraction,
        OpClass::StatisticalNormalization,
        OpClass::ElementWise,
    ];
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpClass::TensorContraction => "TensorContraction",
            OpClass::StatisticalNormalization => "StatisticalNormalization",
            OpClass::ElementWise => "ElementWise",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("flop count of operator '{0}' overflows 64 bits")]
    Overflow(String),
    #[error("no analysis record for operator '{0}'")]
    MissingRecord(String),
    #[error("inconsistent measurement: {0}")]
    Domain(String),
    #[error("invalid device model: {0}")]
    InvalidDevice(String),
}

pub fn classify(g: &DataflowGraph, op: &OperatorNode) -> OpClass {
    if op.leaves().iter().any(|l| l.einsum.is_some()) {
        return OpClass::TensorContraction;
    }
    let s = g.iteration_space(op);
    if !s.reduction.is_empty() && s.special_independent.iter().all(Vec::is_empty) {
        OpClass::StatisticalNormalization
    } else {
        OpClass::ElementWise
    }
}

/// Per-point flop costs for non-contraction operators, keyed by kind and phase.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopDefaults {
    table: BTreeMap<(OpKind, Phase), Ratio<u64>>,
}

impl Default for FlopDefaults {
    fn default() -> Self {
        let mut table = BTreeMap::new();
        let all = [Phase::Forward, Phase::BackwardDx, Phase::BackwardDw];
        for p in all {
            table.insert((OpKind::Bias, p), Ratio::from_integer(1));
            table.insert((OpKind::Dropout, p), Ratio::from_integer(1));
            table.insert((OpKind::Residual, p), Ratio::from_integer(1));
            table.insert((OpKind::Relu, p), Ratio::from_integer(0));
            table.insert((OpKind::Scale, p), Ratio::from_integer(1));
            table.insert((OpKind::ReduceSum, p), Ratio::from_integer(1));
        }
        table.insert((OpKind::LayerNorm, Phase::Forward), Ratio::from_integer(7));
        table.insert((OpKind::LayerNorm, Phase::BackwardDx), Ratio::from_integer(9));
        table.insert((OpKind::LayerNorm, Phase::BackwardDw), Ratio::from_integer(4));
        table.insert((OpKind::Softmax, Phase::Forward), Ratio::from_integer(6));
        table.insert((OpKind::Softmax, Phase::BackwardDx), Ratio::from_integer(5));
        table.insert((OpKind::Softmax, Phase::BackwardDw), Ratio::from_integer(5));
        FlopDefaults { table }
    }
}

impl FlopDefaults {
    pub fn get(&self, kind: OpKind, phase: Phase) -> Ratio<u64> {
        self.table.get(&(kind, phase)).copied().unwrap_or(Ratio::from_integer(0))
    }

    pub fn set(&mut self, kind: OpKind, phase: Phase, value: Ratio<u64>) {
        self.table.insert((kind, phase), value);
    }
}

/// Loop points of a non-contraction operator, lanes included.
pub fn points(g: &DataflowGraph, op: &OperatorNode) -> u64 {
    g.loop_nest(op).iter().map(|d| g.extent(d)).product::<u64>() * op.lanes()
}

pub fn count_flop(g: &DataflowGraph, op: &OperatorNode, defaults: &FlopDefaults) -> Result<u64, AnalysisError> {
    let overflow = || AnalysisError::Overflow(op.id.clone());
    match op.op_kind {
        OpKind::Composite => op
            .members
            .iter()
            .try_fold(0u64, |acc, m| acc.checked_add(count_flop(g, m, defaults)?).ok_or_else(overflow)),
        OpKind::Contraction => {
            let mut total: u64 = 0;
            for t in &op.einsum.as_ref().unwrap().terms {
                let mut extent: BTreeMap<char, u64> = BTreeMap::new();
                for o in t.operands.iter().chain(std::iter::once(&t.output)) {
                    for (c, d) in o.indices.iter().zip(&g.tensor(&o.tensor).dims) {
                        extent.insert(*c, g.extent(d));
                    }
                }
                let mut f: u64 = 2;
                for e in extent.values() {
                    f = f.checked_mul(*e).ok_or_else(overflow)?;
                }
                total = total.checked_add(f).ok_or_else(overflow)?;
            }
            Ok(total)
        }
        _ => {
            let mut pts: u128 = op.lanes() as u128;
            for d in g.loop_nest(op) {
                pts = pts.checked_mul(g.extent(&d) as u128).ok_or_else(overflow)?;
            }
            let fpp = op.flop_per_point.unwrap_or_else(|| defaults.get(op.op_kind, op.phase));
            let num = pts.checked_mul(*fpp.numer() as u128).ok_or_else(overflow)?;
            let den = *fpp.denom() as u128;
            let f = (num + den / 2) / den;
            u64::try_from(f).map_err(|_| overflow())
        }
    }
}

/// (input words, output words) over distinct input and output tensors.
pub fn data_volume(g: &DataflowGraph, op: &OperatorNode) -> (u64, u64) {
    let i = op.inputs.iter().map(|t| g.numel(t)).sum();
    let o = op.outputs.iter().map(|t| g.numel(t)).sum();
    (i, o)
}

/// Dataset I/O lower bound: every external input read once, every external
/// output written once. For a composite the listed tensors are already the
/// external ones.
pub fn io_lower_bound(g: &DataflowGraph, op: &OperatorNode) -> u64 {
    let (i, o) = data_volume(g, op);
    i + o
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub op_id: String,
    pub class: OpClass,
    pub phase: Phase,
    pub flop: u64,
    pub input_words: u64,
    pub output_words: u64,
    pub io_lower_bound_words: u64,
    pub arithmetic_intensity: f64,
}

pub fn analyze_op(g: &DataflowGraph, op: &OperatorNode, defaults: &FlopDefaults) -> Result<AnalysisRecord, AnalysisError> {
    let flop = count_flop(g, op, defaults)?;
    let (input_words, output_words) = data_volume(g, op);
    let moved = input_words + output_words;
    Ok(AnalysisRecord {
        op_id: op.id.clone(),
        class: classify(g, op),
        phase: op.phase,
        flop,
        input_words,
        output_words,
        io_lower_bound_words: io_lower_bound(g, op),
        arithmetic_intensity: if moved > 0 { flop as f64 / moved as f64 } else { 0.0 },
    })
}

/// One record per operator, in the graph's operator order.
pub fn analyze(g: &DataflowGraph, defaults: &FlopDefaults) -> Result<Vec<AnalysisRecord>, AnalysisError> {
    g.operators.iter().map(|op| analyze_op(g, op, defaults)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub peak_contraction_flops: f64,
    pub peak_scalar_flops: f64,
    pub peak_bandwidth_bytes: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel {
            peak_contraction_flops: 125e12,
            peak_scalar_flops: 31.4e12,
            peak_bandwidth_bytes: 900e9,
        }
    }
}

impl DeviceModel {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (name, v) in [
            ("peak_contraction_flops", self.peak_contraction_flops),
            ("peak_scalar_flops", self.peak_scalar_flops),
            ("peak_bandwidth_bytes", self.peak_bandwidth_bytes),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(AnalysisError::InvalidDevice(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Memory usage efficiency Q/D · B/B̂ · 100.
pub fn mue(q_words: u64, d_words: u64, achieved_bw: f64, device: &DeviceModel) -> Result<f64, AnalysisError> {
    if q_words == 0 {
        return Err(AnalysisError::Domain("I/O lower bound must be positive".into()));
    }
    if d_words < q_words {
        return Err(AnalysisError::Domain(format!(
            "moved data {d_words} is below the I/O lower bound {q_words}"
        )));
    }
    if !(achieved_bw > 0.0 && achieved_bw <= device.peak_bandwidth_bytes) {
        return Err(AnalysisError::Domain(format!(
            "achieved bandwidth {achieved_bw} outside (0, {}]",
            device.peak_bandwidth_bytes
        )));
    }
    Ok(q_words as f64 / d_words as f64 * (achieved_bw / device.peak_bandwidth_bytes) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bottleneck {
    MemoryBound,
    ComputeBound,
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::MemoryBound => "memory-bound",
            Bottleneck::ComputeBound => "compute-bound",
        })
    }
}

pub fn bottleneck(mue_pct: f64, pct_of_peak_flops: f64) -> Bottleneck {
    if mue_pct > pct_of_peak_flops {
        Bottleneck::MemoryBound
    } else {
        Bottleneck::ComputeBound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: OpClass,
    pub operators: usize,
    pub flop: u64,
    pub flop_share_pct: f64,
    pub runtime_us: Option<f64>,
    pub runtime_share_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub rows: Vec<ClassRow>,
    pub total_flop: u64,
    pub total_runtime_us: Option<f64>,
}

impl ClassSummary {
    pub fn row(&self, class: OpClass) -> &ClassRow {
        self.rows.iter().find(|r| r.class == class).unwrap()
    }
}

/// Per-class flop totals and shares; runtime shares when every operator has a runtime.
pub fn aggregate_by_class(
    g: &DataflowGraph,
    records: &[AnalysisRecord],
    runtimes_us: Option<&BTreeMap<String, f64>>,
) -> Result<ClassSummary, AnalysisError> {
    let by_id: BTreeMap<&str, &AnalysisRecord> = records.iter().map(|r| (r.op_id.as_str(), r)).collect();
    let mut flop: BTreeMap<OpClass, (usize, u64, f64)> = OpClass::ALL.iter().map(|c| (*c, (0, 0, 0.0))).collect();
    for op in &g.operators {
        let r = by_id.get(op.id.as_str()).ok_or_else(|| AnalysisError::MissingRecord(op.id.clone()))?;
        let e = flop.get_mut(&r.class).unwrap();
        e.0 += 1;
        e.1 += r.flop;
        if let Some(rt) = runtimes_us {
            e.2 += *rt.get(&op.id).ok_or_else(|| AnalysisError::MissingRecord(op.id.clone()))?;
        }
    }
    let total_flop: u64 = flop.values().map(|v| v.1).sum();
    let total_rt: f64 = flop.values().map(|v| v.2).sum();
    let rows = OpClass::ALL
        .iter()
        .map(|c| {
            let (n, f, rt) = flop[c];
            ClassRow {
                class: *c,
                operators: n,
                flop: f,
                flop_share_pct: if total_flop > 0 { 100.0 * f as f64 / total_flop as f64 } else { 0.0 },
                runtime_us: runtimes_us.map(|_| rt),
                runtime_share_pct: runtimes_us.map(|_| if total_rt > 0.0 { 100.0 * rt / total_rt } else { 0.0 }),
            }
        })
        .collect();
    Ok(ClassSummary {
        rows,
        total_flop,
        total_runtime_us: runtimes_us.map(|_| total_rt),
    })
}

fn csv_string(build: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        build(&mut w).expect("in-memory csv write");
        w.flush().expect("in-memory csv flush");
    }
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Per-operator table followed by one footer row per class and a total row.
pub fn analysis_csv(records: &[AnalysisRecord]) -> String {
    csv_string(|w| {
        w.write_record(["op_id", "class", "phase", "gflop", "input_Me", "output_Me", "q_Me", "intensity"])?;
        let row = |w: &mut csv::Writer<&mut Vec<u8>>, id: &str, class: &str, phase: &str, f: u64, i: u64, o: u64, q: u64| {
            let ai = if i + o > 0 { f as f64 / (i + o) as f64 } else { 0.0 };
            w.write_record([
                id.to_string(),
                class.to_string(),
                phase.to_string(),
                format!("{:.3}", f as f64 / 1e9),
                format!("{:.2}", i as f64 / 1e6),
                format!("{:.2}", o as f64 / 1e6),
                format!("{:.2}", q as f64 / 1e6),
                format!("{ai:.3}"),
            ])
        };
        for r in records {
            row(
                w,
                &r.op_id,
                &r.class.to_string(),
                r.phase.name(),
                r.flop,
                r.input_words,
                r.output_words,
                r.io_lower_bound_words,
            )?;
        }
        let mut all = (0, 0, 0, 0);
        for c in OpClass::ALL {
            let mut t = (0, 0, 0, 0);
            for r in records.iter().filter(|r| r.class == c) {
                t.0 += r.flop;
                t.1 += r.input_words;
                t.2 += r.output_words;
                t.3 += r.io_lower_bound_words;
            }
            all = (all.0 + t.0, all.1 + t.1, all.2 + t.2, all.3 + t.3);
            row(w, &format!("total:{c}"), &c.to_string(), "", t.0, t.1, t.2, t.3)?;
        }
        row(w, "total", "", "", all.0, all.1, all.2, all.3)
    })
}

pub fn class_summary_csv(s: &ClassSummary) -> String {
    csv_string(|w| {
        w.write_record(["class", "operators", "gflop", "flop_share_pct", "runtime_us", "runtime_share_pct"])?;
        for r in &s.rows {
            w.write_record([
                r.class.to_string(),
                r.operators.to_string(),
                format!("{:.3}", r.flop as f64 / 1e9),
                format!("{:.2}", r.flop_share_pct),
                r.runtime_us.map(|v| format!("{v:.1}")).unwrap_or_default(),
                r.runtime_share_pct.map(|v| format!("{v:.2}")).unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mue_definitional_cases() {
        let d = DeviceModel::default();
        assert_eq!(mue(10, 10, d.peak_bandwidth_bytes, &d).unwrap(), 100.0);
        assert_eq!(mue(100, 200, 0.5 * d.peak_bandwidth_bytes, &d).unwrap(), 25.0);
        assert_eq!(mue(7, 14, d.peak_bandwidth_bytes, &d).unwrap(), 50.0);
    }

    #[test]
    fn mue_domain_errors() {
        let d = DeviceModel::default();
        assert!(mue(10, 5, d.peak_bandwidth_bytes, &d).is_err());
        assert!(mue(10, 10, 2.0 * d.peak_bandwidth_bytes, &d).is_err());
        assert!(mue(0, 10, d.peak_bandwidth_bytes, &d).is_err());
    }

    #[test]
    fn bottleneck_rule() {
        assert_eq!(bottleneck(78.0, 0.5), Bottleneck::MemoryBound);
        assert_eq!(bottleneck(12.0, 61.2), Bottleneck::ComputeBound);
        assert_eq!(bottleneck(50.0, 50.0), Bottleneck::ComputeBound);
    }
}
