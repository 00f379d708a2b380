//! Command implementations behind the `dmove` binary. Every command writes
//! its artifacts under one output directory together with `manifest.json`;
//! each artifact carries the manifest hash.

use dmove_core::analysis::{
    aggregate_by_class, analysis_csv, analyze, bottleneck, class_summary_csv, classify, data_volume, mue, Bottleneck,
    ClassSummary, DeviceModel, FlopDefaults, OpClass,
};
use dmove_core::costsel::{
    costs_csv, emit_configuration, ingest_costs, model_costs, select_global, CostModelOptions, CostSource, CostTable,
    pass_ops, primary_tensors, GlobalConfiguration, Pass, PassSelection, SelectionOptions,
};
use dmove_core::fusion::{
    algebraic_fuse_qkv, fuse_pass, fusion_report_csv, movement_reduction, FusedOperator, FusionError, MovementReduction,
    QkvVariant,
};
use dmove_core::graphir::{
    build_bert_encoder, default_dims, parse_graph_spec, to_graph_spec, toy_dims, DataflowGraph, DimTable, GraphError,
};
use dmove_core::layout::{
    config_distribution, configs_csv, distribution_csv, enumerate_configs, EnumerationMode, LayoutConfig, LayoutOptions,
};
use dmove_core::refexec::{grad_check, validate_fusion, ExecContext};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tolerances of the numerical checks.
pub const FUSION_TOLERANCE: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const LINEAR_GRAD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn stage(self, stage: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{stage}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{stage}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{stage}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn graph_err(e: GraphError) -> CliError {
    CliError::Validation(format!("{e} [{}]", e.code()))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation. The hash covers everything except the
/// outputs and the timestamp.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<FileDigest>,
    pub dims_overrides: BTreeMap<String, u64>,
    pub options: BTreeMap<String, String>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, timestamp: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            inputs: Vec::new(),
            dims_overrides: BTreeMap::new(),
            options: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            timestamp,
        }
    }

    pub fn hash(&self) -> String {
        let key = json!({
            "command": self.command,
            "inputs": self.inputs,
            "dims_overrides": self.dims_overrides,
            "options": self.options,
            "tool_version": self.tool_version,
        });
        sha256_hex(key.to_string().as_bytes())
    }
}

/// Output directory bound to a sealed manifest.
struct Artifacts {
    dir: PathBuf,
    manifest: RunManifest,
    hash: String,
}

impl Artifacts {
    fn open(dir: &Path, manifest: RunManifest) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let hash = manifest.hash();
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            manifest,
            hash,
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(body.as_bytes()),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = format!("# manifest {}\n{body}", self.hash);
        self.write(name, &text)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = format!("manifest: {}\n{body}", self.hash);
        self.write(name, &text)
    }

    fn json(&mut self, name: &str, mut value: Value) -> Result<(), CliError> {
        if let Value::Object(m) = &mut value {
            m.insert("manifest".into(), Value::String(self.hash.clone()));
        }
        let mut text = serde_json::to_string_pretty(&value).expect("json value serializes");
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(mut self) -> Result<String, CliError> {
        self.manifest.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut v = serde_json::to_value(&self.manifest).expect("manifest serializes");
        v["hash"] = Value::String(self.hash.clone());
        let mut text = serde_json::to_string_pretty(&v).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(self.hash)
    }
}

/// Where the graph comes from: the built-in BERT layer or a graph-spec file,
/// with `S=N` dimension overrides.
#[derive(Clone, Debug, Default)]
pub struct GraphSource {
    pub bert: bool,
    pub graph: Option<PathBuf>,
    pub dims: Vec<String>,
}

fn parse_overrides(items: &[String]) -> Result<BTreeMap<String, u64>, CliError> {
    let mut m = BTreeMap::new();
    for item in items {
        let (s, n) = item
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("dimension override '{item}' is not of the form S=N")))?;
        let n: u64 = n
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("dimension override '{item}' has a non-integer size")))?;
        m.insert(s.trim().to_string(), n);
    }
    Ok(m)
}

fn apply_overrides(mut dims: DimTable, overrides: &BTreeMap<String, u64>) -> Result<DimTable, CliError> {
    for (s, n) in overrides {
        if !dims.contains_key(s) {
            return Err(CliError::Validation(format!("dimension override for unknown symbol '{s}'")));
        }
        dims.insert(s.clone(), *n);
    }
    Ok(dims)
}

impl GraphSource {
    /// Load the graph, recording inputs and overrides in the manifest.
    /// `base_dims` replaces the BERT defaults (used by `validate`).
    fn load(&self, manifest: &mut RunManifest, base_dims: Option<DimTable>) -> Result<DataflowGraph, CliError> {
        let overrides = parse_overrides(&self.dims)?;
        manifest.dims_overrides = overrides.clone();
        match (&self.graph, self.bert) {
            (Some(_), true) => Err(CliError::Validation("--bert and --graph are mutually exclusive".into())),
            (None, false) => Err(CliError::Validation("one of --bert or --graph is required".into())),
            (None, true) => {
                let dims = apply_overrides(base_dims.unwrap_or_else(default_dims), &overrides)?;
                manifest.options.insert("graph".into(), "bert".into());
                build_bert_encoder(&dims).map_err(graph_err)
            }
            (Some(path), false) => {
                let bytes = read(path)?;
                manifest.inputs.push(FileDigest {
                    path: path.display().to_string(),
                    sha256: sha256_hex(&bytes),
                });
                let text = String::from_utf8(bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                let g = parse_graph_spec(&text).map_err(graph_err)?;
                if overrides.is_empty() {
                    return Ok(g);
                }
                let dims = apply_overrides(g.dims.clone(), &overrides)?;
                DataflowGraph::new(dims, g.tensors.values().cloned().collect(), g.operators.clone()).map_err(graph_err)
            }
        }
    }
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct CommonOptions {
    pub source: GraphSource,
    pub out: PathBuf,
    /// Seconds since the epoch recorded in the manifest.
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantChoice {
    Fixed(QkvVariant),
    Auto,
}

impl VariantChoice {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(VariantChoice::Auto)
        } else {
            QkvVariant::parse(s).map(VariantChoice::Fixed)
        }
    }

    fn name(self) -> &'static str {
        match self {
            VariantChoice::Auto => "auto",
            VariantChoice::Fixed(v) => v.name(),
        }
    }
}

/// Preference order for ties and for the cost-free default.
const VARIANT_PREFERENCE: [QkvVariant; 4] = [QkvVariant::Qkv, QkvVariant::Qk, QkvVariant::Kv, QkvVariant::Unfused];

/// Apply an algebraic-fusion variant. Graphs without attention projections
/// pass through unchanged.
fn apply_variant(g: &DataflowGraph, v: QkvVariant) -> Result<Option<DataflowGraph>, CliError> {
    match algebraic_fuse_qkv(g, v) {
        Ok(x) => Ok(Some(x)),
        Err(FusionError::PatternNotFound(_)) => Ok(None),
        Err(FusionError::StackRejected(m)) => Err(CliError::Validation(format!("variant {}: {m}", v.name()))),
        Err(e) => Err(invalid(e)),
    }
}

/// A variant after fusion, with its configurations.
struct Candidate {
    variant: Option<QkvVariant>,
    base: DataflowGraph,
    fused_graph: DataflowGraph,
    fused: Vec<FusedOperator>,
    configs: BTreeMap<String, Vec<LayoutConfig>>,
    modes: BTreeMap<String, EnumerationMode>,
}

fn fuse_candidate(g: &DataflowGraph, variant: Option<QkvVariant>) -> Result<Candidate, CliError> {
    let (fused_graph, fused) = fuse_pass(g).map_err(invalid)?;
    let (configs, modes) = enumerate_all(&fused_graph)?;
    Ok(Candidate {
        variant,
        base: g.clone(),
        fused_graph,
        fused,
        configs,
        modes,
    })
}

type ConfigSet = (BTreeMap<String, Vec<LayoutConfig>>, BTreeMap<String, EnumerationMode>);

fn enumerate_all(g: &DataflowGraph) -> Result<ConfigSet, CliError> {
    let opts = LayoutOptions::default();
    let mut configs = BTreeMap::new();
    let mut modes = BTreeMap::new();
    for op in &g.operators {
        let (c, m) = enumerate_configs(g, op, &opts).map_err(invalid)?;
        configs.insert(op.id.clone(), c);
        modes.insert(op.id.clone(), m);
    }
    Ok((configs, modes))
}

fn known_ids(configs: &BTreeMap<String, Vec<LayoutConfig>>) -> BTreeMap<String, BTreeSet<String>> {
    configs
        .iter()
        .map(|(op, cs)| (op.clone(), cs.iter().map(|c| c.config_id.clone()).collect()))
        .collect()
}

fn load_device(path: Option<&Path>, manifest: &mut RunManifest) -> Result<DeviceModel, CliError> {
    let Some(path) = path else {
        return Ok(DeviceModel::default());
    };
    let bytes = read(path)?;
    manifest.inputs.push(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    });
    let d: DeviceModel =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    d.validate().map_err(invalid)?;
    Ok(d)
}

fn load_costs_text(path: Option<&Path>, manifest: &mut RunManifest) -> Result<Option<String>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = read_text(path)?;
    manifest.inputs.push(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(text.as_bytes()),
    });
    Ok(Some(text))
}

/// Modeled costs for every configuration, replaced operator by operator by
/// ingested costs. With `required`, every operator needs an ingested cost.
fn combine_costs(
    g: &DataflowGraph,
    configs: &BTreeMap<String, Vec<LayoutConfig>>,
    device: &DeviceModel,
    ingested: Option<&CostTable>,
    required: bool,
) -> Result<CostTable, CliError> {
    let modeled = model_costs(g, configs, device, &CostModelOptions::default()).map_err(invalid)?;
    let Some(ing) = ingested else {
        if required {
            return Err(CliError::Validation("--costs-required given without --costs".into()));
        }
        return Ok(modeled);
    };
    let measured: BTreeSet<&str> = ing.ops();
    let mut t = CostTable::default();
    for op in &g.operators {
        if measured.contains(op.id.as_str()) {
            for r in ing.records.values().filter(|r| r.op_id == op.id) {
                t.insert(r.clone());
            }
        } else if required {
            return Err(CliError::Validation(format!("operator '{}' has no ingested cost", op.id)));
        } else {
            for r in modeled.records.values().filter(|r| r.op_id == op.id) {
                t.insert(r.clone());
            }
        }
    }
    Ok(t)
}

/// Parse `--input-layout A,B,C` and check it permutes the dims of the
/// forward pass's first primary input.
fn parse_input_layout(g: &DataflowGraph, spec: Option<&str>) -> Result<Option<Vec<String>>, CliError> {
    let Some(spec) = spec else { return Ok(None) };
    let layout: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).collect();
    let ops = pass_ops(g, Pass::Forward);
    let Some((first, _)) = primary_tensors(g, &ops).into_iter().next() else {
        return Err(CliError::Validation("--input-layout given but the graph has no forward pass".into()));
    };
    let mut want = g.tensor(&first).dims.clone();
    let mut got = layout.clone();
    want.sort();
    got.sort();
    if want != got {
        return Err(CliError::Validation(format!(
            "input layout '{spec}' is not a permutation of the dims of '{first}' ({})",
            g.tensor(&first).dims.join(",")
        )));
    }
    Ok(Some(layout))
}

fn select(
    g: &DataflowGraph,
    configs: &BTreeMap<String, Vec<LayoutConfig>>,
    costs: &CostTable,
    device: &DeviceModel,
    input_layout: Option<&[String]>,
) -> Result<(GlobalConfiguration, Vec<PassSelection>), CliError> {
    let opts = SelectionOptions {
        device: *device,
        input_layout: input_layout.map(<[String]>::to_vec),
        ..SelectionOptions::default()
    };
    select_global(g, configs, costs, &opts).map_err(invalid)
}

fn analysis_outputs(
    art: &mut Artifacts,
    g: &DataflowGraph,
) -> Result<ClassSummary, CliError> {
    let records = analyze(g, &FlopDefaults::default()).map_err(invalid)?;
    let summary = aggregate_by_class(g, &records, None).map_err(invalid)?;
    art.csv("analysis.csv", &analysis_csv(&records))?;
    art.csv("class_summary.csv", &class_summary_csv(&summary))?;
    Ok(summary)
}

fn class_lines(s: &ClassSummary) -> String {
    let mut out = format!("total {:.3} Gflop\n", s.total_flop as f64 / 1e9);
    for r in &s.rows {
        out.push_str(&format!(
            "{:<26} {:>3} ops {:>10.3} Gflop {:>6.2}%\n",
            r.class.to_string(),
            r.operators,
            r.flop as f64 / 1e9,
            r.flop_share_pct
        ));
    }
    out
}

fn movement_lines(m: &MovementReduction) -> String {
    format!(
        "movement reduction (non-contraction operators): {:.2}% ({} -> {} words)\n\
         movement reduction (whole graph): {:.2}% ({} -> {} words)\n",
        m.non_contraction_pct,
        m.non_contraction_unfused_words,
        m.non_contraction_fused_words,
        m.whole_graph_pct,
        m.unfused_words,
        m.fused_words
    )
}

fn kernel_names(fused: &[FusedOperator]) -> BTreeSet<String> {
    fused.iter().map(|f| f.kernel.clone()).collect()
}

fn movement_json(m: &MovementReduction) -> Value {
    json!({
        "unfused_words": m.unfused_words,
        "fused_words": m.fused_words,
        "whole_graph_pct": round(m.whole_graph_pct, 4),
        "non_contraction_unfused_words": m.non_contraction_unfused_words,
        "non_contraction_fused_words": m.non_contraction_fused_words,
        "non_contraction_pct": round(m.non_contraction_pct, 4),
    })
}

/// Fixed-precision number for reports.
fn round(x: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (x * p).round() / p
}

fn graph_json(g: &DataflowGraph) -> Value {
    serde_json::from_str(&to_graph_spec(g)).expect("graph spec is json")
}

/// `analyze`: per-operator table and class summary.
pub fn cmd_analyze(opts: &CommonOptions) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("analyze", opts.timestamp);
    let g = opts.source.load(&mut manifest, None)?;
    let mut art = Artifacts::open(&opts.out, manifest)?;
    let summary = analysis_outputs(&mut art, &g)?;
    let hash = art.finish()?;
    Ok(format!("{}manifest {hash}\n", class_lines(&summary)))
}

/// `fuse`: algebraic fusion variant, then the fusion pass.
pub fn cmd_fuse(opts: &CommonOptions, variant: VariantChoice) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("fuse", opts.timestamp);
    manifest.options.insert("variant".into(), variant.name().into());
    let g = opts.source.load(&mut manifest, None)?;
    let (base, chosen) = default_variant(&g, variant)?;
    let (fg, fused) = fuse_pass(&base).map_err(invalid)?;
    let m = movement_reduction(&base, &fused);
    let mut art = Artifacts::open(&opts.out, manifest)?;
    art.json("fused_graph.json", graph_json(&fg))?;
    art.csv("fusion.csv", &fusion_report_csv(&base, &fused))?;
    let summary = format!(
        "variant: {}\noperators: {} -> {}\nfused kernels: {} ({} distinct)\n{}",
        chosen.map_or("none", |v| v.name()),
        base.operators.len(),
        fg.operators.len(),
        fused.len(),
        kernel_names(&fused).len(),
        movement_lines(&m)
    );
    art.text("fusion_summary.txt", &summary)?;
    let hash = art.finish()?;
    Ok(format!("{summary}manifest {hash}\n"))
}

/// Fixed variant, or the first applicable one in preference order.
fn default_variant(g: &DataflowGraph, choice: VariantChoice) -> Result<(DataflowGraph, Option<QkvVariant>), CliError> {
    match choice {
        VariantChoice::Fixed(v) => Ok(match apply_variant(g, v)? {
            Some(x) => (x, Some(v)),
            None => (g.clone(), None),
        }),
        VariantChoice::Auto => {
            for v in VARIANT_PREFERENCE {
                match apply_variant(g, v) {
                    Ok(Some(x)) => return Ok((x, Some(v))),
                    Ok(None) => return Ok((g.clone(), None)),
                    Err(_) => continue,
                }
            }
            Err(CliError::Validation("no algebraic-fusion variant applies".into()))
        }
    }
}

/// `layouts`: configuration space and cost distribution of every operator
/// of the graph as given.
pub fn cmd_layouts(opts: &CommonOptions, costs: Option<&Path>, device: Option<&Path>) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("layouts", opts.timestamp);
    let g = opts.source.load(&mut manifest, None)?;
    let device = load_device(device, &mut manifest)?;
    let cost_text = load_costs_text(costs, &mut manifest)?;
    let (configs, modes) = enumerate_all(&g)?;
    let ingested = match &cost_text {
        Some(t) => Some(ingest_costs(t, Some(&known_ids(&configs))).map_err(invalid)?),
        None => None,
    };
    let table = combine_costs(&g, &configs, &device, ingested.as_ref(), false)?;
    let mut art = Artifacts::open(&opts.out, manifest)?;
    let mut rows = Vec::new();
    let mut summary = String::from("op_id,mode,configs\n");
    for op in &g.operators {
        let cfgs = &configs[&op.id];
        let per: BTreeMap<String, f64> = cfgs
            .iter()
            .filter_map(|c| table.get(&op.id, &c.config_id).map(|r| (c.config_id.clone(), r.runtime_us)))
            .collect();
        art.csv(&format!("configs/{}.csv", op.id), &configs_csv(cfgs, Some(&per)))?;
        let list: Vec<(String, f64)> = per.into_iter().collect();
        if let Ok(d) = config_distribution(&list, 20) {
            rows.push((op.id.clone(), d));
        }
        summary.push_str(&format!("{},{},{}\n", op.id, modes[&op.id].name(), cfgs.len()));
    }
    art.csv("layout_summary.csv", &summary)?;
    art.csv("layout_distribution.csv", &distribution_csv(&rows))?;
    let hash = art.finish()?;
    let total: usize = configs.values().map(Vec::len).sum();
    Ok(format!("{} operators, {total} configurations\nmanifest {hash}\n", g.operators.len()))
}

/// `select`: globally optimal configuration of the graph as given.
pub fn cmd_select(
    opts: &CommonOptions,
    costs: Option<&Path>,
    device: Option<&Path>,
    costs_required: bool,
    input_layout: Option<&str>,
) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("select", opts.timestamp);
    manifest.options.insert("costs_required".into(), costs_required.to_string());
    if let Some(l) = input_layout {
        manifest.options.insert("input_layout".into(), l.into());
    }
    let g = opts.source.load(&mut manifest, None)?;
    let pinned = parse_input_layout(&g, input_layout)?;
    let device = load_device(device, &mut manifest)?;
    let cost_text = load_costs_text(costs, &mut manifest)?;
    let (configs, _) = enumerate_all(&g)?;
    let ingested = match &cost_text {
        Some(t) => Some(ingest_costs(t, Some(&known_ids(&configs))).map_err(invalid)?),
        None => None,
    };
    let table = combine_costs(&g, &configs, &device, ingested.as_ref(), costs_required)?;
    let (gc, passes) = select(&g, &configs, &table, &device, pinned.as_deref())?;
    let mut art = Artifacts::open(&opts.out, manifest)?;
    art.json("configuration.json", serde_json::from_str(&emit_configuration(&gc)).expect("json"))?;
    let text = selection_lines(&gc, &passes);
    art.text("selection.txt", &text)?;
    let hash = art.finish()?;
    Ok(format!("{text}manifest {hash}\n"))
}

fn selection_lines(gc: &GlobalConfiguration, passes: &[PassSelection]) -> String {
    let mut s = String::new();
    for p in passes {
        s.push_str(&format!(
            "{} pass: {:.1} us over {} operators (per-operator minimum {:.1} us, gap {:.2}%, {} transposes)\n",
            p.pass.name(),
            p.total_us,
            p.choices.len(),
            p.lower_bound_us,
            p.gap_pct(),
            p.transposes.len()
        ));
    }
    s.push_str(&format!("predicted total: {:.1} us\n", gc.header.total_predicted_us));
    s
}

/// One numerical check and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub target: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Fusion equivalence, algebraic-variant equivalence and gradient checks on
/// the graph. Fails when an executor error occurs, not when a check misses
/// its tolerance.
pub fn numerical_checks(g: &DataflowGraph, trials: usize, samples: usize) -> Result<Vec<CheckResult>, CliError> {
    let ctx = ExecContext::default();
    let num = |e: dmove_core::refexec::ExecError| CliError::Numerical(e.to_string());
    let mut out = Vec::new();
    let (fg, _) = fuse_pass(g).map_err(invalid)?;
    out.push(CheckResult {
        check: "fusion".into(),
        target: "fuse_pass".into(),
        max_rel_error: validate_fusion(g, &fg, trials, &ctx).map_err(num)?,
        tolerance: FUSION_TOLERANCE,
    });
    for v in QkvVariant::ALL {
        let Some(x) = apply_variant(g, v).ok().flatten() else { continue };
        out.push(CheckResult {
            check: "algebraic".into(),
            target: v.name().into(),
            max_rel_error: validate_fusion(g, &x, trials, &ctx).map_err(num)?,
            tolerance: FUSION_TOLERANCE,
        });
    }
    for op in &g.operators {
        if op.grad.is_none() {
            continue;
        }
        let r = grad_check(g, &op.id, samples, &ctx).map_err(num)?;
        out.push(CheckResult {
            check: "gradient".into(),
            target: op.id.clone(),
            max_rel_error: r.max_rel_error,
            tolerance: if op.is_contraction() { LINEAR_GRAD_TOLERANCE } else { GRAD_TOLERANCE },
        });
    }
    Ok(out)
}

fn checks_csv(rows: &[CheckResult]) -> String {
    let mut s = String::from("check,target,max_rel_error,tolerance,pass\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3e},{:e},{}\n",
            r.check,
            r.target,
            r.max_rel_error,
            r.tolerance,
            r.passed()
        ));
    }
    s
}

/// `validate`: numerical checks with the reference executor. With `--bert`
/// the toy dimensions are the base.
pub fn cmd_validate(opts: &CommonOptions, trials: usize, samples: usize) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("validate", opts.timestamp);
    manifest.options.insert("trials".into(), trials.to_string());
    manifest.options.insert("samples".into(), samples.to_string());
    let g = opts.source.load(&mut manifest, Some(toy_dims()))?;
    let rows = numerical_checks(&g, trials, samples)?;
    let mut art = Artifacts::open(&opts.out, manifest)?;
    let body = checks_csv(&rows);
    art.csv("validation.csv", &body)?;
    art.finish()?;
    let failed: Vec<&CheckResult> = rows.iter().filter(|r| !r.passed()).collect();
    if let Some(f) = failed.first() {
        return Err(CliError::Numerical(format!(
            "{} of {} checks failed, first: {} {} error {:.3e} >= {:e}",
            failed.len(),
            rows.len(),
            f.check,
            f.target,
            f.max_rel_error,
            f.tolerance
        )));
    }
    Ok(format!("{} checks passed\n", rows.len()))
}

/// Per-operator line of the pipeline report.
#[derive(Clone, Debug, Serialize)]
pub struct KernelReport {
    pub op_id: String,
    pub kernel: String,
    pub class: String,
    pub phase: String,
    pub gflop: f64,
    pub q_words: u64,
    pub config_id: String,
    pub runtime_us: f64,
    pub source: String,
    pub pct_peak_flops: f64,
    pub mue: Option<f64>,
    pub bottleneck: String,
}

fn kernel_reports(
    g: &DataflowGraph,
    gc: &GlobalConfiguration,
    costs: &CostTable,
    device: &DeviceModel,
) -> Result<Vec<KernelReport>, CliError> {
    let mut out = Vec::new();
    for op in &g.operators {
        let Some(choice) = gc.operators.get(&op.id) else { continue };
        let class = classify(g, op);
        let flop = dmove_core::analysis::count_flop(g, op, &FlopDefaults::default()).map_err(invalid)?;
        let (i, o) = data_volume(g, op);
        let q = i + o;
        let bytes: f64 = op
            .inputs
            .iter()
            .chain(&op.outputs)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|t| g.numel(t) as f64 * g.tensor(t).element_bytes as f64)
            .sum();
        let secs = choice.runtime_us * 1e-6;
        let peak = if class == OpClass::TensorContraction {
            device.peak_contraction_flops
        } else {
            device.peak_scalar_flops
        };
        let pct = 100.0 * flop as f64 / secs / peak;
        let source = costs.get(&op.id, &choice.config_id).map_or(CostSource::Modeled, |r| r.source);
        // Moved data is taken at the lower bound, so MUE reduces to achieved over peak bandwidth.
        let m = mue(q, q, bytes / secs, device).ok();
        let label = match m {
            Some(m) => bottleneck(m, pct),
            None if bytes / device.peak_bandwidth_bytes > flop as f64 / peak => Bottleneck::MemoryBound,
            None => Bottleneck::ComputeBound,
        };
        out.push(KernelReport {
            op_id: op.id.clone(),
            kernel: op.kernel.clone().unwrap_or_else(|| op.id.clone()),
            class: class.to_string(),
            phase: op.phase.name().into(),
            gflop: round(flop as f64 / 1e9, 3),
            q_words: q,
            config_id: choice.config_id.clone(),
            runtime_us: round(choice.runtime_us, 3),
            source: match source {
                CostSource::Measured => "measured".into(),
                CostSource::Modeled => "modeled".into(),
            },
            pct_peak_flops: round(pct, 2),
            mue: if source == CostSource::Measured { m.map(|x| round(x, 2)) } else { None },
            bottleneck: label.to_string(),
        });
    }
    Ok(out)
}

/// Options of the full pipeline.
#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub common: CommonOptions,
    pub costs: Option<PathBuf>,
    pub device: Option<PathBuf>,
    pub variant: VariantChoice,
    pub costs_required: bool,
    /// Fixed layout of the encoder input, e.g. `B,J,I`.
    pub input_layout: Option<String>,
}

/// Outcome of evaluating one algebraic-fusion variant.
#[derive(Clone, Debug, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub predicted_us: Option<f64>,
    pub note: String,
}

/// `pipeline`: analyze, choose the algebraic-fusion variant, fuse,
/// enumerate layouts, cost and select.
pub fn cmd_pipeline(p: &PipelineOptions) -> Result<String, CliError> {
    let mut manifest = RunManifest::new("pipeline", p.common.timestamp);
    manifest.options.insert("variant".into(), p.variant.name().into());
    manifest.options.insert("costs_required".into(), p.costs_required.to_string());
    if let Some(l) = &p.input_layout {
        manifest.options.insert("input_layout".into(), l.clone());
    }
    let g = p.common.source.load(&mut manifest, None).map_err(|e| e.stage("load"))?;
    let pinned = parse_input_layout(&g, p.input_layout.as_deref()).map_err(|e| e.stage("load"))?;
    let device = load_device(p.device.as_deref(), &mut manifest).map_err(|e| e.stage("device"))?;
    let cost_text = load_costs_text(p.costs.as_deref(), &mut manifest).map_err(|e| e.stage("costs"))?;

    let wanted: Vec<QkvVariant> = match (p.variant, &cost_text) {
        (VariantChoice::Fixed(v), _) => vec![v],
        (VariantChoice::Auto, Some(_)) => VARIANT_PREFERENCE.to_vec(),
        (VariantChoice::Auto, None) => Vec::new(),
    };
    let mut outcomes = Vec::new();
    let mut candidates = Vec::new();
    if wanted.is_empty() {
        let (base, v) = default_variant(&g, VariantChoice::Auto).map_err(|e| e.stage("fuse"))?;
        candidates.push(fuse_candidate(&base, v).map_err(|e| e.stage("layouts"))?);
        outcomes.push(VariantOutcome {
            variant: v.map_or("none", |v| v.name()).into(),
            predicted_us: None,
            note: "default without costs".into(),
        });
    } else {
        for v in &wanted {
            match apply_variant(&g, *v) {
                Ok(Some(x)) => candidates.push(fuse_candidate(&x, Some(*v)).map_err(|e| e.stage("layouts"))?),
                Ok(None) => {
                    candidates.push(fuse_candidate(&g, None).map_err(|e| e.stage("layouts"))?);
                    break;
                }
                Err(e) if wanted.len() > 1 => outcomes.push(VariantOutcome {
                    variant: v.name().into(),
                    predicted_us: None,
                    note: e.to_string(),
                }),
                Err(e) => return Err(e.stage("fuse")),
            }
        }
    }
    if candidates.is_empty() {
        return Err(CliError::Validation("fuse: no algebraic-fusion variant applies".into()));
    }

    let ingested = match &cost_text {
        Some(t) => {
            let mut known: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for c in &candidates {
                for (op, ids) in known_ids(&c.configs) {
                    known.entry(op).or_default().extend(ids);
                }
            }
            Some(ingest_costs(t, Some(&known)).map_err(|e| invalid(e).stage("costs"))?)
        }
        None => None,
    };

    // Measured and modeled costs are not comparable: a variant whose every
    // operator is measured ranks ahead of one that falls back to the model.
    let measured_ops: BTreeSet<&str> = ingested.as_ref().map(|t| t.ops()).unwrap_or_default();
    let fully_measured =
        |c: &Candidate| ingested.is_some() && c.fused_graph.operators.iter().all(|o| measured_ops.contains(o.id.as_str()));
    let mut best: Option<(usize, GlobalConfiguration, Vec<PassSelection>, CostTable)> = None;
    let mut first_err = None;
    for (i, c) in candidates.iter().enumerate() {
        let table = match combine_costs(&c.fused_graph, &c.configs, &device, ingested.as_ref(), p.costs_required) {
            Ok(t) => t,
            Err(e) if candidates.len() > 1 => {
                outcomes.push(VariantOutcome {
                    variant: c.variant.map_or("none", |v| v.name()).into(),
                    predicted_us: None,
                    note: e.to_string(),
                });
                first_err.get_or_insert(e);
                continue;
            }
            Err(e) => return Err(e.stage("costs")),
        };
        let (gc, passes) = select(&c.fused_graph, &c.configs, &table, &device, pinned.as_deref()).map_err(|e| e.stage("select"))?;
        let measured = fully_measured(c);
        if cost_text.is_some() || wanted.len() == 1 {
            outcomes.push(VariantOutcome {
                variant: c.variant.map_or("none", |v| v.name()).into(),
                predicted_us: Some(round(gc.header.total_predicted_us, 3)),
                note: if ingested.is_some() && !measured { "partly modeled".into() } else { String::new() },
            });
        }
        // Candidates are in preference order, so only a strictly better rank wins.
        let better = best.as_ref().is_none_or(|b| {
            let held = fully_measured(&candidates[b.0]);
            (measured && !held) || (measured == held && gc.header.total_predicted_us < b.1.header.total_predicted_us)
        });
        if better {
            best = Some((i, gc, passes, table));
        }
    }
    let Some((idx, gc, passes, table)) = best else {
        return Err(first_err.expect("a candidate failed").stage("costs"));
    };
    let chosen = &candidates[idx];

    let mut art = Artifacts::open(&p.common.out, manifest)?;
    let summary = analysis_outputs(&mut art, &g)?;
    let m = movement_reduction(&chosen.base, &chosen.fused);
    art.json("fused_graph.json", graph_json(&chosen.fused_graph))?;
    art.csv("fusion.csv", &fusion_report_csv(&chosen.base, &chosen.fused))?;
    art.csv("costs.csv", &costs_csv(&table))?;
    let mut rows = Vec::new();
    let mut layout_summary = String::from("op_id,mode,configs\n");
    for op in &chosen.fused_graph.operators {
        let list: Vec<(String, f64)> = chosen.configs[&op.id]
            .iter()
            .filter_map(|c| table.get(&op.id, &c.config_id).map(|r| (c.config_id.clone(), r.runtime_us)))
            .collect();
        if let Ok(d) = config_distribution(&list, 20) {
            rows.push((op.id.clone(), d));
        }
        layout_summary.push_str(&format!(
            "{},{},{}\n",
            op.id,
            chosen.modes[&op.id].name(),
            chosen.configs[&op.id].len()
        ));
    }
    art.csv("layout_summary.csv", &layout_summary)?;
    art.csv("layout_distribution.csv", &distribution_csv(&rows))?;
    art.json("configuration.json", serde_json::from_str(&emit_configuration(&gc)).expect("json"))?;

    let kernels = kernel_reports(&chosen.fused_graph, &gc, &table, &device)?;
    let names = kernel_names(&chosen.fused);
    let variant_name = chosen.variant.map_or("none", |v| v.name());
    let report = json!({
        "variant": variant_name,
        "variants": outcomes,
        "operators": { "unfused": chosen.base.operators.len(), "fused": chosen.fused_graph.operators.len() },
        "fused_kernels": names,
        "movement_reduction": movement_json(&m),
        "class_summary": summary.rows.iter().map(|r| json!({
            "class": r.class.to_string(),
            "operators": r.operators,
            "gflop": round(r.flop as f64 / 1e9, 3),
            "flop_share_pct": round(r.flop_share_pct, 4),
        })).collect::<Vec<_>>(),
        "predicted_us": {
            "forward": round(gc.header.forward_us, 3),
            "backward": round(gc.header.backward_us, 3),
            "total": round(gc.header.total_predicted_us, 3),
            "per_operator_minimum": round(gc.header.lower_bound_us, 3),
        },
        "transposes": gc.transposes.len(),
        "kernels": kernels,
    });
    art.json("report.json", report)?;

    let mut text = format!("variant: {variant_name}\n");
    for o in &outcomes {
        match o.predicted_us {
            Some(t) => text.push_str(&(format!("  {:<8} {:>12.1} us  {}", o.variant, t, o.note).trim_end().to_string() + "\n")),
            None => text.push_str(&format!("  {:<8} {}\n", o.variant, o.note)),
        }
    }
    text.push_str(&class_lines(&summary));
    text.push_str(&format!(
        "operators: {} -> {}\nfused kernels: {} distinct: {}\n",
        chosen.base.operators.len(),
        chosen.fused_graph.operators.len(),
        names.len(),
        names.iter().cloned().collect::<Vec<_>>().join(" ")
    ));
    text.push_str(&movement_lines(&m));
    text.push_str(&selection_lines(&gc, &passes));
    text.push_str(&format!(
        "\n{:<20} {:<16} {:<12} {:>9} {:>11} {:>8} {:>8}  {}\n",
        "operator", "kernel", "phase", "Gflop", "runtime_us", "%peak", "MUE", "bottleneck"
    ));
    for k in &kernels {
        text.push_str(&format!(
            "{:<20} {:<16} {:<12} {:>9.3} {:>11.1} {:>8.2} {:>8}  {}\n",
            k.op_id,
            k.kernel,
            k.phase,
            k.gflop,
            k.runtime_us,
            k.pct_peak_flops,
            k.mue.map_or("-".to_string(), |x| format!("{x:.1}")),
            k.bottleneck
        ));
    }
    art.text("report.txt", &text)?;
    let hash = art.finish()?;
    Ok(format!("{text}manifest {hash}\n"))
}
