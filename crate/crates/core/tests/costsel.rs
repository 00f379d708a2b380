use dmove_core::analysis::DeviceModel;
use dmove_core::costsel::*;
use dmove_core::fusion::fuse_pass;
use dmove_core::graphir::*;
use dmove_core::layout::{enumerate_configs, LayoutConfig, LayoutOptions};
use itertools::Itertools;
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

fn fused_bert() -> DataflowGraph {
    fuse_pass(&build_bert_encoder(&default_dims()).unwrap()).unwrap().0
}

fn all_configs(g: &DataflowGraph) -> BTreeMap<String, Vec<LayoutConfig>> {
    g.operators
        .iter()
        .map(|op| (op.id.clone(), enumerate_configs(g, op, &LayoutOptions::default()).unwrap().0))
        .collect()
}

#[test]
fn ingest_keeps_the_minimum_per_configuration() {
    let text = "op_id,config_id,runtime_us,source\n# measured on one GPU\nx,00000,5.0,measured\nx,00000,3.5,measured\nx,*,9,modeled\n y , 00001 , 2 , modeled \n";
    let t = ingest_costs(text, None).unwrap();
    assert_eq!(t.get("x", "00000").unwrap().runtime_us, 3.5);
    assert_eq!(t.get("x", "00007").unwrap().runtime_us, 9.0);
    assert_eq!(t.get("y", "00001").unwrap().source, CostSource::Modeled);
    assert!(t.get("y", "00002").is_none());
    assert_eq!(t.ops(), ["x", "y"].into_iter().collect());
}

#[test]
fn ingest_rejects_bad_rows_with_line_numbers() {
    let head = "op_id,config_id,runtime_us,source\n";
    match ingest_costs(&format!("{head}x,0,1,measured\nx,1,0,measured\n"), None) {
        Err(CostError::NonPositive { line, value }) => assert_eq!((line, value), (3, 0.0)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(ingest_costs(&format!("{head}x,0,-2,measured\n"), None), Err(CostError::NonPositive { .. })));
    assert!(matches!(ingest_costs(&format!("{head}x,0,abc,measured\n"), None), Err(CostError::Parse { line: 2, .. })));
    assert!(matches!(ingest_costs(&format!("{head}x,0,1,guessed\n"), None), Err(CostError::Parse { .. })));
    let known: BTreeMap<String, BTreeSet<String>> = [("x".to_string(), ["0".to_string()].into_iter().collect())].into_iter().collect();
    match ingest_costs(&format!("{head}x,0,1,measured\nz,0,1,measured\n"), Some(&known)) {
        Err(CostError::UnknownOp { line, op }) => assert_eq!((line, op.as_str()), (3, "z")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        ingest_costs(&format!("{head}x,9,1,measured\n"), Some(&known)),
        Err(CostError::UnknownConfig { .. })
    ));
    assert!(ingest_costs(&format!("{head}x,*,1,measured\n"), Some(&known)).is_ok());
}

#[test]
fn cost_csv_round_trips() {
    let text = "op_id,config_id,runtime_us,source\na,00001,2.5,measured\nb,*,7,modeled\n";
    let t = ingest_costs(text, None).unwrap();
    assert_eq!(ingest_costs(&costs_csv(&t), None).unwrap(), t);
}

#[test]
fn roofline_examples() {
    let dev = DeviceModel::default();
    // Unary element-wise op over 8*512*1024 half-precision values.
    let n = 8.0 * 512.0 * 1024.0;
    let us = roofline_us(n as u64, 2.0 * n * 2.0, dev.peak_scalar_flops, &dev);
    assert!((us - 18.64).abs() < 0.01, "{us}");
    assert_eq!(roofline_us(0, 0.0, 1.0, &dev), 0.0);

    let g = build_bert_encoder(&default_dims()).unwrap();
    let qkv = roofline_cost(&g, g.op("fwd_qkv").unwrap(), None, &dev, &CostModelOptions::default()).unwrap();
    let flop = 2.0 * 8.0 * 512.0 * 1024.0 * 3.0 * 1024.0;
    assert!((qkv - flop / 125e12 * 1e6).abs() < 1e-9);
    assert!((qkv - 206.2).abs() < 0.1, "{qkv}");
}

#[test]
fn misaligned_tensors_pay_the_penalty() {
    let g = fused_bert();
    let op = g.op("BEI").unwrap();
    let (cfgs, _) = enumerate_configs(&g, op, &LayoutOptions::default()).unwrap();
    let dev = DeviceModel::default();
    let opts = CostModelOptions::default();
    let base = roofline_cost(&g, op, None, &dev, &opts).unwrap();
    let costs: Vec<f64> = cfgs.iter().map(|c| roofline_cost(&g, op, Some(c), &dev, &opts).unwrap()).collect();
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((min - base).abs() < 1e-9);
    for (c, got) in cfgs.iter().zip(&costs) {
        let v = &c.knobs["vector_dim"];
        let bytes: f64 = c
            .tensor_layouts
            .iter()
            .map(|(t, l)| g.numel(t) as f64 * 2.0 * if l.last() == Some(v) { 1.0 } else { 1.5 })
            .sum();
        assert!((got / (bytes / dev.peak_bandwidth_bytes * 1e6) - 1.0).abs() < 1e-12, "{}", c.config_id);
        assert!(*got >= base);
    }
    assert!(costs.iter().any(|c| *c > base));
}

#[test]
fn transpose_reads_and_writes_once() {
    let g = build_bert_encoder(&default_dims()).unwrap();
    let dev = DeviceModel::default();
    let words = 8.0 * 512.0 * 1024.0;
    assert!((transpose_cost(&g, "x", &dev) - 2.0 * words * 2.0 / 900e9 * 1e6).abs() < 1e-9);
}

proptest! {
    #[test]
    fn roofline_is_monotone(f in 0u64..1u64 << 40, df in 0u64..1u64 << 30, b in 0.0f64..1e10, db in 0.0f64..1e9) {
        let dev = DeviceModel::default();
        let base = roofline_us(f, b, dev.peak_scalar_flops, &dev);
        prop_assert!(roofline_us(f + df, b, dev.peak_scalar_flops, &dev) >= base);
        prop_assert!(roofline_us(f, b + db, dev.peak_scalar_flops, &dev) >= base);
        prop_assert!(base >= 0.0);
    }
}

const PERMS: [[&str; 3]; 6] = [["A", "B", "C"], ["A", "C", "B"], ["B", "A", "C"], ["B", "C", "A"], ["C", "A", "B"], ["C", "B", "A"]];

/// A random pass: ops over rank-3 tensors, each op with up to four
/// configurations drawn from a per-op pool of layouts, and random costs.
#[derive(Clone, Debug)]
struct Case {
    g: DataflowGraph,
    configs: BTreeMap<String, Vec<LayoutConfig>>,
    costs: CostTable,
}

fn build_case(ops: &[(usize, usize, bool)], cfgs: &[Vec<(usize, usize, u32)>]) -> Case {
    let dims: DimTable = [("A", 2), ("B", 3), ("C", 4)].iter().map(|(s, n)| (s.to_string(), *n)).collect();
    let t = |id: &str, kind| TensorDesc {
        id: id.into(),
        dims: vec!["A".into(), "B".into(), "C".into()],
        element_bytes: 2,
        kind,
    };
    let mut tensors = vec![t("x", TensorKind::Input)];
    let mut produced = vec!["x".to_string()];
    let mut nodes = Vec::new();
    for (i, (src, other, join)) in ops.iter().enumerate() {
        let a = produced[src % produced.len()].clone();
        let b = produced[other % produced.len()].clone();
        let out = format!("t{i}");
        tensors.push(t(&out, TensorKind::Activation));
        let op = if *join && a != b {
            OperatorNode::new(&format!("op{i}"), OpKind::Residual, Phase::Forward, &[&a, &b], &[&out])
        } else {
            OperatorNode::new(&format!("op{i}"), OpKind::Relu, Phase::Forward, &[&a], &[&out])
        };
        nodes.push(op);
        produced.push(out);
    }
    let g = DataflowGraph::new(dims, tensors, nodes).unwrap();
    let mut configs = BTreeMap::new();
    let mut costs = CostTable::default();
    for (op, list) in g.operators.iter().zip(cfgs) {
        let mut v = Vec::new();
        for (j, (pin, pout, cost)) in list.iter().enumerate() {
            let mut layouts = BTreeMap::new();
            for (k, tid) in op.inputs.iter().enumerate() {
                let p = if k == 0 { *pin } else { (*pin + k) % 4 };
                layouts.insert(tid.clone(), PERMS[p].iter().map(|s| s.to_string()).collect());
            }
            layouts.insert(op.outputs[0].clone(), PERMS[*pout].iter().map(|s| s.to_string()).collect());
            let id = format!("{j:05}");
            v.push(LayoutConfig {
                op_id: op.id.clone(),
                config_id: id.clone(),
                tensor_layouts: layouts,
                knobs: BTreeMap::new(),
            });
            costs.insert(CostRecord {
                op_id: op.id.clone(),
                config_id: id,
                runtime_us: *cost as f64 / 8.0,
                source: CostSource::Measured,
            });
        }
        configs.insert(op.id.clone(), v);
    }
    Case { g, configs, costs }
}

fn arb_case() -> impl Strategy<Value = Case> {
    (1usize..=6)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0usize..8, 0usize..8, any::<bool>()), n),
                // Layout indices below 4 keep at most four layouts per tensor.
                prop::collection::vec(prop::collection::vec((0usize..4, 0usize..4, 1u32..400), 1..=4), n),
            )
        })
        .prop_map(|(ops, cfgs)| build_case(&ops, &cfgs))
}

/// Enumerate every assignment of one configuration per operator and price
/// it directly: operator costs plus a transpose whenever the layout of a
/// handed-over tensor changes.
fn brute_force(case: &Case, opts: &SelectionOptions) -> Option<(f64, Vec<String>)> {
    let ops = pass_ops(&case.g, Pass::Forward);
    let primary = primary_tensors(&case.g, &ops);
    let layout = |c: &LayoutConfig, t: &str| c.tensor_layouts.get(t).cloned().unwrap_or_else(|| case.g.tensor(t).dims.clone());
    let lists: Vec<&Vec<LayoutConfig>> = ops.iter().map(|o| &case.configs[&o.id]).collect();
    let mut best: Option<(f64, Vec<String>)> = None;
    for combo in lists.iter().map(|l| l.iter()).multi_cartesian_product() {
        let mut total = 0.0;
        let mut feasible = true;
        for (i, c) in combo.iter().enumerate() {
            if i == 0 {
                if let Some(l) = &opts.input_layout {
                    feasible &= layout(c, &primary[0].0) == *l;
                }
            } else if primary[i - 1].1 == primary[i].0 && layout(combo[i - 1], &primary[i - 1].1) != layout(c, &primary[i].0) {
                if opts.allow_transposes {
                    total += transpose_cost(&case.g, &primary[i].0, &opts.device);
                } else {
                    feasible = false;
                }
            }
            total += case.costs.get(&c.op_id, &c.config_id).unwrap().runtime_us;
        }
        if !feasible {
            continue;
        }
        let ids: Vec<String> = combo.iter().map(|c| c.config_id.clone()).collect();
        let better = match &best {
            None => true,
            Some((d, k)) => total < *d || (total == *d && ids < *k),
        };
        if better {
            best = Some((total, ids));
        }
    }
    best
}

fn solve(case: &Case, opts: &SelectionOptions) -> Result<PassSelection, CostError> {
    let sg = build_selection_graph(&case.g, &case.configs, &case.costs, Pass::Forward, opts)?;
    select_configuration(&sg, &case.costs)
}

fn check_against_brute_force(case: &Case, opts: &SelectionOptions) {
    let oracle = brute_force(case, opts);
    match (solve(case, opts), oracle) {
        (Ok(sel), Some((total, ids))) => {
            assert_eq!(sel.total_us, total);
            assert_eq!(sel.choices.iter().map(|c| c.1.clone()).collect::<Vec<_>>(), ids);
            assert!(sel.total_us >= sel.lower_bound_us - 1e-9);
            let chosen: Vec<String> = sel.choices.iter().map(|c| c.1.clone()).collect();
            let price = brute_cost(case, opts, &chosen).unwrap();
            assert_eq!(price, total);
        }
        (Err(CostError::Unreachable), None) => {}
        (got, want) => panic!("{got:?} vs {want:?}"),
    }
}

/// Price of a given configuration sequence under the brute-force rules.
fn brute_cost(case: &Case, opts: &SelectionOptions, ids: &[String]) -> Option<f64> {
    let ops = pass_ops(&case.g, Pass::Forward);
    let primary = primary_tensors(&case.g, &ops);
    let cfg = |i: usize| case.configs[&ops[i].id].iter().find(|c| c.config_id == ids[i]).unwrap();
    let layout = |c: &LayoutConfig, t: &str| c.tensor_layouts.get(t).cloned().unwrap_or_else(|| case.g.tensor(t).dims.clone());
    let mut total = 0.0;
    for i in 0..ops.len() {
        if i > 0 && primary[i - 1].1 == primary[i].0 && layout(cfg(i - 1), &primary[i - 1].1) != layout(cfg(i), &primary[i].0) {
            if !opts.allow_transposes {
                return None;
            }
            total += transpose_cost(&case.g, &primary[i].0, &opts.device);
        }
        total += case.costs.get(&ops[i].id, &ids[i]).unwrap().runtime_us;
    }
    Some(total)
}

#[test]
fn shortest_path_matches_brute_force_on_random_dags() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 150,
        ..ProptestConfig::default()
    });
    let strict = SelectionOptions {
        allow_transposes: false,
        ..SelectionOptions::default()
    };
    let pinned = SelectionOptions {
        input_layout: Some(vec!["A".into(), "B".into(), "C".into()]),
        ..SelectionOptions::default()
    };
    runner
        .run(&arb_case(), |case| {
            check_against_brute_force(&case, &SelectionOptions::default());
            check_against_brute_force(&case, &strict);
            check_against_brute_force(&case, &pinned);
            Ok(())
        })
        .unwrap();
}

#[test]
fn incompatible_minima_force_a_tradeoff() {
    // op0 is cheapest writing layout 1, op1 is cheapest reading layout 0,
    // op2 is cheapest reading layout 2. Without transposes the path cannot
    // take every per-op minimum.
    let case = build_case(
        &[(0, 0, false), (1, 1, false), (2, 2, false)],
        &[
            vec![(0, 1, 8), (0, 0, 80)],
            vec![(0, 2, 8), (1, 2, 40), (1, 1, 48)],
            vec![(2, 0, 8), (1, 0, 16)],
        ],
    );
    let strict = SelectionOptions {
        allow_transposes: false,
        ..SelectionOptions::default()
    };
    let sel = solve(&case, &strict).unwrap();
    assert_eq!(sel.lower_bound_us, 3.0);
    // Options: 80+8+8 = 96, or 8+40+8 = 56, or 8+48+16 = 72 (eighths).
    assert_eq!(sel.total_us, 7.0);
    assert_eq!(sel.choices.iter().map(|c| c.1.as_str()).collect::<Vec<_>>(), vec!["00000", "00001", "00000"]);
    assert!(sel.transposes.is_empty());
    assert!(sel.gap_pct() > 0.0);
    check_against_brute_force(&case, &strict);
}

#[test]
fn cheap_transposes_are_taken() {
    let case = build_case(&[(0, 0, false), (1, 1, false)], &[vec![(0, 1, 8)], vec![(0, 0, 8), (1, 0, 8000)]]);
    let sel = solve(&case, &SelectionOptions::default()).unwrap();
    assert_eq!(sel.transposes.len(), 1);
    let t = &sel.transposes[0];
    assert_eq!((t.tensor.as_str(), t.before_op.as_str()), ("t0", "op1"));
    assert_eq!((t.from_layout.as_str(), t.to_layout.as_str()), ("ACB", "ABC"));
    assert_eq!(sel.total_us, 2.0 + transpose_cost(&case.g, "t0", &DeviceModel::default()));
}

#[test]
fn uncosted_operator_is_reported() {
    let mut case = build_case(&[(0, 0, false), (1, 1, false)], &[vec![(0, 0, 8)], vec![(0, 0, 8)]]);
    case.costs.records.retain(|k, _| k.0 != "op1");
    match build_selection_graph(&case.g, &case.configs, &case.costs, Pass::Forward, &SelectionOptions::default()) {
        Err(CostError::NoCostedConfig(op)) => assert_eq!(op, "op1"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn operator_edges_carry_the_minimum_matching_cost() {
    let g = fused_bert();
    let configs = all_configs(&g);
    let costs = model_costs(&g, &configs, &DeviceModel::default(), &CostModelOptions::default()).unwrap();
    for pass in [Pass::Forward, Pass::Backward] {
        let sg = build_selection_graph(&g, &configs, &costs, pass, &SelectionOptions::default()).unwrap();
        for e in &sg.edges {
            let EdgeKind::Operator { op_id, config_id } = &e.kind else { continue };
            let step = sg.ops.iter().position(|o| o == op_id).unwrap();
            let (pin, pout) = &sg.primary[step];
            let (Node::Boundary { layout: lin, .. }, Node::Boundary { layout: lout, .. }) = (&sg.nodes[e.from], &sg.nodes[e.to]) else {
                panic!("operator edge between non-boundary nodes");
            };
            let matching: Vec<(f64, &String)> = configs[op_id]
                .iter()
                .filter(|c| {
                    let l = |t: &String| c.tensor_layouts.get(t).cloned().unwrap_or_else(|| g.tensor(t).dims.clone());
                    l(pin) == *lin && l(pout) == *lout
                })
                .map(|c| (costs.get(op_id, &c.config_id).unwrap().runtime_us, &c.config_id))
                .collect();
            let min = matching.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
            assert_eq!(e.weight, min, "{op_id}");
            let first = matching.iter().filter(|m| m.0 == min).map(|m| m.1).min().unwrap();
            assert_eq!(config_id, first);
        }
    }
}

#[test]
fn bert_global_configuration() {
    let g = fused_bert();
    let configs = all_configs(&g);
    let dev = DeviceModel::default();
    let costs = model_costs(&g, &configs, &dev, &CostModelOptions::default()).unwrap();
    let (gc, passes) = select_global(&g, &configs, &costs, &SelectionOptions::default()).unwrap();
    let ids: BTreeSet<&String> = g.operators.iter().map(|o| &o.id).collect();
    assert_eq!(gc.operators.keys().collect::<BTreeSet<_>>(), ids);
    assert_eq!(passes.len(), 2);
    assert_eq!(gc.header.total_predicted_us, gc.header.forward_us + gc.header.backward_us);
    assert!(gc.header.total_predicted_us >= gc.header.lower_bound_us - 1e-9);
    // Per-op minima under the roofline model.
    let unconstrained: f64 = g
        .operators
        .iter()
        .map(|o| configs[&o.id].iter().map(|c| costs.get(&o.id, &c.config_id).unwrap().runtime_us).fold(f64::INFINITY, f64::min))
        .sum();
    assert!((gc.header.lower_bound_us - unconstrained).abs() < 1e-6);
    for (op, chosen) in &gc.operators {
        let cfg = configs[op].iter().find(|c| c.config_id == chosen.config_id).unwrap();
        assert_eq!(chosen.knobs, cfg.knobs);
        assert_eq!(chosen.runtime_us, costs.get(op, &chosen.config_id).unwrap().runtime_us);
    }
    let text = emit_configuration(&gc);
    assert_eq!(parse_configuration(&text).unwrap(), gc);
    assert_eq!(emit_configuration(&parse_configuration(&text).unwrap()), text);
}

#[test]
fn empty_configuration_round_trips() {
    let gc = GlobalConfiguration::empty(DeviceModel::default());
    assert_eq!(parse_configuration(&emit_configuration(&gc)).unwrap(), gc);
    assert!(matches!(parse_configuration("{"), Err(CostError::Config(_))));
    let dims: DimTable = BTreeMap::new();
    let g = DataflowGraph::new(dims, Vec::new(), Vec::new()).unwrap();
    let (gc2, passes) = select_global(&g, &BTreeMap::new(), &CostTable::default(), &SelectionOptions::default()).unwrap();
    assert!(passes.is_empty());
    assert_eq!(gc2, gc);
}
