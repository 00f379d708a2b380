use dmove_core::fusion::fuse_pass;
use dmove_core::graphir::*;
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

mod common;

fn bert() -> DataflowGraph {
    build_bert_encoder(&default_dims()).unwrap()
}

#[test]
fn bert_has_one_operator_per_table_row() {
    let g = bert();
    let rows = common::reference_ops();
    assert_eq!(g.operators.len(), 46);
    let fwd = g.operators.iter().filter(|o| o.phase == Phase::Forward).count();
    assert_eq!(fwd, 19);
    assert_eq!(g.operators.len() - fwd, 27);
    let ids: Vec<&str> = g.operators.iter().map(|o| o.id.as_str()).collect();
    let expected: Vec<&str> = rows.iter().map(|r| r.op_id.as_str()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn mha_flags_cover_attention_rows() {
    let g = bert();
    let mha: Vec<&str> = g.operators.iter().filter(|o| o.mha).map(|o| o.id.as_str()).collect();
    for id in ["fwd_qkv", "fwd_in_bias", "fwd_qkt", "fwd_softmax", "fwd_gamma", "fwd_out", "grad_qkv_dx", "grad_softmax_dx"] {
        assert!(mha.contains(&id), "{id} not flagged");
    }
    for id in ["fwd_linear1", "fwd_relu", "fwd_ln2", "grad_linear1_dw"] {
        assert!(!mha.contains(&id), "{id} flagged");
    }
}

#[test]
fn qkv_projection_contracts_over_i() {
    let g = bert();
    let op = g.op("fwd_qkv").unwrap();
    assert_eq!(op.op_kind, OpKind::Contraction);
    let space = g.iteration_space(op);
    assert!(space.reduction.contains(&"I".to_string()));
    let mut seen = std::collections::BTreeSet::new();
    let input_elems: u64 = op.inputs.iter().filter(|t| seen.insert(t.as_str())).map(|t| g.numel(t)).sum();
    // X plus three stacked I·P·H weights.
    assert_eq!(input_elems, 8 * 512 * 1024 + 3 * 1024 * 64 * 16);
    assert_eq!((input_elems as f64 / 1e6 * 100.0).round() / 100.0, 7.34);
}

#[test]
fn iteration_space_groups_are_disjoint() {
    let g = bert();
    for op in g.operators.iter().flat_map(|o| o.leaves()) {
        let s = g.iteration_space(op);
        let mut all: Vec<&String> = s.independent.iter().chain(&s.reduction).collect();
        all.extend(s.special_independent.iter().flatten());
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "{}", op.id);
        if op.is_contraction() {
            assert!(!s.reduction.is_empty(), "{}", op.id);
        }
        if matches!(op.op_kind, OpKind::Bias | OpKind::Dropout | OpKind::Relu | OpKind::Scale) && op.phase == Phase::Forward {
            assert!(s.reduction.is_empty(), "{}", op.id);
            assert!(s.special_independent.iter().all(Vec::is_empty), "{}", op.id);
        }
    }
}

#[test]
fn forward_precedes_backward_in_topological_order() {
    let g = bert();
    let order = g.topological_order().unwrap();
    let phases: Vec<bool> = order.iter().map(|id| g.op(id).unwrap().phase.is_backward()).collect();
    let first_bwd = phases.iter().position(|b| *b).unwrap();
    assert!(phases[first_bwd..].iter().all(|b| *b));
    let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    for e in &g.edges {
        assert!(pos[e.producer.as_str()] < pos[e.consumer.as_str()]);
    }
}

#[test]
fn edges_match_operator_interfaces() {
    let g = bert();
    for e in &g.edges {
        assert!(g.op(&e.producer).unwrap().outputs.contains(&e.tensor));
        assert!(g.op(&e.consumer).unwrap().inputs.contains(&e.tensor));
    }
}

#[test]
fn missing_dimension_is_reported() {
    let mut dims = default_dims();
    dims.remove("U");
    assert_eq!(build_bert_encoder(&dims).unwrap_err(), GraphError::MissingDim("U".into()));
}

#[test]
fn single_head_degenerate_shape_validates() {
    let mut dims = default_dims();
    dims.insert("H".into(), 1);
    dims.insert("P".into(), 1024);
    dims.insert("W".into(), 1024);
    let g = build_bert_encoder(&dims).unwrap();
    assert_eq!(g.operators.len(), 46);
}

#[test]
fn dims_supply_order_is_irrelevant() {
    let mut forward: DimTable = BTreeMap::new();
    for (s, n) in default_dims() {
        forward.insert(s, n);
    }
    let mut reversed: DimTable = BTreeMap::new();
    for (s, n) in default_dims().into_iter().rev() {
        reversed.insert(s, n);
    }
    assert_eq!(build_bert_encoder(&forward).unwrap(), build_bert_encoder(&reversed).unwrap());
}

#[test]
fn shipped_spec_equals_builder() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/bert_encoder.json");
    let built = bert();
    if std::env::var_os("DMOVE_REGENERATE").is_some() {
        std::fs::write(&path, to_graph_spec(&built)).unwrap();
    }
    let shipped = parse_graph_spec(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(shipped, built);
}

#[test]
fn bert_round_trips_through_spec() {
    let g = bert();
    assert_eq!(parse_graph_spec(&to_graph_spec(&g)).unwrap(), g);
    let (fg, _) = fuse_pass(&g).unwrap();
    assert_eq!(parse_graph_spec(&to_graph_spec(&fg)).unwrap(), fg);
}

#[test]
fn manifest_key_is_accepted() {
    let g = build_bert_encoder(&toy_dims()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&to_graph_spec(&g)).unwrap();
    v["manifest"] = serde_json::Value::String("abc".into());
    assert_eq!(parse_graph_spec(&v.to_string()).unwrap(), g);
}

#[test]
fn encoder_decoder_mha_validates() {
    let g = build_mha(&default_dims(), Attention::EncoderDecoder).unwrap();
    assert!(g.tensors.contains_key("mem"));
    assert!(g.operators.iter().all(|o| o.phase == Phase::Forward));
}

const KINDS: [OpKind; 3] = [OpKind::Dropout, OpKind::Relu, OpKind::Scale];

/// Random layered DAG of element-wise operators over one shape.
fn arb_graph() -> impl Strategy<Value = DataflowGraph> {
    (1u64..6, 1u64..6, prop::collection::vec((0usize..3, 0usize..16, any::<bool>()), 1..10)).prop_map(|(n, m, spec)| {
        let dims: DimTable = [("N".to_string(), n), ("M".to_string(), m)].into_iter().collect();
        let t = |id: &str, kind| TensorDesc {
            id: id.to_string(),
            dims: vec!["N".into(), "M".into()],
            element_bytes: 2,
            kind,
        };
        let mut tensors = vec![t("x", TensorKind::Input)];
        let mut produced = vec!["x".to_string()];
        let mut ops = Vec::new();
        for (i, (k, src, wide)) in spec.into_iter().enumerate() {
            let a = produced[src % produced.len()].clone();
            let out = format!("t{i}");
            let b = produced[(src + 1) % produced.len()].clone();
            let (kind, inputs) = if wide && b != a { (OpKind::Residual, vec![a, b]) } else { (KINDS[k], vec![a]) };
            let mut outputs = vec![out.clone()];
            if kind == OpKind::Dropout {
                let mask = format!("mask{i}");
                tensors.push(t(&mask, TensorKind::Activation));
                outputs.push(mask);
            }
            tensors.push(t(&out, TensorKind::Activation));
            let ins: Vec<&str> = inputs.iter().map(String::as_str).collect();
            let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            let mut op = OperatorNode::new(&format!("op{i}"), kind, Phase::Forward, &ins, &outs);
            if kind == OpKind::Scale {
                op.factor = Some(0.5);
            }
            ops.push(op);
            produced.push(out);
        }
        DataflowGraph::new(dims, tensors, ops).unwrap()
    })
}

proptest! {
    #[test]
    fn spec_round_trip(g in arb_graph()) {
        let text = to_graph_spec(&g);
        let again = parse_graph_spec(&text).unwrap();
        prop_assert_eq!(&again, &g);
        prop_assert_eq!(to_graph_spec(&again), text);
    }

    #[test]
    fn topological_order_respects_edges(g in arb_graph()) {
        let order = g.topological_order().unwrap();
        prop_assert_eq!(order.len(), g.operators.len());
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        for e in &g.edges {
            prop_assert!(pos[e.producer.as_str()] < pos[e.consumer.as_str()]);
        }
        for t in g.tensors.keys() {
            let produced = g.producer_of(t).is_some();
            prop_assert!(produced || g.graph_inputs().contains(t));
        }
    }
}
