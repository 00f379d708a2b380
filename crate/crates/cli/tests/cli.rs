use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmove(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmove"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn analyze_writes_tables_with_manifest_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = dmove(&["analyze", "--bert", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["hash"].as_str().unwrap();
    let csv = fs::read_to_string(tmp.path().join("analysis.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# manifest {hash}"));
    assert!(csv.contains("fwd_qkv"));
    assert_eq!(manifest["timestamp"], 1700000000);
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(outputs, vec!["analysis.csv", "class_summary.csv"]);
}

#[test]
fn dimension_overrides_are_applied_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = dmove(&["analyze", "--bert", "--dim", "B=96", "--dim", "J=128", "--dim", "K=128", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dims_overrides"]["B"], 96);
    assert_eq!(manifest["dims_overrides"]["K"], 128);
    // 96*128 tokens against 8*512: three times the linear-layer work.
    let csv = fs::read_to_string(tmp.path().join("analysis.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("fwd_linear1,")).unwrap();
    let gflop: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!((gflop - 3.0 * 34.359738368).abs() < 1e-3, "{row}");
}

#[test]
fn bad_overrides_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for dim in ["Z=3", "B", "B=x"] {
        let o = dmove(&["analyze", "--bert", "--dim", dim, "--out", out]);
        assert_eq!(code(&o), 1, "{dim}: {}", stderr(&o));
    }
}

#[test]
fn malformed_graph_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    for body in ["", "{}", "{\"dims\": {}, \"tensors\": [], \"operators\": [{\"id\": 1}]}"] {
        let path = tmp.path().join("g.json");
        fs::write(&path, body).unwrap();
        let o = dmove(&["fuse", "--graph", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{body:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("dmove: "), "{}", stderr(&o));
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dmove(&["analyze", "--graph", tmp.path().join("none.json").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn shipped_graph_spec_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/bert_encoder.json");
    let o = dmove(&["fuse", "--graph", spec.to_str().unwrap(), "--variant", "qkv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("fusion_summary.txt")).unwrap();
    assert!(summary.contains("operators: 46 -> 32"), "{summary}");
    let csv = fs::read_to_string(tmp.path().join("fusion.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("BDRLN_2,BDRLN,")), "{csv}");
}

/// Fuse the built-in layer and return the fused graph-spec path.
fn fused_graph(dir: &Path) -> PathBuf {
    let out = dir.join("fused");
    let o = dmove(&["fuse", "--bert", "--variant", "qkv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("fused_graph.json")
}

#[test]
fn costs_required_names_the_uncosted_operator() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = fused_graph(tmp.path());
    let graph = graph.to_str().unwrap();
    let full = fs::read_to_string(data("kernel_costs.csv")).unwrap();
    let partial: String = full.lines().filter(|l| !l.starts_with("BS,")).map(|l| format!("{l}\n")).collect();
    let costs = tmp.path().join("costs.csv");
    fs::write(&costs, partial).unwrap();
    let out = tmp.path().join("o");
    let args = ["select", "--graph", graph, "--costs", costs.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = dmove(&[&args[..], &["--costs-required"]].concat());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("'BS'"), "{}", stderr(&o));
    let o = dmove(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dmove(&["select", "--graph", graph, "--costs", data("kernel_costs.csv").to_str().unwrap(), "--costs-required", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("selection.txt")).unwrap();
    assert!(text.contains("forward pass: 2385.0 us"), "{text}");
}

#[test]
fn bad_cost_rows_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let costs = tmp.path().join("costs.csv");
    fs::write(&costs, "op_id,config_id,runtime_us,source\nfwd_qkv,*,0,measured\n").unwrap();
    let graph = fused_graph(tmp.path());
    let o = dmove(&["select", "--graph", graph.to_str().unwrap(), "--costs", costs.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("positive"), "{}", stderr(&o));
    fs::write(&costs, "op_id,config_id,runtime_us,source\nnot_an_op,*,3,measured\n").unwrap();
    let o = dmove(&["select", "--graph", graph.to_str().unwrap(), "--costs", costs.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("not_an_op"));
}

#[test]
fn validate_passes_on_toy_bert() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dmove(&["validate", "--bert", "--trials", "4", "--samples", "16", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("validation.csv")).unwrap();
    assert!(csv.lines().skip(2).all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn broken_gradient_is_a_numerical_error() {
    let tmp = tempfile::tempdir().unwrap();
    let g = dmove_core::graphir::build_bert_encoder(&dmove_core::graphir::toy_dims()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&dmove_core::graphir::to_graph_spec(&g)).unwrap();
    // Pass the ReLU gradient through unmasked and doubled.
    let op = v["operators"].as_array_mut().unwrap().iter_mut().find(|o| o["id"] == "grad_relu_dx").unwrap();
    op["op_kind"] = "scale".into();
    op["inputs"] = serde_json::json!(["d_ff_relu"]);
    op["factor"] = 2.0.into();
    let path = tmp.path().join("g.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = dmove(&["validate", "--graph", path.to_str().unwrap(), "--trials", "2", "--samples", "8", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("grad_relu_dx"), "{}", stderr(&o));
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let costs = data("kernel_costs.csv");
    for d in [&a, &b] {
        let o = dmove(&["pipeline", "--bert", "--costs", costs.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert!(fa.len() >= 11);
    assert_eq!(fa, fb);
}

#[test]
fn input_layout_pins_the_first_operator() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = dmove(&["pipeline", "--bert", "--input-layout", "I,B,J", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("configuration.json")).unwrap()).unwrap();
    assert_eq!(cfg["operators"]["fwd_qkv"]["tensor_layouts"]["x"], "IBJ");
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("I,B,J"));
    let o = dmove(&["pipeline", "--bert", "--input-layout", "B,J", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("not a permutation"), "{}", stderr(&o));
}
