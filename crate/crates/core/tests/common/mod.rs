//! Per-operator reference table shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct Row {
    pub label: String,
    pub op_id: String,
    pub gflop: f64,
    /// Printed value, `<0.01` kept verbatim.
    pub input_me: String,
    pub output_me: String,
    pub group: String,
    pub ours_us: Option<f64>,
    pub ours_pct_peak: Option<f64>,
    pub ours_mue: Option<f64>,
    pub bold: String,
}

pub fn reference_ops() -> Vec<Row> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_ops.csv");
    let text = std::fs::read_to_string(path).unwrap();
    let num = |s: &str| if s.is_empty() { None } else { Some(s.parse::<f64>().unwrap()) };
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Row {
                label: f[0].into(),
                op_id: f[1].into(),
                gflop: f[2].parse().unwrap(),
                input_me: f[3].into(),
                output_me: f[4].into(),
                group: f[5].into(),
                ours_us: num(f[6]),
                ours_pct_peak: num(f[7]),
                ours_mue: num(f[8]),
                bold: f[9].into(),
            }
        })
        .collect()
}

/// Words printed the way the table does: millions with two decimals.
pub fn me(words: u64) -> String {
    if words < 5_000 {
        "<0.01".into()
    } else {
        format!("{:.2}", words as f64 / 1e6)
    }
}
