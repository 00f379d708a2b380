//! Built-in graphs: the BERT-large encoder layer (forward and backward) and a
//! forward-only multi-head attention block.

use super::{
    DataflowGraph, DimTable, Einsum, GradPairing, GraphError, OpKind, OperatorNode, Phase, TensorDesc,
    TensorKind,
};

const BERT_DIMS: [(&str, u64); 8] = [
    ("B", 8),
    ("J", 512),
    ("K", 512),
    ("H", 16),
    ("P", 64),
    ("W", 64),
    ("I", 1024),
    ("U", 4096),
];

/// BERT-large dimensions with mini-batch 8 and sequence length 512.
pub fn default_dims() -> DimTable {
    BERT_DIMS.iter().map(|(s, n)| (s.to_string(), *n)).collect()
}

/// Small dimensions used by the numerical checks.
pub fn toy_dims() -> DimTable {
    [("B", 2), ("J", 8), ("K", 8), ("H", 2), ("P", 4), ("W", 4), ("I", 8), ("U", 32)]
        .iter()
        .map(|(s, n)| (s.to_string(), *n))
        .collect()
}

struct Builder {
    dims: DimTable,
    tensors: Vec<TensorDesc>,
    ops: Vec<OperatorNode>,
}

impl Builder {
    fn new(dims: &DimTable, required: &[&str]) -> Result<Self, GraphError> {
        for s in required {
            if !dims.contains_key(*s) {
                return Err(GraphError::MissingDim(s.to_string()));
            }
        }
        Ok(Builder {
            dims: dims.clone(),
            tensors: Vec::new(),
            ops: Vec::new(),
        })
    }

    fn tensors(&mut self, kind: TensorKind, list: &[(&str, &str)]) {
        for (id, dims) in list {
            self.tensors.push(TensorDesc {
                id: id.to_string(),
                dims: dims.chars().map(|c| c.to_string()).collect(),
                element_bytes: 2,
                kind,
            });
        }
    }

    fn op(&mut self, id: &str, kind: OpKind, phase: Phase, inputs: &[&str], outputs: &[&str]) -> &mut OperatorNode {
        self.ops.push(OperatorNode::new(id, kind, phase, inputs, outputs));
        self.ops.last_mut().unwrap()
    }

    fn contraction(&mut self, id: &str, phase: Phase, einsum: &str, inputs: &[&str], outputs: &[&str]) -> &mut OperatorNode {
        let op = self.op(id, OpKind::Contraction, phase, inputs, outputs);
        op.einsum = Some(Einsum::parse(einsum, &op.inputs, &op.outputs).expect("builtin summation string"));
        op
    }

    fn finish(self) -> Result<DataflowGraph, GraphError> {
        DataflowGraph::new(self.dims, self.tensors, self.ops)
    }
}

trait Annotate {
    fn mha(&mut self) -> &mut Self;
    fn grad(&mut self, of: &str, wrt: &[&str], cot: &[(&str, &str)]) -> &mut Self;
    fn factor(&mut self, f: f64) -> &mut Self;
}

impl Annotate for OperatorNode {
    fn mha(&mut self) -> &mut Self {
        self.mha = true;
        self
    }
    fn grad(&mut self, of: &str, wrt: &[&str], cot: &[(&str, &str)]) -> &mut Self {
        self.grad = Some(GradPairing {
            of: of.to_string(),
            wrt: wrt.iter().map(|s| s.to_string()).collect(),
            cotangents: cot.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        });
        self
    }
    fn factor(&mut self, f: f64) -> &mut Self {
        self.factor = Some(f);
        self
    }
}

use OpKind::*;
use Phase::{BackwardDw as DW, BackwardDx as DX, Forward as FWD};

/// Forward and backward graph of one BERT encoder layer. Operators follow
/// the row order of the per-operator flop table: 19 forward, 27 backward.
pub fn build_bert_encoder(dims: &DimTable) -> Result<DataflowGraph, GraphError> {
    let mut b = Builder::new(dims, &["B", "J", "K", "H", "P", "W", "I", "U"])?;
    let scaler = 1.0 / (dims["P"] as f64).sqrt();

    b.tensors(TensorKind::Input, &[("x", "BJI")]);
    b.tensors(TensorKind::Gradient, &[("d_y", "BJI")]);
    b.tensors(
        TensorKind::Parameter,
        &[
            ("wq", "PHI"),
            ("wk", "PHI"),
            ("wv", "WHI"),
            ("bq", "PH"),
            ("bk", "PH"),
            ("bv", "WH"),
            ("wo", "WHI"),
            ("bo", "I"),
            ("ln1_gamma", "I"),
            ("ln1_beta", "I"),
            ("w1", "UI"),
            ("b1", "U"),
            ("w2", "IU"),
            ("b2", "I"),
            ("ln2_gamma", "I"),
            ("ln2_beta", "I"),
        ],
    );
    b.tensors(
        TensorKind::Activation,
        &[
            ("q", "PHBJ"),
            ("k", "PHBK"),
            ("v", "WHBK"),
            ("qb", "PHBJ"),
            ("kb", "PHBK"),
            ("vb", "WHBK"),
            ("beta", "HBJK"),
            ("alpha_sm", "HBJK"),
            ("alpha_mask", "HBJK"),
            ("alpha", "HBJK"),
            ("gamma", "WHBJ"),
            ("attn_out", "BJI"),
            ("attn_outb", "BJI"),
            ("attn_drop", "BJI"),
            ("attn_mask", "BJI"),
            ("resid1", "BJI"),
            ("ln1_out", "BJI"),
            ("ff1", "BJU"),
            ("ff1b", "BJU"),
            ("ff_relu", "BJU"),
            ("ff_drop", "BJU"),
            ("ff_mask", "BJU"),
            ("ff2", "BJI"),
            ("ff2b", "BJI"),
            ("ff2_drop", "BJI"),
            ("ff2_mask", "BJI"),
            ("resid2", "BJI"),
        ],
    );
    b.tensors(TensorKind::Output, &[("y", "BJI")]);
    b.tensors(
        TensorKind::Gradient,
        &[
            ("d_ln2_gamma", "I"),
            ("d_ln2_beta", "I"),
            ("d_resid2", "BJI"),
            ("d_ff2b", "BJI"),
            ("d_ff_drop", "BJU"),
            ("d_w2", "IU"),
            ("d_b2", "I"),
            ("d_ff_relu", "BJU"),
            ("d_ff1b", "BJU"),
            ("d_b1", "U"),
            ("d_ln1_out_ff", "BJI"),
            ("d_w1", "UI"),
            ("d_ln1_out", "BJI"),
            ("d_ln1_gamma", "I"),
            ("d_ln1_beta", "I"),
            ("d_resid1", "BJI"),
            ("d_attn_outb", "BJI"),
            ("d_bo", "I"),
            ("d_gamma", "WHBJ"),
            ("d_wo", "WHI"),
            ("d_alpha", "HBJK"),
            ("d_vb", "WHBK"),
            ("d_beta", "HBJK"),
            ("d_qb", "PHBJ"),
            ("d_kb", "PHBK"),
            ("d_x_attn", "BJI"),
            ("d_wq", "PHI"),
            ("d_wk", "PHI"),
            ("d_wv", "WHI"),
            ("d_bq", "PH"),
            ("d_bk", "PH"),
            ("d_bv", "WH"),
            ("d_x", "BJI"),
        ],
    );

    // forward
    b.contraction(
        "fwd_qkv",
        FWD,
        "wq[phi],x[bji]->q[phbj];wk[phi],x[bki]->k[phbk];wv[whi],x[bki]->v[whbk]",
        &["x", "wq", "wk", "wv"],
        &["q", "k", "v"],
    )
    .mha();
    b.op("fwd_in_bias", Bias, FWD, &["q", "k", "v", "bq", "bk", "bv"], &["qb", "kb", "vb"]).mha();
    b.contraction("fwd_qkt", FWD, "phbj,phbk->hbjk", &["qb", "kb"], &["beta"]).mha();
    b.op("fwd_softmax", Softmax, FWD, &["beta"], &["alpha_sm", "alpha_mask", "alpha"])
        .mha()
        .factor(scaler);
    b.contraction("fwd_gamma", FWD, "whbk,hbjk->whbj", &["vb", "alpha"], &["gamma"]).mha();
    b.contraction("fwd_out", FWD, "whi,whbj->bji", &["wo", "gamma"], &["attn_out"]).mha();
    b.op("fwd_out_bias", Bias, FWD, &["attn_out", "bo"], &["attn_outb"]).mha();
    b.op("fwd_attn_dropout", Dropout, FWD, &["attn_outb"], &["attn_drop", "attn_mask"]);
    b.op("fwd_attn_residual", Residual, FWD, &["attn_drop", "x"], &["resid1"]);
    b.op("fwd_ln1", LayerNorm, FWD, &["resid1", "ln1_gamma", "ln1_beta"], &["ln1_out"]);
    b.contraction("fwd_linear1", FWD, "bji,ui->bju", &["ln1_out", "w1"], &["ff1"]);
    b.op("fwd_linear1_bias", Bias, FWD, &["ff1", "b1"], &["ff1b"]);
    b.op("fwd_relu", Relu, FWD, &["ff1b"], &["ff_relu"]);
    b.op("fwd_ffn_dropout", Dropout, FWD, &["ff_relu"], &["ff_drop", "ff_mask"]);
    b.contraction("fwd_linear2", FWD, "bju,iu->bji", &["ff_drop", "w2"], &["ff2"]);
    b.op("fwd_linear2_bias", Bias, FWD, &["ff2", "b2"], &["ff2b"]);
    b.op("fwd_ffn_dropout2", Dropout, FWD, &["ff2b"], &["ff2_drop", "ff2_mask"]);
    b.op("fwd_ffn_residual", Residual, FWD, &["ff2_drop", "ln1_out"], &["resid2"]);
    b.op("fwd_ln2", LayerNorm, FWD, &["resid2", "ln2_gamma", "ln2_beta"], &["y"]);

    // backward
    b.op("grad_ln2_dw", LayerNorm, DW, &["d_y", "resid2"], &["d_ln2_gamma", "d_ln2_beta"])
        .grad("fwd_ln2", &["ln2_gamma", "ln2_beta"], &[("y", "d_y")]);
    b.op("grad_ln2_dx", LayerNorm, DX, &["d_y", "resid2", "ln2_gamma"], &["d_resid2"])
        .grad("fwd_ln2", &["resid2"], &[("y", "d_y")]);
    b.op("grad_ffn_dropout2_dx", Dropout, DX, &["d_resid2", "ff2_mask"], &["d_ff2b"])
        .grad("fwd_ffn_dropout2", &["ff2b"], &[("ff2_drop", "d_resid2")]);
    b.contraction("grad_linear2_dx", DX, "bji,iu->bju", &["d_ff2b", "w2"], &["d_ff_drop"])
        .grad("fwd_linear2", &["ff_drop"], &[("ff2", "d_ff2b")]);
    b.contraction("grad_linear2_dw", DW, "bji,bju->iu", &["d_ff2b", "ff_drop"], &["d_w2"])
        .grad("fwd_linear2", &["w2"], &[("ff2", "d_ff2b")]);
    b.op("grad_linear2_bias_dw", ReduceSum, DW, &["d_ff2b"], &["d_b2"])
        .grad("fwd_linear2_bias", &["b2"], &[("ff2b", "d_ff2b")]);
    b.op("grad_ffn_dropout_dx", Dropout, DX, &["d_ff_drop", "ff_mask"], &["d_ff_relu"])
        .grad("fwd_ffn_dropout", &["ff_relu"], &[("ff_drop", "d_ff_drop")]);
    b.op("grad_relu_dx", Relu, DX, &["d_ff_relu", "ff1b"], &["d_ff1b"])
        .grad("fwd_relu", &["ff1b"], &[("ff_relu", "d_ff_relu")]);
    b.op("grad_linear1_bias_dw", ReduceSum, DW, &["d_ff1b"], &["d_b1"])
        .grad("fwd_linear1_bias", &["b1"], &[("ff1b", "d_ff1b")]);
    b.contraction("grad_linear1_dx", DX, "bju,ui->bji", &["d_ff1b", "w1"], &["d_ln1_out_ff"])
        .grad("fwd_linear1", &["ln1_out"], &[("ff1", "d_ff1b")]);
    b.contraction("grad_linear1_dw", DW, "bju,bji->ui", &["d_ff1b", "ln1_out"], &["d_w1"])
        .grad("fwd_linear1", &["w1"], &[("ff1", "d_ff1b")]);
    b.op("grad_ffn_residual", Residual, DX, &["d_ln1_out_ff", "d_resid2"], &["d_ln1_out"])
        .grad("fwd_ffn_residual", &["ln1_out"], &[("resid2", "d_resid2")]);
    b.op("grad_ln1_dw", LayerNorm, DW, &["d_ln1_out", "resid1"], &["d_ln1_gamma", "d_ln1_beta"])
        .grad("fwd_ln1", &["ln1_gamma", "ln1_beta"], &[("ln1_out", "d_ln1_out")]);
    b.op("grad_ln1_dx", LayerNorm, DX, &["d_ln1_out", "resid1", "ln1_gamma"], &["d_resid1"])
        .grad("fwd_ln1", &["resid1"], &[("ln1_out", "d_ln1_out")]);
    b.op("grad_attn_dropout_dx", Dropout, DX, &["d_resid1", "attn_mask"], &["d_attn_outb"])
        .grad("fwd_attn_dropout", &["attn_outb"], &[("attn_drop", "d_resid1")]);
    b.op("grad_out_bias_dw", ReduceSum, DW, &["d_attn_outb"], &["d_bo"])
        .mha()
        .grad("fwd_out_bias", &["bo"], &[("attn_outb", "d_attn_outb")]);
    b.contraction("grad_out_dx", DX, "whi,bji->whbj", &["wo", "d_attn_outb"], &["d_gamma"])
        .mha()
        .grad("fwd_out", &["gamma"], &[("attn_out", "d_attn_outb")]);
    b.contraction("grad_out_dw", DW, "whbj,bji->whi", &["gamma", "d_attn_outb"], &["d_wo"])
        .mha()
        .grad("fwd_out", &["wo"], &[("attn_out", "d_attn_outb")]);
    b.contraction("grad_gamma_dx1", DX, "whbj,whbk->hbjk", &["d_gamma", "vb"], &["d_alpha"])
        .mha()
        .grad("fwd_gamma", &["alpha"], &[("gamma", "d_gamma")]);
    b.contraction("grad_gamma_dx2", DX, "whbj,hbjk->whbk", &["d_gamma", "alpha"], &["d_vb"])
        .mha()
        .grad("fwd_gamma", &["vb"], &[("gamma", "d_gamma")]);
    b.op("grad_softmax_dx", Softmax, DX, &["d_alpha", "alpha_mask", "alpha_sm"], &["d_beta"])
        .mha()
        .factor(scaler)
        .grad("fwd_softmax", &["beta"], &[("alpha", "d_alpha")]);
    b.contraction("grad_qkt_dx1", DX, "hbjk,phbk->phbj", &["d_beta", "kb"], &["d_qb"])
        .mha()
        .grad("fwd_qkt", &["qb"], &[("beta", "d_beta")]);
    b.contraction("grad_qkt_dx2", DX, "hbjk,phbj->phbk", &["d_beta", "qb"], &["d_kb"])
        .mha()
        .grad("fwd_qkt", &["kb"], &[("beta", "d_beta")]);
    b.contraction(
        "grad_qkv_dx",
        DX,
        "wq[phi],d_qb[phbj]->d_x_attn[bji];wk[phi],d_kb[phbj]->d_x_attn[bji];wv[whi],d_vb[whbj]->d_x_attn[bji]",
        &["d_qb", "d_kb", "d_vb", "wq", "wk", "wv"],
        &["d_x_attn"],
    )
    .mha()
    .grad("fwd_qkv", &["x"], &[("q", "d_qb"), ("k", "d_kb"), ("v", "d_vb")]);
    b.contraction(
        "grad_qkv_dw",
        DW,
        "d_qb[phbj],x[bji]->d_wq[phi];d_kb[phbj],x[bji]->d_wk[phi];d_vb[whbj],x[bji]->d_wv[whi]",
        &["d_qb", "d_kb", "d_vb", "x"],
        &["d_wq", "d_wk", "d_wv"],
    )
    .mha()
    .grad("fwd_qkv", &["wq", "wk", "wv"], &[("q", "d_qb"), ("k", "d_kb"), ("v", "d_vb")]);
    b.op("grad_in_bias_dw", ReduceSum, DW, &["d_qb", "d_kb", "d_vb"], &["d_bq", "d_bk", "d_bv"])
        .mha()
        .grad("fwd_in_bias", &["bq", "bk", "bv"], &[("qb", "d_qb"), ("kb", "d_kb"), ("vb", "d_vb")]);
    b.op("grad_input_residual", Residual, DX, &["d_x_attn", "d_resid1"], &["d_x"])
        .grad("fwd_attn_residual", &["x"], &[("resid1", "d_resid1")]);

    b.finish()
}

/// Attention variants for [`build_mha`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    /// Queries, keys and values all project the same input `x`.
    SelfAttention,
    /// Queries project `x`; keys and values project a separate memory `mem`.
    EncoderDecoder,
}

/// Forward multi-head attention with separate Q, K and V projections.
pub fn build_mha(dims: &DimTable, attention: Attention) -> Result<DataflowGraph, GraphError> {
    let mut b = Builder::new(dims, &["B", "J", "K", "H", "P", "W", "I"])?;
    let scaler = 1.0 / (dims["P"] as f64).sqrt();
    let src = match attention {
        Attention::SelfAttention => "x",
        Attention::EncoderDecoder => "mem",
    };
    b.tensors(TensorKind::Input, &[("x", "BJI")]);
    if attention == Attention::EncoderDecoder {
        b.tensors(TensorKind::Input, &[("mem", "BKI")]);
    }
    b.tensors(
        TensorKind::Parameter,
        &[
            ("wq", "PHI"),
            ("wk", "PHI"),
            ("wv", "WHI"),
            ("bq", "PH"),
            ("bk", "PH"),
            ("bv", "WH"),
            ("wo", "WHI"),
            ("bo", "I"),
        ],
    );
    b.tensors(
        TensorKind::Activation,
        &[
            ("q", "PHBJ"),
            ("k", "PHBK"),
            ("v", "WHBK"),
            ("qb", "PHBJ"),
            ("kb", "PHBK"),
            ("vb", "WHBK"),
            ("beta", "HBJK"),
            ("alpha_sm", "HBJK"),
            ("alpha_mask", "HBJK"),
            ("alpha", "HBJK"),
            ("gamma", "WHBJ"),
            ("attn_out", "BJI"),
        ],
    );
    b.tensors(TensorKind::Output, &[("attn_outb", "BJI")]);
    b.contraction("fwd_q", FWD, "wq[phi],x[bji]->q[phbj]", &["x", "wq"], &["q"]).mha();
    let k = format!("wk[phi],{src}[bki]->k[phbk]");
    let v = format!("wv[whi],{src}[bki]->v[whbk]");
    b.contraction("fwd_k", FWD, &k, &[src, "wk"], &["k"]).mha();
    b.contraction("fwd_v", FWD, &v, &[src, "wv"], &["v"]).mha();
    b.op("fwd_in_bias", Bias, FWD, &["q", "k", "v", "bq", "bk", "bv"], &["qb", "kb", "vb"]).mha();
    b.contraction("fwd_qkt", FWD, "phbj,phbk->hbjk", &["qb", "kb"], &["beta"]).mha();
    b.op("fwd_softmax", Softmax, FWD, &["beta"], &["alpha_sm", "alpha_mask", "alpha"])
        .mha()
        .factor(scaler);
    b.contraction("fwd_gamma", FWD, "whbk,hbjk->whbj", &["vb", "alpha"], &["gamma"]).mha();
    b.contraction("fwd_out", FWD, "whi,whbj->bji", &["wo", "gamma"], &["attn_out"]).mha();
    b.op("fwd_out_bias", Bias, FWD, &["attn_out", "bo"], &["attn_outb"]).mha();
    b.finish()
}
