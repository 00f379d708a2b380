//! Kernel names from the member-kind sequence of a fused group.

use crate::graphir::{OpKind, OperatorNode, Phase};

fn letter(op: &OperatorNode) -> &'static str {
    match op.op_kind {
        OpKind::Bias => "B",
        OpKind::Dropout => "D",
        OpKind::Relu => "R",
        OpKind::Residual => "E",
        OpKind::LayerNorm => "L",
        OpKind::Softmax => "S",
        OpKind::Scale => "C",
        OpKind::ReduceSum => "U",
        OpKind::Contraction => "M",
        OpKind::Composite => "X",
    }
}

/// Catalogue name for a group, or a generic name built from member kinds.
pub fn kernel_name(members: &[&OperatorNode]) -> String {
    use OpKind::*;
    let kinds: Vec<OpKind> = members.iter().map(|m| m.op_kind).collect();
    let backward = members[0].phase.is_backward();
    let first = members[0];
    let named = match (backward, kinds.as_slice()) {
        (false, [Bias]) if first.lanes() > 1 => Some("AIB"),
        (false, [Softmax]) => Some("SM"),
        (false, [Bias, Relu, Dropout]) => Some("BRD"),
        (false, [Bias, Dropout, Residual, LayerNorm]) => Some("BDRLN"),
        (true, [LayerNorm]) if first.phase == Phase::BackwardDw => Some("BSB"),
        (true, [LayerNorm, Dropout]) if first.phase == Phase::BackwardDx => Some("BLNRD"),
        (true, [ReduceSum, Dropout, Relu, ReduceSum]) | (true, [Dropout, Relu, ReduceSum]) => Some("BDRB"),
        (true, [Residual, LayerNorm]) if members[1].phase == Phase::BackwardDw => Some("EBSB"),
        (true, [ReduceSum]) if first.lanes() > 1 => Some("BAIB"),
        (true, [ReduceSum]) => Some("BAOB"),
        (true, [Softmax]) => Some("BS"),
        (true, [Residual]) => Some("BEI"),
        _ => None,
    };
    match named {
        Some(n) => n.to_string(),
        None => {
            let body: String = members.iter().map(|m| letter(m)).collect();
            format!("{}{}", if backward { "G" } else { "F" }, body)
        }
    }
}
