//! Summation strings for contraction operators.
//!
//! Two textual forms are accepted. The positional form `"phi,bji->phbj"`
//! binds operands to the operator's inputs in order and the result to its
//! first output. The named form lists one or more terms separated by `;`,
//! each binding tensors explicitly: `"wq[phi],x[bji]->q[phbj];wk[phi],x[bki]->k[phbk]"`.
//! Terms that write the same output accumulate into it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operand {
    pub tensor: String,
    pub indices: Vec<char>,
}

impl Operand {
    pub fn index_string(&self) -> String {
        self.indices.iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EinsumTerm {
    pub operands: Vec<Operand>,
    pub output: Operand,
}

impl EinsumTerm {
    /// Distinct indices in first-appearance order (output first, then operands).
    pub fn all_indices(&self) -> Vec<char> {
        let mut seen = Vec::new();
        for c in self
            .output
            .indices
            .iter()
            .chain(self.operands.iter().flat_map(|o| o.indices.iter()))
        {
            if !seen.contains(c) {
                seen.push(*c);
            }
        }
        seen
    }

    /// Indices summed over: present in an operand but not in the output.
    pub fn summed_indices(&self) -> Vec<char> {
        let mut out = Vec::new();
        for o in &self.operands {
            for c in &o.indices {
                if !self.output.indices.contains(c) && !out.contains(c) {
                    out.push(*c);
                }
            }
        }
        out
    }

    /// Plain `a,b->c` text of this term.
    pub fn plain(&self) -> String {
        let ops: Vec<String> = self.operands.iter().map(|o| o.index_string()).collect();
        format!("{}->{}", ops.join(","), self.output.index_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Einsum {
    pub terms: Vec<EinsumTerm>,
}

fn parse_indices(s: &str) -> Result<Vec<char>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty index string".into());
    }
    let v: Vec<char> = s.chars().collect();
    if let Some(c) = v.iter().find(|c| !c.is_ascii_alphabetic()) {
        return Err(format!("invalid index character '{c}'"));
    }
    Ok(v)
}

fn parse_named(s: &str) -> Result<Operand, String> {
    let s = s.trim();
    let open = s
        .find('[')
        .ok_or_else(|| format!("expected tensor[indices] but found '{s}'"))?;
    if !s.ends_with(']') {
        return Err(format!("unterminated index list in '{s}'"));
    }
    let tensor = s[..open].trim();
    if tensor.is_empty() {
        return Err(format!("missing tensor name in '{s}'"));
    }
    Ok(Operand {
        tensor: tensor.to_string(),
        indices: parse_indices(&s[open + 1..s.len() - 1])?,
    })
}

impl Einsum {
    /// Parse either textual form against the operator's tensor lists.
    pub fn parse(text: &str, inputs: &[String], outputs: &[String]) -> Result<Self, String> {
        if text.contains('[') {
            let mut terms = Vec::new();
            for part in text.split(';') {
                let (lhs, rhs) = part
                    .split_once("->")
                    .ok_or_else(|| format!("term '{}' has no '->'", part.trim()))?;
                let operands = lhs
                    .split(',')
                    .map(parse_named)
                    .collect::<Result<Vec<_>, _>>()?;
                terms.push(EinsumTerm {
                    operands,
                    output: parse_named(rhs)?,
                });
            }
            Ok(Einsum { terms })
        } else {
            if text.contains(';') {
                return Err("multi-term summation strings must name their tensors".into());
            }
            let (lhs, rhs) = text
                .split_once("->")
                .ok_or_else(|| "summation string has no '->'".to_string())?;
            let idx: Vec<&str> = lhs.split(',').collect();
            if idx.len() != inputs.len() {
                return Err(format!(
                    "positional summation string has {} operands but operator has {} inputs",
                    idx.len(),
                    inputs.len()
                ));
            }
            if outputs.len() != 1 {
                return Err("positional summation string requires exactly one output".into());
            }
            let operands = idx
                .iter()
                .zip(inputs)
                .map(|(s, t)| {
                    Ok(Operand {
                        tensor: t.clone(),
                        indices: parse_indices(s)?,
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(Einsum {
                terms: vec![EinsumTerm {
                    operands,
                    output: Operand {
                        tensor: outputs[0].clone(),
                        indices: parse_indices(rhs)?,
                    },
                }],
            })
        }
    }

    /// Shortest text that parses back to this einsum for the given tensor lists.
    pub fn to_text(&self, inputs: &[String], outputs: &[String]) -> String {
        if self.terms.len() == 1 {
            let t = &self.terms[0];
            let positional = outputs.len() == 1
                && t.output.tensor == outputs[0]
                && t.operands.len() == inputs.len()
                && t.operands.iter().zip(inputs).all(|(o, i)| &o.tensor == i);
            if positional {
                return t.plain();
            }
        }
        let mut s = String::new();
        for (n, t) in self.terms.iter().enumerate() {
            if n > 0 {
                s.push(';');
            }
            for (k, o) in t.operands.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}[{}]", o.tensor, o.index_string());
            }
            let _ = write!(s, "->{}[{}]", t.output.tensor, t.output.index_string());
        }
        s
    }

    /// Check the einsum against tensor shapes. `shape` maps a tensor id to
    /// its extents. Index extents must agree within each term.
    pub fn check(
        &self,
        inputs: &[String],
        outputs: &[String],
        shape: impl Fn(&str) -> Option<Vec<u64>>,
    ) -> Result<(), String> {
        if self.terms.is_empty() {
            return Err("no terms".into());
        }
        for t in &self.terms {
            let mut extent: BTreeMap<char, u64> = BTreeMap::new();
            if t.operands.is_empty() {
                return Err("term without operands".into());
            }
            for o in t.operands.iter().chain(std::iter::once(&t.output)) {
                let dims = shape(&o.tensor).ok_or_else(|| format!("unknown tensor '{}'", o.tensor))?;
                if dims.len() != o.indices.len() {
                    return Err(format!(
                        "tensor '{}' has rank {} but indices '{}'",
                        o.tensor,
                        dims.len(),
                        o.index_string()
                    ));
                }
                let mut local = Vec::new();
                for (c, d) in o.indices.iter().zip(&dims) {
                    if local.contains(c) {
                        return Err(format!("repeated index '{c}' on tensor '{}'", o.tensor));
                    }
                    local.push(*c);
                    match extent.get(c) {
                        Some(e) if e != d => {
                            return Err(format!("index '{c}' has extents {e} and {d}"));
                        }
                        _ => {
                            extent.insert(*c, *d);
                        }
                    }
                }
            }
            for c in &t.output.indices {
                if !t.operands.iter().any(|o| o.indices.contains(c)) {
                    return Err(format!("output index '{c}' does not appear in any operand"));
                }
            }
            for o in &t.operands {
                if !inputs.contains(&o.tensor) {
                    return Err(format!("operand '{}' is not an operator input", o.tensor));
                }
            }
            if !outputs.contains(&t.output.tensor) {
                return Err(format!("result '{}' is not an operator output", t.output.tensor));
            }
        }
        for i in inputs {
            if !self.terms.iter().any(|t| t.operands.iter().any(|o| &o.tensor == i)) {
                return Err(format!("input '{i}' is not used by any term"));
            }
        }
        for o in outputs {
            if !self.terms.iter().any(|t| &t.output.tensor == o) {
                return Err(format!("output '{o}' is not written by any term"));
            }
        }
        Ok(())
    }
}
